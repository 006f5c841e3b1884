//! Adam with bias correction.

use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::with_lr(1e-3)
    }
}

#[derive(Debug, PartialEq, Eq, Clone, Copy)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or infinity; the step was skipped entirely
    /// and no optimizer state advanced.
    SkippedNonFinite,
}

/// Optimizer state for one `ParamSet`; moment buffers are allocated per
/// parameter at construction and indexed by parameter key.
pub struct Adam<S: Scalar> {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<S>) -> Self {
        let m = (0..params.len())
            .map(|k| vec![S::ZERO; params.get(k).numel()])
            .collect();
        let v = (0..params.len())
            .map(|k| vec![S::ZERO; params.get(k).numel()])
            .collect();
        Adam { cfg, t: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update from `(key, gradient)` pairs. If any gradient is
    /// non-finite the whole step is skipped and the outcome says so.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &[(usize, Tensor<S>)]) -> StepOutcome {
        for (_, g) in grads {
            if !g.all_finite() {
                return StepOutcome::SkippedNonFinite;
            }
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let corr1 = 1.0 - b1.powi(self.t as i32);
        let corr2 = 1.0 - b2.powi(self.t as i32);
        let (b1s, b2s) = (S::from_f64(b1), S::from_f64(b2));
        let (nb1, nb2) = (S::from_f64(1.0 - b1), S::from_f64(1.0 - b2));
        let lr = S::from_f64(self.cfg.lr);
        let eps = S::from_f64(self.cfg.eps);
        let (c1, c2) = (S::from_f64(corr1), S::from_f64(corr2));

        for (key, grad) in grads {
            let m = &mut self.m[*key];
            let v = &mut self.v[*key];
            let p = params.get_mut(*key);
            debug_assert_eq!(p.numel(), grad.numel());
            for i in 0..p.numel() {
                let g = grad.data()[i];
                m[i] = b1s * m[i] + nb1 * g;
                v[i] = b2s * v[i] + nb2 * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                let d = p.data_mut();
                d[i] = d[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        StepOutcome::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(value));
        ps
    }

    #[test]
    fn first_step_magnitude_matches_hand_computation() {
        // With g = 1 and defaults, bias correction makes the first update
        // lr * 1 / (1 + eps) = 9.99999990e-4.
        let mut ps = single_param(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        let outcome = opt.step(&mut ps, &[(0, Tensor::scalar(1.0))]);
        assert_eq!(outcome, StepOutcome::Applied);
        let step = -ps.get(0).item();
        assert!((step - 0.000_999_999_99).abs() < 1e-12, "step = {step}");
    }

    #[test]
    fn nan_gradient_skips_step_and_leaves_state_untouched() {
        let mut ps = single_param(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        let outcome = opt.step(&mut ps, &[(0, Tensor::scalar(f64::NAN))]);
        assert_eq!(outcome, StepOutcome::SkippedNonFinite);
        assert_eq!(ps.get(0).item(), 1.0);
        assert_eq!(opt.steps_taken(), 0);
        // A clean step afterwards behaves like the very first one.
        opt.step(&mut ps, &[(0, Tensor::scalar(1.0))]);
        assert!((1.0 - ps.get(0).item() - 0.000_999_999_99).abs() < 1e-12);
    }

    #[test]
    fn descends_a_simple_quadratic() {
        // minimize (w - 3)^2 from w = 0.
        let mut ps = single_param(0.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), &ps);
        for _ in 0..2000 {
            let w = ps.get(0).item();
            let g = 2.0 * (w - 3.0);
            opt.step(&mut ps, &[(0, Tensor::scalar(g))]);
        }
        assert!((ps.get(0).item() - 3.0).abs() < 1e-2);
    }
}
