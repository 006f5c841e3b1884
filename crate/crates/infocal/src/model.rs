//! The rationale-extraction networks and their losses: selector, predictor,
//! guider with a variational Gaussian feature, and the adversarial
//! discriminator that calibrates the predictor's feature against the
//! guider's.
//!
//! The selector emits per-token selection probabilities and relaxed binary
//! masks via a two-class Gumbel-softmax over {select, skip}. The predictor
//! encodes mask-scaled embeddings into a dense feature and classifies it.
//! The guider encodes the full input and samples its feature with the
//! Gaussian reparameterization trick; its classification head shares the
//! predictor's weights.

use rand::Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use thiserror::Error;

use crate::data::Label;
use crate::nn::{
    encode_tokens, register_encoder, register_linear, uniform_init, BiGru, EncoderKeys, LinearB,
    LinearKeys, ParamSet,
};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("selector requires a non-empty sequence")]
    EmptySequence,
    #[error("label {label} invalid for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("classification requires a class label, got a real score")]
    ScoreLabelInClassification,
    #[error("prior probability {0} is degenerate; need values strictly inside (0,1)")]
    DegeneratePrior(f64),
    #[error("loss_mi requires strictly positive sigma")]
    NonPositiveSigma,
    #[error("bad model config: {0}")]
    BadConfig(String),
}

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub task: TaskKind,
}

impl ModelConfig {
    /// Width of the encoder features z and z-tilde (both directions).
    pub fn feature_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn out_dim(&self) -> usize {
        match self.task {
            TaskKind::Classification => self.n_classes,
            TaskKind::Regression => 1,
        }
    }

    fn validate(&self) -> ModelResult<()> {
        if self.vocab_size < 2 {
            return Err(ModelError::BadConfig("vocab_size must be >= 2".into()));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(ModelError::BadConfig("zero-sized layer".into()));
        }
        if self.task == TaskKind::Classification && self.n_classes < 2 {
            return Err(ModelError::BadConfig(
                "classification needs at least 2 classes".into(),
            ));
        }
        Ok(())
    }
}

/// Variational prior over the per-token selection variable.
#[derive(Debug, Clone, Copy)]
pub struct IbPrior {
    pub r0: f64,
    pub r1: f64,
}

impl IbPrior {
    /// Prior from the target selection rate r1; r0 is its complement.
    pub fn select_rate(r1: f64) -> ModelResult<IbPrior> {
        if !(r1 > 0.0 && r1 < 1.0) {
            return Err(ModelError::DegeneratePrior(r1));
        }
        Ok(IbPrior { r0: 1.0 - r1, r1 })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelKeys {
    pub sel_embed: usize,
    pub sel_enc: EncoderKeys,
    pub sel_head: LinearKeys,
    pub pred_embed: usize,
    pub pred_enc: EncoderKeys,
    pub pred_head: LinearKeys,
    pub guide_embed: usize,
    pub guide_enc: EncoderKeys,
    pub guide_mu: LinearKeys,
    pub guide_sigma: LinearKeys,
}

#[derive(Debug, Clone, Copy)]
pub struct DiscKeys {
    pub l1: LinearKeys,
    pub l2: LinearKeys,
}

/// Generator-side parameters (selector + predictor + guider) and the
/// separately-optimized discriminator parameters.
pub struct InfoCalModel<S: Scalar> {
    pub cfg: ModelConfig,
    pub gen: ParamSet<S>,
    pub disc: ParamSet<S>,
    pub keys: ModelKeys,
    pub disc_keys: DiscKeys,
}

impl<S: Scalar> InfoCalModel<S> {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> ModelResult<InfoCalModel<S>> {
        cfg.validate()?;
        let f = cfg.feature_dim();
        let mut gen: ParamSet<S> = ParamSet::new();
        let sel_embed = gen.insert(
            "selector.embed",
            uniform_init(cfg.vocab_size, cfg.embed_dim, 0.1, rng),
        );
        let sel_enc = register_encoder(&mut gen, "selector.enc", cfg.embed_dim, cfg.hidden_dim, rng);
        let sel_head = register_linear(&mut gen, "selector.head", f, 1, false, rng);
        let pred_embed = gen.insert(
            "predictor.embed",
            uniform_init(cfg.vocab_size, cfg.embed_dim, 0.1, rng),
        );
        let pred_enc =
            register_encoder(&mut gen, "predictor.enc", cfg.embed_dim, cfg.hidden_dim, rng);
        let pred_head = register_linear(&mut gen, "predictor.head", f, cfg.out_dim(), false, rng);
        let guide_embed = gen.insert(
            "guider.embed",
            uniform_init(cfg.vocab_size, cfg.embed_dim, 0.1, rng),
        );
        let guide_enc = register_encoder(&mut gen, "guider.enc", cfg.embed_dim, cfg.hidden_dim, rng);
        let guide_mu = register_linear(&mut gen, "guider.mu", f, f, false, rng);
        let guide_sigma = register_linear(&mut gen, "guider.sigma", f, f, false, rng);

        let mut disc: ParamSet<S> = ParamSet::new();
        let l1 = register_linear(&mut disc, "discriminator.l1", f, f, false, rng);
        let l2 = register_linear(&mut disc, "discriminator.l2", f, 1, true, rng);

        Ok(InfoCalModel {
            cfg,
            gen,
            disc,
            keys: ModelKeys {
                sel_embed,
                sel_enc,
                sel_head,
                pred_embed,
                pred_enc,
                pred_head,
                guide_embed,
                guide_enc,
                guide_mu,
                guide_sigma,
            },
            disc_keys: DiscKeys { l1, l2 },
        })
    }

    /// Same parameters at a different precision; keys stay valid because the
    /// cast preserves insertion order.
    pub fn cast<T: Scalar>(&self) -> InfoCalModel<T> {
        InfoCalModel {
            cfg: self.cfg.clone(),
            gen: self.gen.cast(),
            disc: self.disc.cast(),
            keys: self.keys,
            disc_keys: self.disc_keys,
        }
    }
}

/// All generator networks bound onto one tape.
pub struct GenBinding {
    pub sel_embed: Var,
    pub sel_enc: BiGru,
    pub sel_head: LinearB,
    pub pred_embed: Var,
    pub pred_enc: BiGru,
    pub pred_head: LinearB,
    pub guide_embed: Var,
    pub guide_enc: BiGru,
    pub guide_mu: LinearB,
    pub guide_sigma: LinearB,
}

impl GenBinding {
    pub fn bind<S: Scalar>(tape: &mut Tape<S>, model: &InfoCalModel<S>) -> ModelResult<GenBinding> {
        let ps = &model.gen;
        let k = &model.keys;
        Ok(GenBinding {
            sel_embed: ps.bind(tape, k.sel_embed)?,
            sel_enc: BiGru::bind(tape, ps, &k.sel_enc)?,
            sel_head: LinearB::bind(tape, ps, k.sel_head)?,
            pred_embed: ps.bind(tape, k.pred_embed)?,
            pred_enc: BiGru::bind(tape, ps, &k.pred_enc)?,
            pred_head: LinearB::bind(tape, ps, k.pred_head)?,
            guide_embed: ps.bind(tape, k.guide_embed)?,
            guide_enc: BiGru::bind(tape, ps, &k.guide_enc)?,
            guide_mu: LinearB::bind(tape, ps, k.guide_mu)?,
            guide_sigma: LinearB::bind(tape, ps, k.guide_sigma)?,
        })
    }

    /// Bind every generator tensor as a constant; used for evaluation and
    /// for feeding detached features to the discriminator step.
    pub fn bind_frozen<S: Scalar>(tape: &mut Tape<S>, model: &InfoCalModel<S>) -> GenBinding {
        let ps = &model.gen;
        let k = &model.keys;
        GenBinding {
            sel_embed: ps.bind_frozen(tape, k.sel_embed),
            sel_enc: BiGru::bind_frozen(tape, ps, &k.sel_enc),
            sel_head: LinearB::bind_frozen(tape, ps, k.sel_head),
            pred_embed: ps.bind_frozen(tape, k.pred_embed),
            pred_enc: BiGru::bind_frozen(tape, ps, &k.pred_enc),
            pred_head: LinearB::bind_frozen(tape, ps, k.pred_head),
            guide_embed: ps.bind_frozen(tape, k.guide_embed),
            guide_enc: BiGru::bind_frozen(tape, ps, &k.guide_enc),
            guide_mu: LinearB::bind_frozen(tape, ps, k.guide_mu),
            guide_sigma: LinearB::bind_frozen(tape, ps, k.guide_sigma),
        }
    }

    /// Per-token selection probabilities, `[n, 1]`, squashed into
    /// `[1e-6, 1-1e-6]`.
    pub fn selector_probs<S: Scalar>(&self, tape: &mut Tape<S>, ids: &[usize]) -> ModelResult<Var> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let enc = encode_tokens(tape, self.sel_embed, &self.sel_enc, ids)?;
        let logits = self.sel_head.apply(tape, enc.states)?;
        Ok(tape.squash_prob(logits)?)
    }

    /// Selector probabilities plus sampled relaxed masks and the Gumbel noise
    /// record behind them.
    pub fn select<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ids: &[usize],
        tau: f64,
        rng: &mut impl Rng,
    ) -> ModelResult<SelectorForward> {
        let probs = self.selector_probs(tape, ids)?;
        let noise = draw_gumbel_pairs(ids.len(), rng);
        let masks = masks_from_noise(tape, probs, tau, &noise)?;
        Ok(SelectorForward {
            probs,
            masks,
            noise,
        })
    }

    /// Encode mask-scaled embeddings and classify the resulting feature.
    /// `masks` is `[n, 1]`, either relaxed (on-tape) or a binary constant.
    pub fn predict<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ids: &[usize],
        masks: Var,
        task: TaskKind,
    ) -> ModelResult<PredictForward> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let x = tape.gather_rows(self.pred_embed, ids)?;
        let cols = tape.value(x).cols();
        let wide = tape.broadcast(masks, &[ids.len(), cols])?;
        let masked = tape.mul(x, wide)?;
        let enc = self.pred_enc.encode(tape, masked)?;
        let logits = self.pred_head.apply(tape, enc.feature)?;
        let dist = match task {
            TaskKind::Classification => tape.softmax_lastdim(logits)?,
            TaskKind::Regression => tape.sigmoid(logits),
        };
        Ok(PredictForward {
            feature: enc.feature,
            dist,
        })
    }

    /// Guider forward pass with explicit standard-normal noise.
    pub fn guide_with_noise<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ids: &[usize],
        u: &[f64],
        task: TaskKind,
    ) -> ModelResult<GuideForward> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let enc = encode_tokens(tape, self.guide_embed, &self.guide_enc, ids)?;
        let mu = self.guide_mu.apply(tape, enc.feature)?;
        let pre = self.guide_sigma.apply(tape, enc.feature)?;
        let soft = tape.softplus(pre)?;
        let sigma = tape.add_scalar(soft, 1e-6)?;
        let f = tape.value(mu).cols();
        assert_eq!(u.len(), f, "noise width must match the feature width");
        let u_var = tape.constant(Tensor::new(
            vec![1, f],
            u.iter().map(|&x| S::from_f64(x)).collect(),
        ));
        let scaled = tape.mul(u_var, sigma)?;
        let z = tape.add(scaled, mu)?;
        let logits = self.pred_head.apply(tape, z)?;
        let dist = match task {
            TaskKind::Classification => tape.softmax_lastdim(logits)?,
            TaskKind::Regression => tape.sigmoid(logits),
        };
        Ok(GuideForward {
            mu,
            sigma,
            z,
            dist,
            noise: u.to_vec(),
        })
    }

    pub fn guide<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ids: &[usize],
        task: TaskKind,
        rng: &mut impl Rng,
    ) -> ModelResult<GuideForward> {
        let f = tape.value(self.guide_mu.w).cols();
        let u: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
        self.guide_with_noise(tape, ids, &u, task)
    }
}

pub struct SelectorForward {
    pub probs: Var,
    pub masks: Var,
    /// (g_select, g_skip) per token, recorded for reproducibility.
    pub noise: Vec<(f64, f64)>,
}

pub struct PredictForward {
    pub feature: Var,
    pub dist: Var,
}

pub struct GuideForward {
    pub mu: Var,
    pub sigma: Var,
    pub z: Var,
    pub dist: Var,
    pub noise: Vec<f64>,
}

pub fn draw_gumbel_pairs(n: usize, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
    (0..n)
        .map(|_| (gumbel.sample(rng), gumbel.sample(rng)))
        .collect()
}

/// Two-class Gumbel-softmax over {select, skip} with logits
/// {log p, log(1-p)}: m = sigmoid((logit(p) + g1 - g2) / tau).
pub fn masks_from_noise<S: Scalar>(
    tape: &mut Tape<S>,
    probs: Var,
    tau: f64,
    noise: &[(f64, f64)],
) -> ModelResult<Var> {
    if !(tau > 0.0) {
        return Err(ModelError::BadTemperature(tau));
    }
    let n = tape.value(probs).rows();
    assert_eq!(noise.len(), n, "one noise pair per token");
    let lp = tape.log(probs);
    let om = tape.one_minus(probs)?;
    let l1p = tape.log(om);
    let logit = tape.sub(lp, l1p)?;
    let diff = tape.constant(Tensor::new(
        vec![n, 1],
        noise.iter().map(|&(a, b)| S::from_f64(a - b)).collect(),
    ));
    let shifted = tape.add(logit, diff)?;
    let scaled = tape.scale(shifted, 1.0 / tau)?;
    Ok(tape.sigmoid(scaled))
}

/// Deterministic inference-time binarization: select iff p >= 0.5.
pub fn binarize_probs<S: Scalar>(probs: &Tensor<S>) -> Vec<bool> {
    probs.data().iter().map(|p| p.to_f64() >= 0.5).collect()
}

/// A binary keep-mask as a `[n, 1]` constant.
pub fn mask_var<S: Scalar>(tape: &mut Tape<S>, mask: &[bool]) -> Var {
    tape.constant(Tensor::new(
        vec![mask.len(), 1],
        mask.iter()
            .map(|&m| if m { S::ONE } else { S::ZERO })
            .collect(),
    ))
}

/// Negative log-likelihood of the label under `dist` (classification) or
/// squared error (regression). Single instance; batches average outside.
pub fn prediction_loss<S: Scalar>(
    tape: &mut Tape<S>,
    dist: Var,
    label: Label,
    task: TaskKind,
) -> ModelResult<Var> {
    match task {
        TaskKind::Classification => {
            let c = tape.value(dist).numel();
            let y = match label {
                Label::Class(y) => y,
                Label::Score(_) => return Err(ModelError::ScoreLabelInClassification),
            };
            if y >= c {
                return Err(ModelError::BadLabel {
                    label: y,
                    classes: c,
                });
            }
            let mut onehot = Tensor::zeros(vec![1, c]);
            onehot.data_mut()[y] = S::ONE;
            let oh = tape.constant(onehot);
            let lg = tape.log(dist);
            let picked = tape.mul(lg, oh)?;
            let s = tape.sum(picked);
            Ok(tape.scale(s, -1.0)?)
        }
        TaskKind::Regression => {
            let y = label.as_score();
            let target = tape.constant(Tensor::new(vec![1, 1], vec![S::from_f64(y)]));
            let d = tape.sub(dist, target)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.sum(sq))
        }
    }
}

/// Variational bound on the label information carried by the masked
/// feature, for a whole batch: the mean negative log-likelihood of the
/// labels under the predictor's distributions (the label-entropy constant
/// is dropped). Maximizing that information and minimizing the averaged
/// per-instance prediction losses are the same computation, which
/// `surrogate_equals_mean_prediction_loss` pins down.
pub fn label_information_surrogate<S: Scalar>(
    tape: &mut Tape<S>,
    dists: &[Var],
    labels: &[Label],
    task: TaskKind,
) -> ModelResult<Var> {
    assert_eq!(dists.len(), labels.len(), "one label per distribution");
    assert!(!dists.is_empty(), "surrogate needs a non-empty batch");
    let mut terms = Vec::with_capacity(dists.len());
    for (&dist, &label) in dists.iter().zip(labels) {
        let term = match task {
            TaskKind::Classification => {
                let c = tape.value(dist).numel();
                let y = match label {
                    Label::Class(y) => y,
                    Label::Score(_) => return Err(ModelError::ScoreLabelInClassification),
                };
                if y >= c {
                    return Err(ModelError::BadLabel {
                        label: y,
                        classes: c,
                    });
                }
                let mut onehot = Tensor::zeros(vec![1, c]);
                onehot.data_mut()[y] = S::ONE;
                let oh = tape.constant(onehot);
                let picked = tape.mul(oh, dist)?;
                let q = tape.sum(picked);
                tape.log(q)
            }
            TaskKind::Regression => {
                let y = label.as_score();
                let target = tape.constant(Tensor::new(vec![1, 1], vec![S::from_f64(y)]));
                let d = tape.sub(dist, target)?;
                let sq = tape.mul(d, d)?;
                let s = tape.sum(sq);
                tape.scale(s, -1.0)?
            }
        };
        terms.push(term);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, -1.0 / dists.len() as f64)?)
}

/// Per-token KL between the selector's Bernoulli(p_i) and the prior,
/// summed over the sequence:
/// sum_i p_i log(p_i / r1) + (1 - p_i) log((1 - p_i) / r0).
pub fn loss_ib<S: Scalar>(tape: &mut Tape<S>, probs: Var, prior: IbPrior) -> ModelResult<Var> {
    if !(prior.r1 > 0.0 && prior.r1 < 1.0 && prior.r0 > 0.0 && prior.r0 < 1.0) {
        return Err(ModelError::DegeneratePrior(prior.r1));
    }
    let lp = tape.log(probs);
    let om = tape.one_minus(probs)?;
    let l1p = tape.log(om);
    let a_log = tape.add_scalar(lp, -prior.r1.ln())?;
    let a = tape.mul(probs, a_log)?;
    let b_log = tape.add_scalar(l1p, -prior.r0.ln())?;
    let b = tape.mul(om, b_log)?;
    let s = tape.add(a, b)?;
    Ok(tape.sum(s))
}

/// Closed-form KL(N(mu, sigma) || N(0, I)) summed over dimensions:
/// 0.5 * sum(mu^2 + sigma^2 - 1 - 2 log sigma).
pub fn loss_mi<S: Scalar>(tape: &mut Tape<S>, mu: Var, sigma: Var) -> ModelResult<Var> {
    if tape.value(sigma).data().iter().any(|s| s.to_f64() <= 0.0) {
        return Err(ModelError::NonPositiveSigma);
    }
    let mu2 = tape.mul(mu, mu)?;
    let s2 = tape.mul(sigma, sigma)?;
    let ls = tape.log(sigma);
    let both = tape.add(mu2, s2)?;
    let shifted = tape.add_scalar(both, -1.0)?;
    let two_ls = tape.scale(ls, 2.0)?;
    let term = tape.sub(shifted, two_ls)?;
    let s = tape.sum(term);
    Ok(tape.scale(s, 0.5)?)
}

/// Generator-side adversarial loss: -log D(z_tilde), minimized when the
/// masked-input feature fools the discriminator.
pub fn loss_g<S: Scalar>(tape: &mut Tape<S>, d_fake: Var) -> ModelResult<Var> {
    let lf = tape.log(d_fake);
    let s = tape.sum(lf);
    Ok(tape.scale(s, -1.0)?)
}

/// Discriminator loss: -log D(z) + log D(z_tilde), minimized when the
/// guider feature scores high and the masked-input feature scores low.
pub fn loss_d<S: Scalar>(tape: &mut Tape<S>, d_real: Var, d_fake: Var) -> ModelResult<Var> {
    let lr = tape.log(d_real);
    let lf = tape.log(d_fake);
    let sr = tape.sum(lr);
    let sf = tape.sum(lf);
    Ok(tape.sub(sf, sr)?)
}

/// Two-layer discriminator bound onto a tape.
pub struct DiscBinding {
    pub l1: LinearB,
    pub l2: LinearB,
}

impl DiscBinding {
    pub fn bind<S: Scalar>(tape: &mut Tape<S>, model: &InfoCalModel<S>) -> ModelResult<DiscBinding> {
        Ok(DiscBinding {
            l1: LinearB::bind(tape, &model.disc, model.disc_keys.l1)?,
            l2: LinearB::bind(tape, &model.disc, model.disc_keys.l2)?,
        })
    }

    pub fn bind_frozen<S: Scalar>(tape: &mut Tape<S>, model: &InfoCalModel<S>) -> DiscBinding {
        DiscBinding {
            l1: LinearB::bind_frozen(tape, &model.disc, model.disc_keys.l1),
            l2: LinearB::bind_frozen(tape, &model.disc, model.disc_keys.l2),
        }
    }

    /// Probability that `z` came from the guider, in `[1e-6, 1-1e-6]`.
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, z: Var) -> ModelResult<Var> {
        let pre = self.l1.apply(tape, z)?;
        let h = tape.tanh(pre);
        let logit = self.l2.apply(tape, h)?;
        Ok(tape.squash_prob(logit)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            embed_dim: 4,
            hidden_dim: 3,
            n_classes: 2,
            task: TaskKind::Classification,
        }
    }

    fn tiny_model(seed: u64) -> InfoCalModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        InfoCalModel::new(tiny_cfg(), &mut rng).unwrap()
    }

    #[test]
    fn selector_probs_are_clamped_and_sized() {
        let model = tiny_model(1);
        let mut tape: Tape<f64> = Tape::new();
        let bind = GenBinding::bind(&mut tape, &model).unwrap();
        let probs = bind.selector_probs(&mut tape, &[1, 5, 3, 7]).unwrap();
        let t = tape.value(probs);
        assert_eq!(t.shape(), &[4, 1]);
        for &p in t.data() {
            assert!((1e-6..=1.0 - 1e-6).contains(&p));
        }
        let err = bind.selector_probs(&mut tape, &[]).unwrap_err();
        assert!(matches!(err, ModelError::EmptySequence));
    }

    #[test]
    fn equal_gumbel_noise_at_half_probability_gives_half_mask() {
        for tau in [0.1, 0.5, 1.0, 3.0] {
            let mut tape: Tape<f64> = Tape::new();
            let probs = tape.constant(Tensor::new(vec![1, 1], vec![0.5]));
            let masks = masks_from_noise(&mut tape, probs, tau, &[(1.25, 1.25)]).unwrap();
            assert!((tape.value(masks).item() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn near_one_probability_saturates_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let mut tape: Tape<f64> = Tape::new();
            let probs = tape.constant(Tensor::new(vec![1, 1], vec![1.0 - 1e-6]));
            let noise = draw_gumbel_pairs(1, &mut rng);
            let masks = masks_from_noise(&mut tape, probs, 1.0, &noise).unwrap();
            assert!(tape.value(masks).item() > 0.9);
        }
    }

    #[test]
    fn mask_sampling_frequency_matches_selection_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = 0.3;
        let tau = 0.5;
        let mut hits = 0;
        let n = 10_000;
        for _ in 0..n {
            let mut tape: Tape<f64> = Tape::new();
            let probs = tape.constant(Tensor::new(vec![1, 1], vec![p]));
            let noise = draw_gumbel_pairs(1, &mut rng);
            let masks = masks_from_noise(&mut tape, probs, tau, &noise).unwrap();
            if tape.value(masks).item() > 0.5 {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - p).abs() <= 0.02, "frequency {freq} vs p {p}");
    }

    #[test]
    fn surrogate_equals_mean_prediction_loss() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let batch = rng.gen_range(1..6);
            let classes = rng.gen_range(2..5);
            let mut tape: Tape<f64> = Tape::new();
            let mut dists = Vec::new();
            let mut labels = Vec::new();
            let mut losses = Vec::new();
            for _ in 0..batch {
                let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
                let total: f64 = raw.iter().sum();
                let dist = tape.constant(Tensor::new(
                    vec![1, classes],
                    raw.iter().map(|v| v / total).collect(),
                ));
                let label = Label::Class(rng.gen_range(0..classes));
                losses.push(
                    prediction_loss(&mut tape, dist, label, TaskKind::Classification).unwrap(),
                );
                dists.push(dist);
                labels.push(label);
            }
            let surrogate =
                label_information_surrogate(&mut tape, &dists, &labels, TaskKind::Classification)
                    .unwrap();
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = tape.add(total, l).unwrap();
            }
            let mean = tape.scale(total, 1.0 / batch as f64).unwrap();
            assert_eq!(
                tape.value(surrogate).item(),
                tape.value(mean).item(),
                "same computation, same bits"
            );
        }
    }

    #[test]
    fn nonpositive_temperature_is_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let probs = tape.constant(Tensor::new(vec![1, 1], vec![0.5]));
        let err = masks_from_noise(&mut tape, probs, 0.0, &[(0.0, 0.0)]).unwrap_err();
        assert!(matches!(err, ModelError::BadTemperature(_)));
    }

    #[test]
    fn prediction_loss_reference_values() {
        let mut tape: Tape<f64> = Tape::new();
        let uniform = tape.constant(Tensor::new(vec![1, 4], vec![0.25; 4]));
        let loss = prediction_loss(&mut tape, uniform, Label::Class(2), TaskKind::Classification)
            .unwrap();
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);

        let onehot = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]));
        let loss =
            prediction_loss(&mut tape, onehot, Label::Class(1), TaskKind::Classification).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        let pred = tape.constant(Tensor::new(vec![1, 1], vec![0.8]));
        let loss =
            prediction_loss(&mut tape, pred, Label::Score(0.5), TaskKind::Regression).unwrap();
        assert!((tape.value(loss).item() - 0.09).abs() < 1e-12);

        let bad = prediction_loss(&mut tape, onehot, Label::Class(3), TaskKind::Classification);
        assert!(matches!(bad, Err(ModelError::BadLabel { .. })));
    }

    #[test]
    fn ib_loss_reference_value_and_additivity() {
        let prior = IbPrior::select_rate(0.001).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.constant(Tensor::new(vec![1, 1], vec![0.5]));
        let loss = loss_ib(&mut tape, p, prior).unwrap();
        assert!((tape.value(loss).item() - 2.761230709097915).abs() < 1e-12);

        let at_prior = tape.constant(Tensor::new(vec![3, 1], vec![0.001; 3]));
        let loss = loss_ib(&mut tape, at_prior, prior).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);

        let a = tape.constant(Tensor::new(vec![2, 1], vec![0.2, 0.7]));
        let b = tape.constant(Tensor::new(vec![1, 1], vec![0.05]));
        let ab = tape.constant(Tensor::new(vec![3, 1], vec![0.2, 0.7, 0.05]));
        let la = loss_ib(&mut tape, a, prior).unwrap();
        let lb = loss_ib(&mut tape, b, prior).unwrap();
        let lab = loss_ib(&mut tape, ab, prior).unwrap();
        let sum = tape.value(la).item() + tape.value(lb).item();
        assert!((tape.value(lab).item() - sum).abs() < 1e-12);

        assert!(matches!(
            IbPrior::select_rate(1.0),
            Err(ModelError::DegeneratePrior(_))
        ));
    }

    #[test]
    fn mi_loss_reference_values_and_guards() {
        let mut tape: Tape<f64> = Tape::new();
        let mu = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]));
        let sigma = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]));
        let loss = loss_mi(&mut tape, mu, sigma).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);

        let mu = tape.constant(Tensor::new(vec![1, 1], vec![2.0]));
        let sigma = tape.constant(Tensor::new(vec![1, 1], vec![1.0]));
        let loss = loss_mi(&mut tape, mu, sigma).unwrap();
        assert!((tape.value(loss).item() - 2.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let m = rng.gen_range(-3.0..3.0);
            let s = rng.gen_range(0.05..4.0);
            let mu = tape.constant(Tensor::new(vec![1, 1], vec![m]));
            let sigma = tape.constant(Tensor::new(vec![1, 1], vec![s]));
            let loss = loss_mi(&mut tape, mu, sigma).unwrap();
            assert!(tape.value(loss).item() >= -1e-12);
        }

        let bad = tape.constant(Tensor::new(vec![1, 1], vec![0.0]));
        let mu = tape.constant(Tensor::new(vec![1, 1], vec![0.0]));
        assert!(matches!(
            loss_mi(&mut tape, mu, bad),
            Err(ModelError::NonPositiveSigma)
        ));
    }

    #[test]
    fn fresh_discriminator_outputs_exactly_half() {
        let model = tiny_model(3);
        let mut tape: Tape<f64> = Tape::new();
        let disc = DiscBinding::bind(&mut tape, &model).unwrap();
        let z = tape.constant(Tensor::new(vec![1, 6], vec![0.3, -1.0, 2.0, 0.0, 5.0, -0.2]));
        let d = disc.apply(&mut tape, z).unwrap();
        assert_eq!(tape.value(d).item(), 0.5);

        let extreme = tape.constant(Tensor::new(vec![1, 6], vec![1e6; 6]));
        let d = disc.apply(&mut tape, extreme).unwrap();
        let v = tape.value(d).item();
        assert!((1e-6..=1.0 - 1e-6).contains(&v));
    }

    #[test]
    fn adversarial_loss_reference_values() {
        let mut tape: Tape<f64> = Tape::new();
        let half = tape.constant(Tensor::new(vec![1, 1], vec![0.5]));
        let ld = loss_d(&mut tape, half, half).unwrap();
        assert_eq!(tape.value(ld).item(), 0.0);
        let lg = loss_g(&mut tape, half).unwrap();
        assert!((tape.value(lg).item() - 2.0f64.ln()).abs() < 1e-12);

        let real = tape.constant(Tensor::new(vec![1, 1], vec![1.0 - 1e-6]));
        let fake = tape.constant(Tensor::new(vec![1, 1], vec![1e-6]));
        let ld = loss_d(&mut tape, real, fake).unwrap();
        assert!((tape.value(ld).item() - (-13.815509557963773)).abs() < 1e-9);
    }

    #[test]
    fn guider_reparameterization_is_deterministic_and_centered() {
        let model = tiny_model(5);
        let ids = [2, 9, 4];

        let mut tape: Tape<f64> = Tape::new();
        let bind = GenBinding::bind(&mut tape, &model).unwrap();
        let zero_noise = vec![0.0; model.cfg.feature_dim()];
        let out = bind
            .guide_with_noise(&mut tape, &ids, &zero_noise, TaskKind::Classification)
            .unwrap();
        assert_eq!(tape.value(out.z).data(), tape.value(out.mu).data());
        assert!(tape.value(out.sigma).data().iter().all(|&s| s > 0.0));
        let dist_sum: f64 = tape.value(out.dist).data().iter().sum();
        assert!((dist_sum - 1.0).abs() < 1e-6);

        let run = |seed: u64| -> Vec<f64> {
            let mut tape: Tape<f64> = Tape::new();
            let bind = GenBinding::bind(&mut tape, &model).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = bind
                .guide(&mut tape, &ids, TaskKind::Classification, &mut rng)
                .unwrap();
            tape.value(out.z).data().to_vec()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn full_mask_prediction_equals_plain_forward_pass() {
        let model = tiny_model(8);
        let ids = [1, 2, 3, 4, 5];

        let mut tape: Tape<f64> = Tape::new();
        let bind = GenBinding::bind(&mut tape, &model).unwrap();
        let ones = mask_var(&mut tape, &[true; 5]);
        let masked = bind
            .predict(&mut tape, &ids, ones, TaskKind::Classification)
            .unwrap();
        let via_mask = tape.value(masked.dist).data().to_vec();

        let mut tape2: Tape<f64> = Tape::new();
        let bind2 = GenBinding::bind(&mut tape2, &model).unwrap();
        let enc = encode_tokens(&mut tape2, bind2.pred_embed, &bind2.pred_enc, &ids).unwrap();
        let logits = bind2.pred_head.apply(&mut tape2, enc.feature).unwrap();
        let dist = tape2.softmax_lastdim(logits).unwrap();
        let plain = tape2.value(dist).data().to_vec();

        assert_eq!(via_mask, plain);
    }

    #[test]
    fn zero_mask_prediction_ignores_token_identity() {
        let model = tiny_model(13);
        let run = |ids: &[usize]| -> Vec<f64> {
            let mut tape: Tape<f64> = Tape::new();
            let bind = GenBinding::bind(&mut tape, &model).unwrap();
            let zeros = mask_var(&mut tape, &vec![false; ids.len()]);
            let out = bind
                .predict(&mut tape, ids, zeros, TaskKind::Classification)
                .unwrap();
            tape.value(out.dist).data().to_vec()
        };
        assert_eq!(run(&[1, 2, 3]), run(&[7, 8, 9]));
    }
}
