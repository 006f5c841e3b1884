//! Central finite-difference gradient checking.
//!
//! The harness never looks at the tape's backward pass: it re-evaluates the
//! loss twice per parameter entry and compares the quotient against the
//! analytic gradient. Checks run in `f64`; 32-bit differences are too noisy
//! for the default step.

use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Default acceptance threshold on the relative error.
pub const FD_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct FdFailure {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<FdFailure>,
}

impl FdReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-4)
}

/// Compare analytic gradients against central finite differences.
///
/// `eval` must be a pure function of the parameter tensors: it is called with
/// perturbed copies and must rebuild the forward pass from scratch each time.
/// `analytic` holds one gradient tensor per parameter, shape-aligned.
pub fn check_gradients(
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eval: impl Fn(&[Tensor<f64>]) -> f64,
    step: f64,
    tol: f64,
) -> FdReport {
    assert_eq!(params.len(), analytic.len());
    let mut report = FdReport::default();
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        assert_eq!(params[pi].shape(), grad.shape(), "gradient shape mismatch");
        for i in 0..params[pi].numel() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + step;
            let up = eval(&work);
            work[pi].data_mut()[i] = orig - step;
            let down = eval(&work);
            work[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            let re = rel_err(a, numeric);
            report.checked += 1;
            if re > report.max_rel_err {
                report.max_rel_err = re;
            }
            if re > tol {
                report.failures.push(FdFailure {
                    param: pi,
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: re,
                });
            }
        }
    }
    report
}
