//! Central finite-difference gradient checking.
//!
//! Numeric derivatives come from forward evaluations only, so the check is
//! independent of every backward rule it validates.

use super::{no_grad, Tensor};

/// Denominator floor below which differences are judged absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (parameter index, element index) of the worst relative error.
    pub worst: (usize, usize),
}

/// Compares `backward()` gradients of `loss` against central differences
/// with step `h` for every element of every tensor in `params`.
pub fn check_gradients<F>(params: &[Tensor<f64>], h: f64, loss: F) -> GradReport
where
    F: Fn() -> Tensor<f64>,
{
    for p in params {
        p.zero_grad();
    }
    loss().backward().expect("loss must be a differentiable scalar");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let _guard = no_grad();
    let eval = || loss().item().expect("scalar loss");
    let mut report = GradReport::default();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let orig = p.data()[ei];
            p.data_mut()[ei] = orig + h;
            let plus = eval();
            p.data_mut()[ei] = orig - h;
            let minus = eval();
            p.data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][ei];
            let rel = rel_err(a, numeric);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, ei);
            }
        }
    }
    for p in params {
        p.zero_grad();
    }
    report
}
