//! Central finite-difference check of analytic parameter gradients.
//!
//! Only forward evaluations of the loss are used to build the numerical
//! estimate, so the check is independent of the reverse pass it verifies.

use super::{Gradients, ParamStore};

/// Relative error between an analytic and numerical derivative, with a small
/// absolute floor so that gradients which are zero up to rounding compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Runs `forward` once for the analytic gradients and twice per scalar weight
/// for `(f(w+h) - f(w-h)) / 2h`. Returns the maximum relative error.
pub fn check_param_gradients<F>(params: &ParamStore, h: f64, forward: F) -> f64
where
    F: Fn(&ParamStore) -> (f64, Gradients),
{
    let (_, grads) = forward(params);
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for id in params.ids() {
        let shape = params.get(id).value.shape().to_vec();
        let analytic = grads.get_or_zeros(id, &shape);
        for i in 0..analytic.len() {
            let original = work.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = original + h;
            let (plus, _) = forward(&work);
            work.get_mut(id).value.data_mut()[i] = original - h;
            let (minus, _) = forward(&work);
            work.get_mut(id).value.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    worst
}
