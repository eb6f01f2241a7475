//! Central finite-difference checks against analytic gradients.

use crate::param::{ParamId, ParamStore, Vars};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all probed coordinates.
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub probed: usize,
}

/// Relative error used by the checks: `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `d loss / d param` to central differences with step `h` for up to
/// `per_param` coordinates of every selected parameter (evenly spaced).
pub fn check(
    store: &ParamStore,
    params: &[ParamId],
    per_param: usize,
    h: f64,
    floor: f64,
    loss: impl Fn(&Vars) -> Tensor,
) -> GradCheckReport {
    let vars = store.bind();
    let analytic = vars.grads(&loss(&vars).backward());
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        probed: 0,
    };
    for &id in params {
        let entry = store.entry(id);
        let n = entry.data.len();
        let count = per_param.min(n);
        for j in 0..count {
            let idx = if count == n { j } else { j * n / count };
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.data_mut(id)[idx] += delta;
                let v = s.bind_frozen();
                loss(&v).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[id.0].as_ref().map(|g| g[idx]).unwrap_or(0.0);
            let err = rel_error(a, numeric, floor);
            report.probed += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((entry.name.clone(), idx, a, numeric));
            }
        }
    }
    report
}
