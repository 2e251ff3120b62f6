//! Central finite-difference checks of analytic parameter gradients.

use super::params::{Gradients, ParamSet};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error used throughout the checks: `|a - n| / max(|a|, |n|, floor)`.
/// The floor keeps entries whose true gradient is zero from dividing by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-5);
    (analytic - numeric).abs() / denom
}

/// Perturbs every scalar of every parameter by `±step` and `±2·step` and
/// compares the five-point central difference against the analytic gradient
/// returned by `loss` at the unperturbed point.
pub fn check_param_gradients<F>(params: &mut ParamSet, loss: F, step: f64) -> GradCheckReport
where
    F: Fn(&ParamSet) -> (f64, Gradients),
{
    let (_, analytic) = loss(params);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        for k in 0..n {
            let orig = params.get(id).as_slice().expect("standard layout")[k];
            let mut eval = |delta: f64| {
                params.get_mut(id).as_slice_mut().unwrap()[k] = orig + delta;
                loss(params).0
            };
            let (up2, up, down, down2) = (eval(2.0 * step), eval(step), eval(-step), eval(-2.0 * step));
            params.get_mut(id).as_slice_mut().unwrap()[k] = orig;

            let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * step);
            let a = analytic.get(id).as_slice().unwrap()[k];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}
