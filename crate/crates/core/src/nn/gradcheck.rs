//! Central finite-difference check of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::params::ParamStore;
use super::tape::Mat;

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub h: f64,
    /// Denominator floor for the relative error, so that gradients that are
    /// numerically zero do not blow the ratio up.
    pub floor: f64,
    /// Coordinates checked per parameter array; `None` checks all of them.
    pub coords_per_param: Option<usize>,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            h: 1e-5,
            floor: 1e-5,
            coords_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `analytic` (aligned with `store`) against central differences of
/// `loss`. The loss closure must be deterministic.
pub fn finite_diff_check<R: Rng>(
    loss: impl Fn(&ParamStore) -> f64,
    store: &ParamStore,
    analytic: &[Mat],
    config: FdConfig,
    rng: &mut R,
) -> FdReport {
    let mut work = store.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (id, grad) in store.ids().zip(analytic) {
        let n = grad.len();
        let coords: Vec<usize> = match config.coords_per_param {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let cols = grad.ncols();
        for idx in coords {
            let (r, c) = (idx / cols, idx % cols);
            let orig = work.value(id)[[r, c]];
            work.value_mut(id)[[r, c]] = orig + config.h;
            let fp = loss(&work);
            work.value_mut(id)[[r, c]] = orig - config.h;
            let fm = loss(&work);
            work.value_mut(id)[[r, c]] = orig;
            let numeric = (fp - fm) / (2.0 * config.h);
            let a = grad[[r, c]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.floor);
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst_param = store.name(id).to_string();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}
