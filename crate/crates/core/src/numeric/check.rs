//! Central-difference gradient checker.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;

use super::params::{Gradients, ParamId, ParamStore};
use crate::math;
use crate::rng::seeded_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Largest per-parameter error `‖a - n‖ / max(1e-8, ‖a‖ + ‖n‖)` over
    /// the sampled coordinates. Unlike the per-coordinate figure it is not
    /// dominated by round-off on coordinates whose gradient is near zero.
    pub max_group_error: f64,
    pub worst_group: Option<String>,
}

/// Compares the gradients returned by `f` with central differences.
///
/// Up to `per_param` coordinates per parameter (all of them for small
/// tensors) are perturbed by `±eps`. The error of one coordinate is
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn finite_difference_check<E>(
    store: &mut ParamStore,
    eps: f64,
    per_param: usize,
    seed: u64,
    mut f: impl FnMut(&ParamStore) -> Result<(f64, Gradients), E>,
) -> Result<FdReport, E> {
    let (_, grads) = f(store)?;
    let mut rng = seeded_rng(seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        max_group_error: 0.0,
        worst_group: None,
    };
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let len = store.get(id).value.len();
        let coords: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            let mut v = index::sample(&mut rng, len, per_param).into_vec();
            v.sort_unstable();
            v
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for c in coords {
            let original = store.get(id).value.data()[c];
            store.get_mut(id).value.data_mut()[c] = original + eps;
            let (plus, _) = f(store)?;
            store.get_mut(id).value.data_mut()[c] = original - eps;
            let (minus, _) = f(store)?;
            store.get_mut(id).value.data_mut()[c] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.at(id, c);
            diff2 += (analytic - numeric) * (analytic - numeric);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), c));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
        let group = math::sqrt(diff2) / (math::sqrt(a2) + math::sqrt(n2)).max(1e-8);
        if group > report.max_group_error || report.worst_group.is_none() {
            report.max_group_error = group;
            report.worst_group = Some(store.get(id).name.clone());
        }
    }
    Ok(report)
}
