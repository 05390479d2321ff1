//! Central finite differences, used to test the analytic gradients.
//!
//! Nothing here touches the backward pass: derivatives are estimated from
//! repeated forward evaluations only.

use super::{ParamId, ParamStore, Tensor};

/// Denominator floor for relative errors, so that gradients which are zero
/// up to round-off do not blow the ratio up.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(tensor index, coordinate, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl Report {
    fn record(&mut self, tensor: usize, coord: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((tensor, coord, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: &Report) {
        self.checked += other.checked;
        if other.max_rel_error >= self.max_rel_error && other.worst.is_some() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Evenly spaced coordinates, at most `limit` of them (all when `None`).
fn coords(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares `analytic[i]` against central differences of `f` with respect
/// to each tensor in `inputs`.
pub fn check_inputs(
    inputs: &[Tensor],
    analytic: &[Vec<f64>],
    step: f64,
    limit: Option<usize>,
    mut f: impl FnMut(&[Tensor]) -> f64,
) -> Report {
    let mut report = Report::default();
    let mut work = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for c in coords(inputs[ti].len(), limit) {
            let orig = inputs[ti].data()[c];
            work[ti].data_mut()[c] = orig + step;
            let up = f(&work);
            work[ti].data_mut()[c] = orig - step;
            let down = f(&work);
            work[ti].data_mut()[c] = orig;
            report.record(ti, c, grads[c], (up - down) / (2.0 * step));
        }
    }
    report
}

/// Same as [`check_inputs`] but perturbs parameters of a store.
pub fn check_params(
    store: &ParamStore,
    analytic: &[(ParamId, Vec<f64>)],
    step: f64,
    limit: Option<usize>,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Report {
    let mut report = Report::default();
    let mut work = store.clone();
    for (ti, (id, grads)) in analytic.iter().enumerate() {
        for c in coords(store.tensor(*id).len(), limit) {
            let orig = store.tensor(*id).data()[c];
            work.tensor_mut(*id).data_mut()[c] = orig + step;
            let up = f(&work);
            work.tensor_mut(*id).data_mut()[c] = orig - step;
            let down = f(&work);
            work.tensor_mut(*id).data_mut()[c] = orig;
            report.record(ti, c, grads[c], (up - down) / (2.0 * step));
        }
    }
    report
}
