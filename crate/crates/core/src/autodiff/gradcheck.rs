use rand::seq::SliceRandom;
use rand::Rng;

use super::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |g_analytic - g_fd| / max(1, |g_fd|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `loss` evaluates the scalar loss for the current parameter values and,
/// when asked, also returns analytic gradients. Up to `samples` coordinates
/// are drawn uniformly (without replacement) from all trainable parameters;
/// pass `usize::MAX` to check every coordinate.
pub fn gradient_check<F>(
    store: &mut ParamStore,
    epsilon: f64,
    samples: usize,
    rng: &mut impl Rng,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Option<Gradients>)>,
{
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::config("epsilon", format!("must lie in [1e-6, 1e-4], got {epsilon}")));
    }
    let (_, grads) = loss(store, true)?;
    let grads = grads.ok_or_else(|| Error::State("loss closure returned no gradients".into()))?;

    let mut coords: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
        .collect();
    if samples < coords.len() {
        coords.shuffle(rng);
        coords.truncate(samples);
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    for (id, i) in coords {
        let original = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = original + epsilon;
        let (plus, _) = loss(store, false)?;
        store.get_mut(id).data_mut()[i] = original - epsilon;
        let (minus, _) = loss(store, false)?;
        store.get_mut(id).data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        report.checked += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = store.name(id).to_string();
            report.worst_index = i;
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
