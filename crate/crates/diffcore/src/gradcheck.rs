//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{DiffError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Builds a scalar loss on a fresh graph from the current parameter values.
pub trait LossFn: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<NodeId> {}
impl<F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<NodeId>> LossFn for F {}

/// Denominator floor of [`rel_error`]; below it the error is effectively absolute.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Entries compared.
    pub entries: usize,
    /// Entries excluded because `w ± ε` changed a ReLU sign, so the central
    /// difference straddles a kink and does not estimate the derivative.
    pub kinks_skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval(store: &ParamStore<f64>, loss_fn: &mut impl LossFn) -> Result<f64> {
    eval_with_pattern(store, loss_fn).map(|(v, _)| v)
}

fn eval_with_pattern(store: &ParamStore<f64>, loss_fn: &mut impl LossFn) -> Result<(f64, Vec<bool>)> {
    let mut g = Graph::new();
    let root = loss_fn(store, &mut g)?;
    Ok((g.value(root).item(), g.relu_pattern()))
}

/// Central-difference estimates with per-entry kink flags.
#[derive(Clone, Debug)]
pub struct NumericGradient {
    pub values: Vec<Tensor<f64>>,
    /// Per parameter, per entry: the stencil crossed a ReLU kink.
    pub straddles_kink: Vec<Vec<bool>>,
}

/// Reverse-mode gradient of every parameter (frozen ones come back as zeros).
pub fn analytic_gradient(store: &mut ParamStore<f64>, loss_fn: &mut impl LossFn) -> Result<Vec<Tensor<f64>>> {
    store.zero_grads();
    let mut g = Graph::new();
    let root = loss_fn(store, &mut g)?;
    g.backward(root)?;
    g.accumulate_param_grads(store);
    let out = store.ids().map(|id| store.grad(id).clone()).collect();
    store.zero_grads();
    Ok(out)
}

/// Central differences `(f(w + ε) − f(w − ε)) / 2ε` for every non-frozen entry.
pub fn numeric_gradient(
    store: &mut ParamStore<f64>,
    eps: f64,
    loss_fn: &mut impl LossFn,
) -> Result<NumericGradient> {
    let (_, base) = eval_with_pattern(store, loss_fn)?;
    let ids: Vec<_> = store.ids().collect();
    let mut values = Vec::with_capacity(ids.len());
    let mut straddles_kink = Vec::with_capacity(ids.len());
    for id in ids {
        let mut grad = Tensor::zeros(store.value(id).shape());
        let mut kinks = vec![false; grad.len()];
        if !store.is_frozen(id) {
            for (k, kink) in kinks.iter_mut().enumerate() {
                let w0 = store.value(id).data()[k];
                store.value_mut(id).data_mut()[k] = w0 + eps;
                let up = eval_with_pattern(store, loss_fn);
                store.value_mut(id).data_mut()[k] = w0 - eps;
                let down = eval_with_pattern(store, loss_fn);
                store.value_mut(id).data_mut()[k] = w0;
                let ((up, pu), (down, pd)) = (up?, down?);
                grad.data_mut()[k] = (up - down) / (2.0 * eps);
                *kink = pu != base || pd != base;
            }
        }
        values.push(grad);
        straddles_kink.push(kinks);
    }
    Ok(NumericGradient {
        values,
        straddles_kink,
    })
}

pub fn compare_gradients(
    store: &ParamStore<f64>,
    analytic: &[Tensor<f64>],
    numeric: &NumericGradient,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries: 0,
        kinks_skipped: 0,
    };
    let rows = store
        .ids()
        .zip(analytic)
        .zip(&numeric.values)
        .zip(&numeric.straddles_kink);
    for (((id, a), n), kinks) in rows {
        if store.is_frozen(id) {
            continue;
        }
        for (k, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            if kinks[k] {
                report.kinks_skipped += 1;
                continue;
            }
            report.entries += 1;
            let e = rel_error(av, nv);
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = Some((store.name(id).to_string(), k));
                report.worst_analytic = av;
                report.worst_numeric = nv;
            }
        }
    }
    report
}

/// Compares reverse-mode gradients with central differences over every
/// parameter entry. The loss is evaluated twice up front; any difference
/// means it is not deterministic and the check is refused.
pub fn grad_check(
    store: &mut ParamStore<f64>,
    eps: f64,
    mut loss_fn: impl LossFn,
) -> Result<GradCheckReport> {
    let first = eval(store, &mut loss_fn)?;
    let second = eval(store, &mut loss_fn)?;
    if first.to_bits() != second.to_bits() {
        return Err(DiffError::NonDeterministic { first, second });
    }
    let analytic = analytic_gradient(store, &mut loss_fn)?;
    let numeric = numeric_gradient(store, eps, &mut loss_fn)?;
    Ok(compare_gradients(store, &analytic, &numeric))
}
