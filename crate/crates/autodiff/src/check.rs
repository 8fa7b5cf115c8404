//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max_i ||analytic_i - numeric_i|| / max(||analytic_i||, ||numeric_i||)`
    /// over the checked inputs, with Euclidean norms over each tensor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub n_checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks every input of `f` (all treated as differentiable leaves).
///
/// `f` builds a scalar loss from the leaf ids it is given. Each input element
/// is perturbed by `±step` and the loss re-evaluated from scratch.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.input(v.clone())).collect();
        let loss = f(&mut g, &ids)?;
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
    let loss = f(&mut g, &ids)?;
    g.backward(loss)?;

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut n_checked = 0;
    let mut perturbed = inputs.to_vec();
    for (i, &id) in ids.iter().enumerate() {
        let analytic = match g.grad(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(inputs[i].rows(), inputs[i].cols()),
        };
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = orig + step;
            let plus = eval(&perturbed)?;
            perturbed[i].data_mut()[j] = orig - step;
            let minus = eval(&perturbed)?;
            perturbed[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel = if denom > 0.0 { diff / denom } else { 0.0 };
        max_rel = max_rel.max(rel);
        for (a, n) in analytic.data().iter().zip(&numeric) {
            max_abs = max_abs.max((a - n).abs());
        }
        n_checked += numeric.len();
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        n_checked,
    })
}
