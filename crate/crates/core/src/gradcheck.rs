//! Central finite-difference verification of analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamRegistry;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over every parameter entry of
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Worst relative error per parameter tensor, in registry order.
    pub per_param: Vec<(String, f64)>,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

fn evaluate<F>(reg: &ParamRegistry, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&ParamRegistry, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = loss_fn(reg, &mut g)?;
    g.check_finite()?;
    let v = g.value(root);
    ensure!(v.len() == 1, "loss must be a scalar, got shape {:?}", v.shape());
    Ok(v.item())
}

/// Compares backpropagated gradients of `loss_fn` against central
/// differences with step `epsilon` for every entry of every parameter.
///
/// `loss_fn` builds the loss into the supplied graph and returns its root.
/// It must be deterministic: two evaluations at the same point have to agree
/// bitwise.
pub fn grad_check<F>(reg: &mut ParamRegistry, epsilon: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamRegistry, &mut Graph) -> Result<Var>,
{
    ensure!(epsilon > 0.0 && epsilon <= 1e-2, "epsilon must lie in (0, 1e-2], got {epsilon}");

    let first = evaluate(reg, &mut loss_fn)?;
    let second = evaluate(reg, &mut loss_fn)?;
    ensure!(
        first.to_bits() == second.to_bits(),
        "loss function is not deterministic ({first} vs {second})"
    );

    reg.zero_grad();
    {
        let mut g = Graph::new();
        let root = loss_fn(reg, &mut g)?;
        g.backward(root, reg)?;
    }
    let analytic: Vec<Tensor> = reg.iter().map(|p| p.grad.clone().expect("zeroed above")).collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, per_param: Vec::new(), worst: None, entries: 0 };
    let ids: Vec<_> = reg.ids().collect();
    for id in ids {
        let mut param_max = 0.0f64;
        for i in 0..reg.value(id).len() {
            let original = reg.value(id).data()[i];
            reg.value_mut(id).data_mut()[i] = original + epsilon;
            let plus = evaluate(reg, &mut loss_fn);
            reg.value_mut(id).data_mut()[i] = original - epsilon;
            let minus = evaluate(reg, &mut loss_fn);
            reg.value_mut(id).data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * epsilon);

            let a = analytic[id.index()].data()[i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.entries += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((reg.get(id).name.clone(), i));
            }
            param_max = param_max.max(rel);
        }
        report.per_param.push((reg.get(id).name.clone(), param_max));
    }
    Ok(report)
}
