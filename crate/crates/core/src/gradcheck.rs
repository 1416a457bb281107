//! Central finite-difference gradient verification.
//!
//! The checker never touches the backward pass it is validating: it re-runs
//! the forward closure with perturbed parameter entries and compares the
//! quotient against the tape gradient.

use crate::error::Result;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check: worst relative error and where it occurred.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with denominators clamped at 1e-8.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Evaluate the scalar loss `f` builds from the given parameter tensors.
pub fn eval_loss<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    Ok(g.data(root)[0])
}

/// Tape gradients of `f` w.r.t. every entry of every parameter.
pub fn tape_gradients<F>(f: &F, params: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    Ok(vars
        .iter()
        .map(|&v| g.grad(v).expect("tracked leaf has grad").to_vec())
        .collect())
}

/// Central finite differences of `f` w.r.t. selected entries.
/// `entries[i]` lists the flat indices to probe in `params[i]`
/// (empty slice = probe everything).
pub fn numeric_gradients<F>(
    f: &F,
    params: &[Tensor],
    entries: &[Vec<usize>],
    eps: f64,
) -> Result<Vec<Vec<(usize, f64)>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut out = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, tensor) in params.iter().enumerate() {
        let idxs: Vec<usize> = if entries[pi].is_empty() {
            (0..tensor.numel()).collect()
        } else {
            entries[pi].clone()
        };
        let mut grads = Vec::with_capacity(idxs.len());
        for &ei in &idxs {
            let orig = work[pi].data[ei];
            work[pi].data[ei] = orig + eps;
            let hi = eval_loss(f, &work)?;
            work[pi].data[ei] = orig - eps;
            let lo = eval_loss(f, &work)?;
            work[pi].data[ei] = orig;
            grads.push((ei, (hi - lo) / (2.0 * eps)));
        }
        out.push(grads);
    }
    Ok(out)
}

/// Compare tape gradients against central differences on every entry of
/// every parameter. Returns the worst case.
pub fn check_gradients<F>(f: &F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = params.iter().map(|_| Vec::new()).collect();
    check_gradients_at(f, params, &all, eps)
}

/// Same as [`check_gradients`] but probing only the listed flat entries.
pub fn check_gradients_at<F>(
    f: &F,
    params: &[Tensor],
    entries: &[Vec<usize>],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = tape_gradients(f, params)?;
    let numeric = numeric_gradients(f, params, entries, eps)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_entry: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (pi, probes) in numeric.iter().enumerate() {
        for &(ei, num) in probes {
            let ana = analytic[pi][ei];
            let e = rel_err(ana, num);
            if e > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: e,
                    worst_param: pi,
                    worst_entry: ei,
                    analytic: ana,
                    numeric: num,
                };
            }
        }
    }
    Ok(report)
}
