//! Central-difference verification of analytic gradients.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_a − g_n| / max(1e-8, |g_a| + |g_n|)` over all coordinates.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let y = f(&mut g, v)?;
    let out = g.value(y);
    if out.numel() != 1 {
        return Err(Error::Contract(alloc::format!("grad_check needs a scalar function, got {:?}", out.shape)));
    }
    Ok(out.item())
}

/// Compare the tape gradient of scalar `f` at `x` against central differences.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone().with_grad());
    let y = f(&mut g, v)?;
    g.backward(y)?;
    let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; x.numel()]);

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let up = eval_scalar(&f, &probe)?;
        probe.data[i] = orig - step;
        let down = eval_scalar(&f, &probe)?;
        probe.data[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }

    let (mut max_rel_err, mut worst_index) = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport { max_rel_err, worst_index, analytic, numeric, passed: max_rel_err <= tol })
}
