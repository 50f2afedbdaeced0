use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Accumulator, Graph, Op, Var};
use crate::error::{shape_err, Result};
use crate::gemm::gemm;
use crate::math;
use crate::tensor::Tensor;

fn dims2(g: &Graph, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match g.shape(v) {
        &[r, c] => Ok((r, c)),
        s => shape_err(op, format!("expected a matrix, got {:?}", s)),
    }
}

fn dims1(g: &Graph, v: Var, op: &'static str) -> Result<usize> {
    match g.shape(v) {
        &[n] => Ok(n),
        s => shape_err(op, format!("expected a vector, got {:?}", s)),
    }
}

impl Graph {
    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self, a, "matmul")?;
        let (k2, n) = dims2(self, b, "matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self, x, "transpose")?;
        let xv = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), needs))
    }

    /// Euclidean norm of each row: `[n,d] -> [n]`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let (n, d) = dims2(self, x, "row_norm")?;
        let xv = self.data(x);
        let out = (0..n)
            .map(|i| math::sqrt(xv[i * d..(i + 1) * d].iter().map(|v| v * v).sum()))
            .collect();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[n], out)?, Op::RowNorm(x), needs))
    }

    /// Divide row `i` of `x: [n,d]` by `s[i]`.
    pub fn div_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, d) = dims2(self, x, "div_rows")?;
        let ns = dims1(self, s, "div_rows")?;
        if ns != n {
            return shape_err("div_rows", format!("{n} rows but {ns} divisors"));
        }
        let (xv, sv) = (self.data(x), self.data(s));
        let out = (0..n * d).map(|p| xv[p] / sv[p / d]).collect();
        let needs = self.needs(&[x, s]);
        Ok(self.push(Tensor::new(&[n, d], out)?, Op::DivRows(x, s), needs))
    }

    /// Numerically stable `ln Σ_j exp(x_ij)` per row: `[n,d] -> [n]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = dims2(self, x, "logsumexp_rows")?;
        if d == 0 {
            return shape_err("logsumexp_rows", format!("empty rows in [{n}, 0]"));
        }
        let xv = self.data(x);
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let row = &xv[i * d..(i + 1) * d];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + math::ln(row.iter().map(|v| math::exp(v - m)).sum())
            })
            .collect();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[n], out)?, Op::LogSumExpRows(x), needs))
    }
}

pub(super) fn matmul_backward(g: &Graph, a: Var, b: Var, grad: &[f64], acc: &mut Accumulator<'_>) {
    let (m, k) = (g.shape(a)[0], g.shape(a)[1]);
    let n = g.shape(b)[1];
    let (av, bv) = (g.data(a), g.data(b));
    // dA = G · Bᵀ, dB = Aᵀ · G
    acc.add(a, |ga| gemm(m, n, k, grad, false, bv, true, ga, true));
    acc.add(b, |gb| gemm(k, m, n, av, true, grad, false, gb, true));
}

pub(super) fn transpose_backward(g: &Graph, x: Var, grad: &[f64], acc: &mut Accumulator<'_>) {
    let (r, c) = (g.shape(x)[0], g.shape(x)[1]);
    acc.add(x, |gx| {
        for i in 0..r {
            for j in 0..c {
                gx[i * c + j] += grad[j * r + i];
            }
        }
    });
}

pub(super) fn row_norm_backward(g: &Graph, out: usize, x: Var, grad: &[f64], acc: &mut Accumulator<'_>) {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let xv = g.data(x);
    let norms = &g.nodes[out].value.data;
    acc.add(x, |gx| {
        for i in 0..n {
            if norms[i] > 0.0 {
                let f = grad[i] / norms[i];
                for j in 0..d {
                    gx[i * d + j] += f * xv[i * d + j];
                }
            }
        }
    });
}

pub(super) fn div_rows_backward(g: &Graph, x: Var, s: Var, grad: &[f64], acc: &mut Accumulator<'_>) {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let (xv, sv) = (g.data(x), g.data(s));
    acc.add(x, |gx| {
        for p in 0..n * d {
            gx[p] += grad[p] / sv[p / d];
        }
    });
    acc.add(s, |gs| {
        for i in 0..n {
            let dot: f64 = (0..d).map(|j| grad[i * d + j] * xv[i * d + j]).sum();
            gs[i] -= dot / (sv[i] * sv[i]);
        }
    });
}

pub(super) fn logsumexp_rows_backward(g: &Graph, out: usize, x: Var, grad: &[f64], acc: &mut Accumulator<'_>) {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let xv = g.data(x);
    let lse = &g.nodes[out].value.data;
    acc.add(x, |gx| {
        for i in 0..n {
            for j in 0..d {
                gx[i * d + j] += grad[i] * math::exp(xv[i * d + j] - lse[i]);
            }
        }
    });
}
