use alloc::format;
use alloc::vec::Vec;

use super::{Accumulator, Graph, Op, Var};
use crate::error::{shape_err, Result};
use crate::math;
use crate::tensor::Tensor;

impl Graph {
    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return shape_err(name, format!("{:?} vs {:?}", ta.shape, tb.shape));
        }
        Ok(ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|v| f(*v)).collect();
        let shape = t.shape.clone();
        let needs = self.needs(&[x]);
        self.push(Tensor { shape, data, requires_grad: false, grad: None }, op, needs)
    }

    fn push_like(&mut self, like: Var, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let shape = self.value(like).shape.clone();
        let needs = self.needs(inputs);
        self.push(Tensor { shape, data, requires_grad: false, grad: None }, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push_like(a, data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_like(a, data, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_like(a, data, Op::Mul(a, b), &[a, b]))
    }

    /// `c * x`
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    /// `x + c`
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `c - x`, composed from the scale and shift primitives.
    pub fn rsub_scalar(&mut self, c: f64, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), math::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), math::exp)
    }

    /// `x ln x` with the continuous extension `0 ln 0 = 0`.
    pub fn xlogx(&mut self, x: Var) -> Var {
        self.unary(x, Op::XLogX(x), |v| if v > 0.0 { v * math::ln(v) } else { 0.0 })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return shape_err("reshape", format!("{:?} -> {:?}", t.shape, shape));
        }
        let tensor = Tensor { shape: shape.to_vec(), data: t.data.clone(), requires_grad: false, grad: None };
        let needs = self.needs(&[x]);
        Ok(self.push(tensor, Op::Reshape(x), needs))
    }

    /// Multiply `x: [B,C,H,W]` by a per-location factor `s: [B,1,H,W]`,
    /// broadcast over channels.
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let sd = self.value(s).shape.clone();
        if sd != [b, 1, h, w] {
            return shape_err("mul_channels", format!("factor {:?} for input [{b}, {c}, {h}, {w}]", sd));
        }
        let (xv, sv) = (&self.value(x).data, &self.value(s).data);
        let plane = h * w;
        let mut out = Vec::with_capacity(xv.len());
        for bi in 0..b {
            let srow = &sv[bi * plane..(bi + 1) * plane];
            for ci in 0..c {
                let xrow = &xv[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                out.extend(xrow.iter().zip(srow).map(|(a, f)| a * f));
            }
        }
        Ok(self.push_like(x, out, Op::MulChannels { x, s }, &[x, s]))
    }
}

pub(super) fn xlogx_backward(g: &Graph, x: Var, grad: &[f64], acc: &mut Accumulator<'_>) {
    let xv = &g.nodes[x.0].value.data;
    acc.add(x, |gx| {
        for ((d, gi), xi) in gx.iter_mut().zip(grad).zip(xv) {
            // The derivative diverges at 0; every caller multiplies it by a
            // factor that vanishes there, so the limit contribution is 0.
            if *xi > 0.0 {
                *d += gi * (math::ln(*xi) + 1.0);
            }
        }
    });
}

pub(super) fn mul_channels_backward(g: &Graph, x: Var, s: Var, grad: &[f64], acc: &mut Accumulator<'_>) {
    let xt = &g.nodes[x.0].value;
    let sv = &g.nodes[s.0].value.data;
    let (b, c, plane) = (xt.shape[0], xt.shape[1], xt.shape[2] * xt.shape[3]);
    acc.add(x, |gx| {
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for p in 0..plane {
                    gx[off + p] += grad[off + p] * sv[bi * plane + p];
                }
            }
        }
    });
    acc.add(s, |gs| {
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for p in 0..plane {
                    gs[bi * plane + p] += grad[off + p] * xt.data[off + p];
                }
            }
        }
    });
}
