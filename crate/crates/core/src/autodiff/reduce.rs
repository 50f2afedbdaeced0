use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Accumulator, Graph, Op, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `(outer, len, inner)` split of a shape around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn sum_all(&mut self, x: Var) -> Var {
        // Sequential left-to-right sum; the order is part of the determinism contract.
        let s = self.data(x).iter().fold(0.0, |a, v| a + v);
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().fold(0.0, |a, v| a + v) / t.numel() as f64;
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), needs)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.reduce_axis(x, axis, false)?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::SumAxis { x, axis }, needs))
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.reduce_axis(x, axis, true)?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::MeanAxis { x, axis }, needs))
    }

    fn reduce_axis(&self, x: Var, axis: usize, mean: bool) -> Result<Tensor> {
        let t = self.value(x);
        if axis >= t.rank() {
            return shape_err("reduce_axis", format!("axis {axis} out of range for {:?}", t.shape));
        }
        let (outer, len, inner) = split(&t.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &t.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let n = len as f64;
            out.iter_mut().for_each(|v| *v /= n);
        }
        let mut shape: Vec<usize> = t.shape.clone();
        shape.remove(axis);
        Tensor::new(&shape, out)
    }
}

pub(super) fn axis_backward(g: &Graph, x: Var, axis: usize, grad: &[f64], mean: bool, acc: &mut Accumulator<'_>) {
    let (outer, len, inner) = split(g.shape(x), axis);
    let f = if mean { 1.0 / len as f64 } else { 1.0 };
    acc.add(x, |gx| {
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    gx[(o * len + a) * inner + i] += f * grad[o * inner + i];
                }
            }
        }
    });
}
