use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Accumulator, Graph, Mode, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch statistics (biased variance) from a train-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    /// `running = momentum · running + (1 − momentum) · batch`
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64], momentum: f64) {
        for (r, b) in running_mean.iter_mut().zip(&self.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in running_var.iter_mut().zip(&self.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

impl Graph {
    /// Batch normalization over `(B, H, W)` per channel.
    ///
    /// Train mode normalizes with batch statistics and returns them so the
    /// owner can update its running estimates; eval mode uses
    /// `running_mean`/`running_var`.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        mode: Mode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [b, c, h, w] = self.value(x).dims4()?;
        for (v, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [c] {
                return shape_err("batchnorm2d", format!("{name} {:?} for {c} channels", self.shape(v)));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batchnorm2d", format!("running stats for {c} channels"));
        }
        let plane = h * w;
        let count = b * plane;
        let train = mode == Mode::Train;
        if train && count < 2 {
            return Err(Error::Config(format!("batchnorm2d in train mode needs B·H·W >= 2, got {count}")));
        }
        let xv = self.data(x);
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    s += xv[(bi * c + ci) * plane..(bi * c + ci + 1) * plane].iter().fold(0.0, |a, v| a + v);
                }
                let m = s / count as f64;
                let mut q = 0.0;
                for bi in 0..b {
                    q += xv[(bi * c + ci) * plane..(bi * c + ci + 1) * plane]
                        .iter()
                        .fold(0.0, |a, v| a + (v - m) * (v - m));
                }
                mean[ci] = m;
                var[ci] = q / count as f64;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let (gv, bv) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for p in off..off + plane {
                    let n = (xv[p] - mean[ci]) * inv_std[ci];
                    xhat[p] = n;
                    out[p] = gv[ci] * n + bv[ci];
                }
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train };
        let y = self.push(Tensor::new(&[b, c, h, w], out)?, op, needs);
        Ok((y, train.then_some(BatchStats { mean, var })))
    }

    /// Softmax over the channel axis of `[B,C,H,W]`, independently per location.
    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if c == 0 {
            return shape_err("channel_softmax", "zero channels".into());
        }
        let out = softmax_channels(self.data(x), b, c, h * w);
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[b, c, h, w], out)?, Op::ChannelSoftmax(x), needs))
    }

    /// Mean over all pixels of `−ln softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u8]) -> Result<Var> {
        let [b, c, h, w] = self.value(logits).dims4()?;
        let plane = h * w;
        if targets.len() != b * plane {
            return shape_err("cross_entropy", format!("{} targets for {b}x{h}x{w} pixels", targets.len()));
        }
        if let Some(t) = targets.iter().find(|t| **t as usize >= c) {
            return Err(Error::Config(format!("target class {t} >= class count {c}")));
        }
        let lv = self.data(logits);
        let mut total = 0.0;
        for bi in 0..b {
            for p in 0..plane {
                let at = |ci: usize| lv[(bi * c + ci) * plane + p];
                let m = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + math::ln((0..c).map(|ci| math::exp(at(ci) - m)).fold(0.0, |a, v| a + v));
                total += lse - at(targets[bi * plane + p] as usize);
            }
        }
        let loss = total / (b * plane) as f64;
        let needs = self.needs(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }
}

fn softmax_channels(xv: &[f64], b: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; xv.len()];
    for bi in 0..b {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(xv[base + ci * plane + p]);
            }
            let mut s = 0.0;
            for ci in 0..c {
                let e = math::exp(xv[base + ci * plane + p] - m);
                out[base + ci * plane + p] = e;
                s += e;
            }
            for ci in 0..c {
                out[base + ci * plane + p] /= s;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batchnorm_backward(
    g: &Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    inv_std: &[f64],
    train: bool,
    grad: &[f64],
    acc: &mut Accumulator<'_>,
) {
    let s = g.shape(x);
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let count = (b * plane) as f64;
    let gv = g.data(gamma);
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            for p in off..off + plane {
                sum_g[ci] += grad[p];
                sum_gx[ci] += grad[p] * xhat[p];
            }
        }
    }
    acc.add(gamma, |gg| gg.iter_mut().zip(&sum_gx).for_each(|(d, v)| *d += v));
    acc.add(beta, |gb| gb.iter_mut().zip(&sum_g).for_each(|(d, v)| *d += v));
    acc.add(x, |gx| {
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                let f = gv[ci] * inv_std[ci];
                for p in off..off + plane {
                    gx[p] += if train {
                        f * (grad[p] - sum_g[ci] / count - xhat[p] * sum_gx[ci] / count)
                    } else {
                        f * grad[p]
                    };
                }
            }
        }
    });
}

pub(super) fn softmax_backward(g: &Graph, out: usize, x: Var, grad: &[f64], acc: &mut Accumulator<'_>) {
    let s = g.shape(x);
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let y = &g.nodes[out].value.data;
    acc.add(x, |gx| {
        for bi in 0..b {
            let base = bi * c * plane;
            for p in 0..plane {
                let dot: f64 = (0..c).map(|ci| grad[base + ci * plane + p] * y[base + ci * plane + p]).sum();
                for ci in 0..c {
                    let q = base + ci * plane + p;
                    gx[q] += y[q] * (grad[q] - dot);
                }
            }
        }
    });
}

pub(super) fn cross_entropy_backward(g: &Graph, logits: Var, targets: &[u8], grad: &[f64], acc: &mut Accumulator<'_>) {
    let s = g.shape(logits);
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let probs = softmax_channels(g.data(logits), b, c, plane);
    let f = grad[0] / (b * plane) as f64;
    acc.add(logits, |gl| {
        for bi in 0..b {
            for p in 0..plane {
                let t = targets[bi * plane + p] as usize;
                for ci in 0..c {
                    let q = (bi * c + ci) * plane + p;
                    let onehot = if ci == t { 1.0 } else { 0.0 };
                    gl[q] += f * (probs[q] - onehot);
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::LN_2;

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2, 1, 2], vec![0.0, LN_2, 0.0, 0.0]).unwrap());
        let y = g.channel_softmax(x).unwrap();
        let v = g.data(y);
        assert_eq!((v[0], v[2]), (0.5, 0.5));
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 1, 2, 2], 3.25));
        let gamma = g.constant(Tensor::full(&[1], 1.7));
        let beta = g.constant(Tensor::full(&[1], -0.4));
        let (y, stats) = g.batchnorm2d(x, gamma, beta, &[0.0], &[1.0], Mode::Train, BN_EPS).unwrap();
        assert!(g.data(y).iter().all(|v| *v == -0.4));
        assert_eq!(stats.unwrap().var, vec![0.0]);
    }

    #[test]
    fn batchnorm_normalizes() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| math::sin(i as f64 * 1.3) * 4.0 + 2.0).collect();
        let x = g.constant(Tensor::new(&[2, 2, 3, 3], data).unwrap());
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let (y, _) = g.batchnorm2d(x, gamma, beta, &[0.0; 2], &[1.0; 2], Mode::Train, BN_EPS).unwrap();
        let yv = g.data(y);
        for c in 0..2 {
            let vals: Vec<f64> = (0..2).flat_map(|b| yv[(b * 2 + c) * 9..(b * 2 + c + 1) * 9].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 18.0;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-10);
            // eps keeps the variance slightly below one
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats_and_train_needs_two_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        let (y, stats) = g.batchnorm2d(x, gamma, beta, &[0.0], &[1.0], Mode::Eval, BN_EPS).unwrap();
        assert!(stats.is_none());
        assert!((g.data(y)[0] - 2.0 / math::sqrt(1.0 + BN_EPS)).abs() < 1e-15);
        assert!(g.batchnorm2d(x, gamma, beta, &[0.0], &[1.0], Mode::Train, BN_EPS).is_err());
    }

    #[test]
    fn running_stat_update() {
        let stats = BatchStats { mean: vec![2.0], var: vec![4.0] };
        let (mut m, mut v) = (vec![1.0], vec![3.0]);
        stats.update_running(&mut m, &mut v, BN_MOMENTUM);
        assert!((m[0] - (0.9 * 1.0 + 0.1 * 2.0)).abs() < 1e-15);
        assert!((v[0] - (0.9 * 3.0 + 0.1 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let ce = g.cross_entropy(l, &[0, 1, 1, 0]).unwrap();
        assert!((g.data(ce)[0] - LN_2).abs() < 1e-15);
        assert!(g.cross_entropy(l, &[0, 2, 1, 0]).is_err());
    }
}
