use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Accumulator, Graph, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

/// Output extent of a strided, zero-padded window along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one image `[Cin,H,W]` into `[Cin·k·k, Ho·Wo]`.
fn im2col(x: &[f64], d: &ConvDims, col: &mut [f64]) {
    let cols = d.cols();
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = &mut col[((c * d.k + ky) * d.k + kx) * cols..][..cols];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        *v = if ix < 0 || ix >= d.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the image.
fn col2im(col: &[f64], d: &ConvDims, x: &mut [f64]) {
    let cols = d.cols();
    for c in 0..d.cin {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = &col[((c * d.k + ky) * d.k + kx) * cols..][..cols];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += row[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Zero-padded 2-D cross-correlation.
    ///
    /// `x: [B,Cin,H,W]`, `w: [Cout,Cin,k,k]`, `b: [Cout]` → `[B,Cout,H',W']`
    /// with `H' = (H + 2·pad − k) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [bn, cin, h, wd] = self.value(x).dims4()?;
        let [cout, wcin, k, k2] = self.value(w).dims4()?;
        if stride < 1 {
            return Err(Error::Config(format!("conv2d stride must be >= 1, got {stride}")));
        }
        if wcin != cin || k != k2 {
            return shape_err("conv2d", format!("input [{bn}, {cin}, {h}, {wd}] with weight {:?}", self.shape(w)));
        }
        if self.shape(b) != [cout] {
            return shape_err("conv2d", format!("bias {:?} for {cout} output channels", self.shape(b)));
        }
        let (Some(ho), Some(wo)) = (conv_out_len(h, k, stride, pad), conv_out_len(wd, k, stride, pad)) else {
            return shape_err("conv2d", format!("kernel {k} larger than padded input {h}x{wd} (pad {pad})"));
        };
        let d = ConvDims { cin, h, w: wd, k, stride, pad, ho, wo };
        let (rows, cols) = (d.rows(), d.cols());
        let xv = self.data(x);
        let wv = self.data(w);
        let bv = self.data(b);
        let mut out = vec![0.0; bn * cout * cols];
        let mut col = if d.is_pointwise() { Vec::new() } else { vec![0.0; rows * cols] };
        for bi in 0..bn {
            let img = &xv[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let o = &mut out[bi * cout * cols..(bi + 1) * cout * cols];
            for (c, chunk) in o.chunks_mut(cols).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[c]);
            }
            let cm: &[f64] = if d.is_pointwise() {
                img
            } else {
                im2col(img, &d, &mut col);
                &col
            };
            gemm(cout, rows, cols, wv, false, cm, false, o, true);
        }
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(Tensor::new(&[bn, cout, ho, wo], out)?, Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let xv = self.data(x);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * h2 * w2];
        for p in 0..b * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(p * h2 + y) * w2 + xx] = xv[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[b, c, h2, w2], out)?, Op::Upsample2x(x), needs))
    }

    /// Concatenate 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_channels", "no inputs".into());
        };
        let [b, _, h, w] = self.value(first).dims4()?;
        let mut ctot = 0;
        for &p in parts {
            let [pb, pc, ph, pw] = self.value(p).dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return shape_err("concat_channels", format!("{:?} vs {:?}", self.shape(first), self.shape(p)));
            }
            ctot += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * ctot * plane);
        for bi in 0..b {
            for &p in parts {
                let pc = self.shape(p)[1];
                out.extend_from_slice(&self.data(p)[bi * pc * plane..(bi + 1) * pc * plane]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(Tensor::new(&[b, ctot, h, w], out)?, Op::ConcatChannels(parts.to_vec()), needs))
    }

    /// Collect the channel vectors of batch item `batch` at `coords`: `[n, C]`.
    pub fn gather_spatial(&mut self, x: Var, batch: usize, coords: &[(usize, usize)]) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if batch >= b {
            return shape_err("gather_spatial", format!("batch index {batch} of {b}"));
        }
        if let Some(&(y, xx)) = coords.iter().find(|(y, xx)| *y >= h || *xx >= w) {
            return shape_err("gather_spatial", format!("coordinate ({y}, {xx}) outside {h}x{w}"));
        }
        let xv = self.data(x);
        let mut out = Vec::with_capacity(coords.len() * c);
        for &(y, xx) in coords {
            out.extend((0..c).map(|ci| xv[((batch * c + ci) * h + y) * w + xx]));
        }
        let needs = self.needs(&[x]);
        let op = Op::GatherSpatial { x, batch, coords: coords.to_vec() };
        Ok(self.push(Tensor::new(&[coords.len(), c], out)?, op, needs))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward(
    g: &Graph,
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
    grad: &[f64],
    acc: &mut Accumulator<'_>,
) {
    let xs = g.shape(x);
    let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (g.shape(w)[0], g.shape(w)[2]);
    let ho = conv_out_len(h, k, stride, pad).unwrap();
    let wo = conv_out_len(wd, k, stride, pad).unwrap();
    let d = ConvDims { cin, h, w: wd, k, stride, pad, ho, wo };
    let (rows, cols) = (d.rows(), d.cols());
    let xv = g.data(x);
    let wv = g.data(w);
    let img_len = cin * h * wd;

    acc.add(b, |gb| {
        for bi in 0..bn {
            for (c, chunk) in grad[bi * cout * cols..(bi + 1) * cout * cols].chunks(cols).enumerate() {
                gb[c] += chunk.iter().fold(0.0, |a, v| a + v);
            }
        }
    });

    let mut col = if d.is_pointwise() { Vec::new() } else { vec![0.0; rows * cols] };
    acc.add(w, |gw| {
        for bi in 0..bn {
            let img = &xv[bi * img_len..(bi + 1) * img_len];
            let cm: &[f64] = if d.is_pointwise() {
                img
            } else {
                im2col(img, &d, &mut col);
                &col
            };
            let go = &grad[bi * cout * cols..(bi + 1) * cout * cols];
            // dW[Cout, rows] += G[Cout, cols] · colᵀ
            gemm(cout, cols, rows, go, false, cm, true, gw, true);
        }
    });

    acc.add(x, |gx| {
        let mut dcol = vec![0.0; rows * cols];
        for bi in 0..bn {
            let go = &grad[bi * cout * cols..(bi + 1) * cout * cols];
            let dst = &mut gx[bi * img_len..(bi + 1) * img_len];
            if d.is_pointwise() {
                gemm(rows, cout, cols, wv, true, go, false, dst, true);
            } else {
                // dcol[rows, cols] = Wᵀ · G
                gemm(rows, cout, cols, wv, true, go, false, &mut dcol, false);
                col2im(&dcol, &d, dst);
            }
        }
    });
}

pub(super) fn upsample_backward(g: &Graph, x: Var, grad: &[f64], acc: &mut Accumulator<'_>) {
    let s = g.shape(x);
    let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
    let (h2, w2) = (2 * h, 2 * w);
    acc.add(x, |gx| {
        for p in 0..bc {
            for y in 0..h2 {
                for xx in 0..w2 {
                    gx[(p * h + y / 2) * w + xx / 2] += grad[(p * h2 + y) * w2 + xx];
                }
            }
        }
    });
}

pub(super) fn concat_backward(g: &Graph, parts: &[Var], grad: &[f64], acc: &mut Accumulator<'_>) {
    let s = g.shape(parts[0]);
    let (b, plane) = (s[0], s[2] * s[3]);
    let ctot: usize = parts.iter().map(|p| g.shape(*p)[1]).sum();
    let mut offset = 0;
    for &p in parts {
        let pc = g.shape(p)[1];
        acc.add(p, |gp| {
            for bi in 0..b {
                let src = &grad[(bi * ctot + offset) * plane..(bi * ctot + offset + pc) * plane];
                for (d, v) in gp[bi * pc * plane..(bi + 1) * pc * plane].iter_mut().zip(src) {
                    *d += v;
                }
            }
        });
        offset += pc;
    }
}

pub(super) fn gather_backward(
    g: &Graph,
    x: Var,
    batch: usize,
    coords: &[(usize, usize)],
    grad: &[f64],
    acc: &mut Accumulator<'_>,
) {
    let s = g.shape(x);
    let (c, h, w) = (s[1], s[2], s[3]);
    acc.add(x, |gx| {
        for (i, &(y, xx)) in coords.iter().enumerate() {
            for ci in 0..c {
                gx[((batch * c + ci) * h + y) * w + xx] += grad[i * c + ci];
            }
        }
    });
}
