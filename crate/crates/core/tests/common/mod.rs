//! Reference implementations written without the library's vectorized code
//! paths, plus the randomized suites that compare the two. Shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeSet;

use dragsaw_core::affinity::AffinityMatrix;
use dragsaw_core::geometry::{ConvLayer, ConvStackSpec};
use dragsaw_core::gradcheck::{grad_check, GradCheckReport};
use dragsaw_core::loss::total_loss;
use dragsaw_core::network::{SegNet, SegNetConfig};
use dragsaw_core::pdcr::{cosine_similarity_matrix, pdcr_layer_loss, PdcrConfig};
use dragsaw_core::rng::{rng_for, Rng};
use dragsaw_core::sample::ClassMap;
use dragsaw_core::uafs::{gate, RunningStats, UafsHead};
use dragsaw_core::{Graph, Mode, Result, Tensor, Var};
use rand::Rng as _;

pub fn uniform(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, uniform(rng, n, lo, hi)).unwrap()
}

// ---------------------------------------------------------------------------
// PDCR

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Pair-by-pair loss of one layer: for every anchor `i` and partner `j`,
/// `−ln( exp(s_ij·w_ij/τ) / Σ_k exp(s_ik·(1 − w_ik)/τ) )`, summed.
pub fn naive_pdcr(vectors: &[Vec<f64>], w: &[Vec<f64>], tau: f64, include_diagonal: bool) -> f64 {
    let n = vectors.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for k in 0..n {
            let s = cosine(&vectors[i], &vectors[k]);
            denom += (s * (1.0 - w[i][k]) / tau).exp();
        }
        for j in 0..n {
            if i == j && !include_diagonal {
                continue;
            }
            let s = cosine(&vectors[i], &vectors[j]);
            let num = (s * w[i][j] / tau).exp();
            total += -(num / denom).ln();
        }
    }
    total
}

pub fn vectorized_pdcr(vectors: &[Vec<f64>], w: &[Vec<f64>], tau: f64, include_diagonal: bool) -> Result<f64> {
    let (n, d) = (vectors.len(), vectors[0].len());
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(&[n, d], vectors.concat())?);
    let s = cosine_similarity_matrix(&mut g, v)?;
    let aff = AffinityMatrix { n, w: w.concat() };
    let l = pdcr_layer_loss(&mut g, s, &aff, tau, include_diagonal)?;
    Ok(g.value(l).item())
}

/// A symmetric affinity matrix with unit diagonal and entries in `[0, 1]`.
pub fn random_affinity(rng: &mut Rng, n: usize) -> Vec<Vec<f64>> {
    let mut w = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = match rng.random_range(0..4) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random_range(0.0..1.0),
            };
            w[i][j] = v;
            w[j][i] = v;
        }
    }
    w
}

pub struct PdcrTrialStats {
    pub trials: usize,
    pub max_abs_err: f64,
}

/// Random problems with `n ≤ 8`: vectorized loss against the pair loop.
pub fn pdcr_trials(trials: usize, seed: u64) -> PdcrTrialStats {
    let mut rng = rng_for(seed, 1);
    let mut max_abs_err: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=6);
        let vectors: Vec<Vec<f64>> = (0..n)
            .map(|_| loop {
                let v = uniform(&mut rng, d, -1.0, 1.0);
                if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                    break v;
                }
            })
            .collect();
        let w = random_affinity(&mut rng, n);
        let tau = rng.random_range(0.05..2.0);
        let diag = rng.random_bool(0.5);
        let fast = vectorized_pdcr(&vectors, &w, tau, diag).unwrap();
        let slow = naive_pdcr(&vectors, &w, tau, diag);
        max_abs_err = max_abs_err.max((fast - slow).abs());
    }
    PdcrTrialStats { trials, max_abs_err }
}

/// Two orthogonal vectors with zero mutual affinity at `τ = 1`.
pub fn hand_case() -> f64 {
    let vectors = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let w = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    vectorized_pdcr(&vectors, &w, 1.0, true).unwrap()
}

// ---------------------------------------------------------------------------
// Receptive fields

fn out_len(len: usize, l: &ConvLayer) -> Option<usize> {
    (len + 2 * l.padding).checked_sub(l.kernel).map(|v| v / l.stride + 1)
}

/// Input positions a hidden unit reads, found by expanding every kernel tap
/// back through the stack one layer at a time. With `clip_each_layer`,
/// positions that land in a layer's zero padding are dropped; otherwise
/// padding is treated as virtual units that still look further back.
pub fn dependency_1d(layers: &[ConvLayer], len: usize, unit: i64, clip_each_layer: bool) -> BTreeSet<i64> {
    let mut lens = vec![len];
    for l in layers {
        lens.push(out_len(*lens.last().unwrap(), l).unwrap());
    }
    let mut set = BTreeSet::from([unit]);
    for (li, l) in layers.iter().enumerate().rev() {
        let below = lens[li] as i64;
        set = set
            .iter()
            .flat_map(|&u| (0..l.kernel as i64).map(move |t| u * l.stride as i64 - l.padding as i64 + t))
            .filter(|&p| !clip_each_layer || (0..below).contains(&p))
            .collect();
    }
    set
}

pub fn random_stack(rng: &mut Rng) -> ConvStackSpec {
    loop {
        let depth = rng.random_range(1..=4);
        let layers: Vec<ConvLayer> = (0..depth)
            .map(|_| {
                let kernel = [1, 3, 5, 7][rng.random_range(0..4)];
                let stride = rng.random_range(1..=3);
                let padding = rng.random_range(0..=kernel / 2);
                ConvLayer::new(kernel, stride, padding)
            })
            .collect();
        let size = (rng.random_range(8..=40), rng.random_range(8..=40));
        if let Ok(spec) = ConvStackSpec::new(layers, size) {
            return spec;
        }
    }
}

/// Checks every unit of every layer of `stacks` random stacks. Returns the
/// number of units checked, or a description of the first disagreement.
pub fn geometry_trials(stacks: usize, seed: u64) -> std::result::Result<usize, String> {
    let mut rng = rng_for(seed, 2);
    let mut checked = 0;
    for trial in 0..stacks {
        let spec = random_stack(&mut rng);
        let (h, w) = spec.image_size;
        for layer in 1..=spec.depth() {
            let geom = spec.layer_geometry(layer).map_err(|e| e.to_string())?;
            let sub = &spec.layers[..layer];
            let span = |set: &BTreeSet<i64>| (*set.first().unwrap(), *set.last().unwrap());
            let ys: Vec<_> = (0..geom.extent.0).map(|y| (dependency_1d(sub, h, y as i64, false), dependency_1d(sub, h, y as i64, true))).collect();
            let xs: Vec<_> = (0..geom.extent.1).map(|x| (dependency_1d(sub, w, x as i64, false), dependency_1d(sub, w, x as i64, true))).collect();
            for (y, (y_all, y_clip)) in ys.iter().enumerate() {
                for (x, (x_all, x_clip)) in xs.iter().enumerate() {
                    let rect = geom.patch_bounds((y, x), (h, w));
                    let ((y0, y1), (x0, x1)) = (span(y_all), span(x_all));
                    let ctx = || format!("stack {trial} {:?} size {:?} layer {layer} unit ({y}, {x})", spec.layers, (h, w));
                    if (y1 - y0 + 1) as usize != geom.r || (x1 - x0 + 1) as usize != geom.r {
                        return Err(format!("{}: span {}x{} but r = {}", ctx(), y1 - y0 + 1, x1 - x0 + 1, geom.r));
                    }
                    if rect.center != ((y0 + y1) / 2, (x0 + x1) / 2) {
                        return Err(format!("{}: centre {:?} vs span midpoint", ctx(), rect.center));
                    }
                    let clip = |v: i64, n: usize| v.clamp(0, n as i64) as usize;
                    let expect = (clip(y0, h), clip(y1 + 1, h), clip(x0, w), clip(x1 + 1, w));
                    if (rect.top, rect.bottom, rect.left, rect.right) != expect {
                        return Err(format!("{}: patch {rect:?} vs brute force {expect:?}", ctx()));
                    }
                    let inside = |set: &BTreeSet<i64>, lo: usize, hi: usize| set.iter().all(|p| (lo as i64..hi as i64).contains(p));
                    if !inside(y_clip, rect.top, rect.bottom) || !inside(x_clip, rect.left, rect.right) {
                        return Err(format!("{}: a real dependency lies outside {rect:?}", ctx()));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(checked)
}

// ---------------------------------------------------------------------------
// Gradients

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

/// `Σ out ⊙ r` for a fixed random `r`, so that every output element gets a
/// distinct weight in the scalar being differentiated.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = rng_for(seed, 99);
    let r = g.constant(random_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(out, r)?;
    Ok(g.sum_all(p))
}

fn check(name: &str, x: &Tensor, tol: f64, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> (String, GradCheckReport) {
    let seed = dragsaw_core::rng::fnv1a(name);
    let report = grad_check(|g, v| { let y = f(g, v)?; probe(g, y, seed) }, x, STEP, tol).unwrap();
    (name.to_string(), report)
}

/// Entries bounded away from zero, for `ln`, `xlogx` and ReLU kinks.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(rng, shape, 0.1, 1.5);
    for v in &mut t.data {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Every autodiff operation against central differences.
pub fn primitive_grad_checks() -> Vec<(String, GradCheckReport)> {
    let mut rng = rng_for(7, 3);
    let tol = PRIMITIVE_TOL;
    let a = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let m = random_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    let pos = random_tensor(&mut rng, &[3, 4], 0.2, 2.0);
    let signed = away_from_zero(&mut rng, &[3, 4]);
    let img = random_tensor(&mut rng, &[2, 3, 5, 4], -1.0, 1.0);
    let img_pos = random_tensor(&mut rng, &[2, 3, 5, 4], 0.05, 1.0);
    let kernel = random_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let bias = random_tensor(&mut rng, &[2], -1.0, 1.0);
    let chan = random_tensor(&mut rng, &[2, 1, 5, 4], -1.0, 1.0);
    let gamma = random_tensor(&mut rng, &[3], 0.5, 1.5);
    let beta = random_tensor(&mut rng, &[3], -0.5, 0.5);
    let targets: Vec<u8> = (0..2 * 5 * 4).map(|_| rng.random_range(0..3)).collect();
    let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);

    let c = |g: &mut Graph, t: &Tensor| g.constant(t.clone());
    vec![
        check("add.lhs", &a, tol, |g, x| { let y = c(g, &b); g.add(x, y) }),
        check("add.rhs", &b, tol, |g, x| { let y = c(g, &a); g.add(y, x) }),
        check("sub.lhs", &a, tol, |g, x| { let y = c(g, &b); g.sub(x, y) }),
        check("sub.rhs", &b, tol, |g, x| { let y = c(g, &a); g.sub(y, x) }),
        check("mul.lhs", &a, tol, |g, x| { let y = c(g, &b); g.mul(x, y) }),
        check("mul.rhs", &b, tol, |g, x| { let y = c(g, &a); g.mul(y, x) }),
        check("mul.self", &a, tol, |g, x| g.mul(x, x)),
        check("scale", &a, tol, |g, x| Ok(g.scale(x, -2.5))),
        check("add_scalar", &a, tol, |g, x| Ok(g.add_scalar(x, 0.75))),
        check("rsub_scalar", &a, tol, |g, x| Ok(g.rsub_scalar(2.0, x))),
        check("relu", &signed, tol, |g, x| Ok(g.relu(x))),
        check("ln", &pos, tol, |g, x| Ok(g.ln(x))),
        check("exp", &a, tol, |g, x| Ok(g.exp(x))),
        check("xlogx", &pos, tol, |g, x| Ok(g.xlogx(x))),
        check("reshape", &a, tol, |g, x| g.reshape(x, &[2, 6])),
        check("mul_channels.x", &img, tol, |g, x| { let s = c(g, &chan); g.mul_channels(x, s) }),
        check("mul_channels.s", &chan, tol, |g, x| { let h = c(g, &img); g.mul_channels(h, x) }),
        check("matmul.lhs", &a, tol, |g, x| { let y = c(g, &m); g.matmul(x, y) }),
        check("matmul.rhs", &m, tol, |g, x| { let y = c(g, &a); g.matmul(y, x) }),
        check("transpose", &a, tol, |g, x| g.transpose(x)),
        check("row_norm", &a, tol, |g, x| g.row_norm(x)),
        check("div_rows.x", &a, tol, |g, x| { let s = g.constant(Tensor::new(&[3], vec![0.5, 1.5, -2.0]).unwrap()); g.div_rows(x, s) }),
        check("div_rows.s", &Tensor::new(&[3], vec![0.5, 1.5, -2.0]).unwrap(), tol, |g, x| { let y = c(g, &a); g.div_rows(y, x) }),
        check("logsumexp_rows", &a, tol, |g, x| g.logsumexp_rows(x)),
        check("sum_all", &a, tol, |g, x| Ok(g.sum_all(x))),
        check("mean_all", &a, tol, |g, x| Ok(g.mean_all(x))),
        check("sum_axis.0", &a, tol, |g, x| g.sum_axis(x, 0)),
        check("sum_axis.1", &a, tol, |g, x| g.sum_axis(x, 1)),
        check("mean_axis.1", &img, tol, |g, x| g.mean_axis(x, 1)),
        check("conv2d.x", &img, tol, |g, x| { let (w, bb) = (c(g, &kernel), c(g, &bias)); g.conv2d(x, w, bb, 1, 1) }),
        check("conv2d.x.strided", &img, tol, |g, x| { let (w, bb) = (c(g, &kernel), c(g, &bias)); g.conv2d(x, w, bb, 2, 1) }),
        check("conv2d.weight", &kernel, tol, |g, x| { let (h, bb) = (c(g, &img), c(g, &bias)); g.conv2d(h, x, bb, 2, 1) }),
        check("conv2d.bias", &bias, tol, |g, x| { let (h, w) = (c(g, &img), c(g, &kernel)); g.conv2d(h, w, x, 1, 0) }),
        check("upsample2x", &img, tol, |g, x| g.upsample2x(x)),
        check("concat_channels", &img, tol, |g, x| { let y = c(g, &chan); g.concat_channels(&[y, x, x]) }),
        check("gather_spatial", &img, tol, |g, x| g.gather_spatial(x, 1, &[(0, 0), (4, 3), (2, 1), (4, 3)])),
        check("channel_softmax", &img, tol, |g, x| g.channel_softmax(x)),
        check("cross_entropy", &img, tol, |g, x| g.cross_entropy(x, &targets)),
        check("batchnorm2d.train.x", &img, tol, |g, x| {
            let (ga, be) = (c(g, &gamma), c(g, &beta));
            Ok(g.batchnorm2d(x, ga, be, &rm, &rv, Mode::Train, 1e-5)?.0)
        }),
        check("batchnorm2d.train.gamma", &gamma, tol, |g, x| {
            let (h, be) = (c(g, &img), c(g, &beta));
            Ok(g.batchnorm2d(h, x, be, &rm, &rv, Mode::Train, 1e-5)?.0)
        }),
        check("batchnorm2d.train.beta", &beta, tol, |g, x| {
            let (h, ga) = (c(g, &img), c(g, &gamma));
            Ok(g.batchnorm2d(h, ga, x, &rm, &rv, Mode::Train, 1e-5)?.0)
        }),
        check("batchnorm2d.eval.x", &img, tol, |g, x| {
            let (ga, be) = (c(g, &gamma), c(g, &beta));
            Ok(g.batchnorm2d(x, ga, be, &rm, &rv, Mode::Eval, 1e-5)?.0)
        }),
        check("xlogx.image", &img_pos, tol, |g, x| Ok(g.xlogx(x))),
    ]
}

/// The layer loss as a function of the raw feature vectors.
pub fn pdcr_grad_checks() -> Vec<(String, GradCheckReport)> {
    let mut rng = rng_for(11, 4);
    let mut out = Vec::new();
    for (n, d, tau, diag) in [(2, 3, 1.0, true), (5, 4, 0.5, true), (8, 6, 0.1, false), (6, 2, 2.0, false)] {
        let x = random_tensor(&mut rng, &[n, d], -1.0, 1.0);
        let aff = AffinityMatrix { n, w: random_affinity(&mut rng, n).concat() };
        let name = format!("pdcr_layer_loss n={n} d={d} tau={tau} diag={diag}");
        let report = grad_check(
            |g, v| {
                let s = cosine_similarity_matrix(g, v)?;
                pdcr_layer_loss(g, s, &aff, tau, diag)
            },
            &x,
            STEP,
            COMPOSITE_TOL,
        )
        .unwrap();
        out.push((name, report));
    }
    out
}

/// The gated features as a function of `H` and of each head parameter, in
/// both BN modes.
pub fn uafs_grad_checks() -> Vec<(String, GradCheckReport)> {
    let mut rng = rng_for(13, 5);
    let (c, m) = (3, 3);
    let h = random_tensor(&mut rng, &[2, c, 4, 5], -1.0, 1.0);
    let params = [
        random_tensor(&mut rng, &[c, c, 3, 3], -0.6, 0.6),
        random_tensor(&mut rng, &[c], -0.3, 0.3),
        random_tensor(&mut rng, &[c], 0.5, 1.5),
        random_tensor(&mut rng, &[c], -0.3, 0.3),
        random_tensor(&mut rng, &[m, c, 1, 1], -1.0, 1.0),
        random_tensor(&mut rng, &[m], -0.3, 0.3),
    ];
    let names = ["conv1.weight", "conv1.bias", "bn.gamma", "bn.beta", "conv2.weight", "conv2.bias"];
    let (rm, rv) = (vec![0.05, -0.1, 0.0], vec![0.8, 1.2, 1.0]);

    // `which`: None differentiates H, Some(k) the k-th head parameter.
    let run = |g: &mut Graph, x: Var, which: Option<usize>, mode: Mode| -> Result<Var> {
        let hv = if which.is_none() { x } else { g.constant(h.clone()) };
        let p: Vec<Var> = (0..6).map(|k| if which == Some(k) { x } else { g.constant(params[k].clone()) }).collect();
        let head = UafsHead {
            conv1_weight: p[0],
            conv1_bias: p[1],
            bn_gamma: p[2],
            bn_beta: p[3],
            conv2_weight: p[4],
            conv2_bias: p[5],
        };
        Ok(gate(g, hv, &head, RunningStats { mean: &rm, var: &rv }, mode, false)?.features)
    };
    let mut out = Vec::new();
    for mode in [Mode::Train, Mode::Eval] {
        for which in std::iter::once(None).chain((0..6).map(Some)) {
            // Under batch statistics a bias feeding BN cancels exactly: its
            // true gradient is zero and the comparison would measure round-off.
            if mode == Mode::Train && which == Some(1) {
                continue;
            }
            let x = which.map_or(&h, |k| &params[k]);
            let name = format!("uafs {:?} d/d{}", mode, which.map_or("H", |k| names[k]));
            out.push(check(&name, x, COMPOSITE_TOL, |g, v| run(g, v, which, mode)));
        }
    }
    out
}

pub struct NetGradCheck {
    pub name: String,
    /// `‖a − n‖₂ / (‖a‖₂ + ‖n‖₂)` over the tensor's coordinates.
    pub rel_err: f64,
    /// Both gradients are round-off (a bias feeding batch statistics has a
    /// true gradient of zero), so a ratio would compare noise with noise.
    pub vanishing: bool,
    pub compared: usize,
}

/// Largest gradient entry treated as round-off of zero.
pub const ROUND_OFF: f64 = 1e-7;

impl NetGradCheck {
    pub fn passed(&self) -> bool {
        self.vanishing || self.rel_err <= COMPOSITE_TOL
    }
}

/// The objective is a sum of many terms of order one, so a wider step keeps
/// cancellation error well under the tolerance.
const NET_STEP: f64 = 1e-5;

/// Gradient of the complete training objective of a two-block network on an
/// 8×8 input with respect to every trainable tensor.
pub fn net_grad_checks() -> Vec<NetGradCheck> {
    let cfg = SegNetConfig { encoder_channels: vec![3, 4], uafs_layers: SegNetConfig::all_blocks(2), seed: 5, ..SegNetConfig::default() };
    let net = SegNet::new(cfg).unwrap();
    let pdcr = PdcrConfig { tap_blocks: vec![1, 2], samples: 9, lambda: 0.5, ..PdcrConfig::default() };
    let mut rng = rng_for(17, 6);
    let input = random_tensor(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
    let masks: Vec<ClassMap> = (0..2)
        .map(|b| {
            let labels = (0..64).map(|p| u8::from((p / 8 + p % 8 + b) % 7 < 3)).collect();
            ClassMap::new(8, 8, labels).unwrap()
        })
        .collect();

    let loss_of = |net: &SegNet, track: bool| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let out = net.forward_with_taps(&mut g, &input, Mode::Train, &pdcr.tap_blocks, track).unwrap();
        let terms = total_loss(&mut g, &out, &masks, 2, &pdcr).unwrap();
        (g, out.bound, terms.total)
    };
    let (mut g, bound, total) = loss_of(&net, true);
    g.backward(total).unwrap();

    let mut out = Vec::new();
    let mut probe = net.clone();
    for (idx, entry) in net.params.entries().iter().enumerate() {
        if !entry.trainable {
            continue;
        }
        let analytic = g.grad(bound[idx]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; entry.tensor.numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = entry.tensor.data[i];
            let mut eval = |v: f64| {
                probe.params.entries_mut()[idx].tensor.data[i] = v;
                let (g, _, t) = loss_of(&probe, false);
                g.value(t).item()
            };
            numeric.push((eval(orig + NET_STEP) - eval(orig - NET_STEP)) / (2.0 * NET_STEP));
            probe.params.entries_mut()[idx].tensor.data[i] = orig;
        }
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut analytic.iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
        let vanishing = analytic.iter().chain(&numeric).all(|v| v.abs() <= ROUND_OFF);
        let rel_err = if scale == 0.0 { 0.0 } else { diff / scale };
        out.push(NetGradCheck { name: entry.name.clone(), rel_err, vanishing, compared: analytic.len() });
    }
    out
}

// ---------------------------------------------------------------------------
// Invariants

pub type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok { Ok(()) } else { Err(msg()) }
}

/// Left half background, right half foreground.
pub fn half_split_mask(size: usize) -> ClassMap {
    let labels = (0..size * size).map(|p| u8::from(p % size >= size / 2)).collect();
    ClassMap::new(size, size, labels).unwrap()
}

/// All four affinity variants on a synthetic mask and on the half-split mask.
pub fn affinity_invariants() -> Check {
    use dragsaw_core::affinity::{affinity_matrix, grid_sample_coords, AffinityVariant, Denominator};
    use dragsaw_core::synth::{generate_sample, SyntheticConfig};

    let net = SegNetConfig::default();
    let data = SyntheticConfig::default();
    let mut matrices = 0;
    let masks = [generate_sample(&data, 3).unwrap().mask, generate_sample(&data, 11).unwrap().mask, half_split_mask(64)];
    for mask in &masks {
        for block in [2, 3, 4] {
            let geom = net.tap_geometry(block, mask.size()).map_err(|e| e.to_string())?;
            let grid = grid_sample_coords(geom.extent, 128);
            let n = grid.coords.len();
            for denom in [Denominator::Unclipped, Denominator::Clipped] {
                let w = affinity_matrix(mask, &grid, &geom, 2, AffinityVariant::Continuous, denom).map_err(|e| e.to_string())?;
                for i in 0..n {
                    ensure(w.get(i, i) == 1.0, || format!("block {block}: diagonal {i} is {}", w.get(i, i)))?;
                    for j in 0..n {
                        let v = w.get(i, j);
                        ensure(v == w.get(j, i), || format!("block {block}: asymmetric at ({i}, {j})"))?;
                        ensure((0.0..=1.0).contains(&v), || format!("block {block}: w[{i}][{j}] = {v}"))?;
                    }
                }
                matrices += 1;
            }
            let constant = affinity_matrix(mask, &grid, &geom, 2, AffinityVariant::Constant, Denominator::Unclipped).unwrap();
            ensure(constant.w.iter().all(|v| *v == 0.5), || "constant variant has an entry other than 0.5".into())?;
            let diagonal = affinity_matrix(mask, &grid, &geom, 2, AffinityVariant::Diagonal, Denominator::Unclipped).unwrap();
            ensure(diagonal == AffinityMatrix::identity(n), || "diagonal variant is not the identity".into())?;
            matrices += 2;
        }
    }

    // Bipartite on the half split: 1 exactly when both centres fall on the
    // same side, so sorting by side gives two all-ones blocks.
    let mask = half_split_mask(64);
    for block in [2, 3, 4] {
        let geom = net.tap_geometry(block, mask.size()).unwrap();
        let grid = grid_sample_coords(geom.extent, 128);
        let w = affinity_matrix(&mask, &grid, &geom, 2, AffinityVariant::Bipartite, Denominator::Unclipped).unwrap();
        let side: Vec<bool> = grid.coords.iter().map(|&c| geom.patch_bounds(c, (64, 64)).clamped_center((64, 64)).1 >= 32).collect();
        let left = side.iter().filter(|s| !**s).count();
        ensure(left > 0 && left < side.len(), || format!("block {block}: grid does not straddle the split"))?;
        let mut order: Vec<usize> = (0..side.len()).collect();
        order.sort_by_key(|&i| side[i]);
        let sorted = w.select(&order);
        for (a, &i) in order.iter().enumerate() {
            for (b, &j) in order.iter().enumerate() {
                let expect = if (a < left) == (b < left) { 1.0 } else { 0.0 };
                ensure(sorted.get(a, b) == expect, || format!("block {block}: bipartite ({i}, {j}) = {}", sorted.get(a, b)))?;
            }
        }
        matrices += 1;
    }
    Ok(format!("{matrices} matrices"))
}

fn entropy_of(probs: &[f64], m: usize) -> f64 {
    use dragsaw_core::uafs::entropy_map;
    let mut g = Graph::new();
    let n = probs.len() / m;
    // Class-major layout: `[1, M, 1, n]`.
    let mut data = vec![0.0; probs.len()];
    for p in 0..n {
        for c in 0..m {
            data[c * n + p] = probs[p * m + c];
        }
    }
    let a = g.constant(Tensor::new(&[1, m, 1, n], data).unwrap());
    let u = entropy_map(&mut g, a).unwrap();
    g.data(u.0)[0]
}

/// Closed-form entropy values and the range of the gate factor on random heads.
pub fn entropy_invariants() -> Check {
    for m in 2..=6 {
        for hot in 0..m {
            let mut p = vec![0.0; m];
            p[hot] = 1.0;
            let u = entropy_of(&p, m);
            ensure(u == 0.0, || format!("one-hot M={m} gives {u}"))?;
        }
        let u = entropy_of(&vec![1.0 / m as f64; m], m);
        ensure((u - 1.0).abs() <= 1e-12, || format!("uniform M={m} gives {u}"))?;
    }
    let u = entropy_of(&[0.75, 0.25], 2);
    ensure((u - 0.811278).abs() <= 1e-6, || format!("(0.75, 0.25) gives {u}"))?;

    let mut rng = rng_for(19, 7);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for m in 2..=4 {
        let c = 4;
        let h = random_tensor(&mut rng, &[2, c, 6, 6], -2.0, 2.0);
        let mut g = Graph::new();
        let hv = g.constant(h);
        let mut p = |g: &mut Graph, shape: &[usize], lo: f64, hi: f64| g.constant(random_tensor(&mut rng, shape, lo, hi));
        let head = UafsHead {
            conv1_weight: p(&mut g, &[c, c, 3, 3], -1.0, 1.0),
            conv1_bias: p(&mut g, &[c], -0.5, 0.5),
            bn_gamma: p(&mut g, &[c], 0.5, 2.0),
            bn_beta: p(&mut g, &[c], -0.5, 0.5),
            conv2_weight: p(&mut g, &[m, c, 1, 1], -3.0, 3.0),
            conv2_bias: p(&mut g, &[m], -1.0, 1.0),
        };
        let (rm, rv) = (vec![0.0; c], vec![1.0; c]);
        for mode in [Mode::Train, Mode::Eval] {
            let out = gate(&mut g, hv, &head, RunningStats { mean: &rm, var: &rv }, mode, false).unwrap();
            for (i, &u) in g.data(out.uncertainty.0).iter().enumerate() {
                let scale = 1.0 + (1.0 - u);
                lo = lo.min(scale);
                hi = hi.max(scale);
                ensure((1.0..=2.0).contains(&scale), || format!("M={m} {mode:?}: scale {scale} at {i}"))?;
            }
        }
    }
    Ok(format!("gate scales within [{lo:.4}, {hi:.4}]"))
}

/// Gated network with zero-initialized final head convs against the same
/// network without gates: logits must agree bit for bit.
pub fn zero_init_identity() -> Check {
    let gated = SegNetConfig { uafs_zero_init: true, ..SegNetConfig::default() };
    let plain = SegNetConfig { uafs_layers: Vec::new(), ..gated.clone() };
    let (a, b) = (SegNet::new(gated).unwrap(), SegNet::new(plain).unwrap());
    let mut rng = rng_for(23, 8);
    let input = random_tensor(&mut rng, &[2, 1, 64, 64], 0.0, 1.0);
    let mut compared = 0;
    for mode in [Mode::Train, Mode::Eval] {
        let logits = |net: &SegNet| {
            let mut g = Graph::new();
            let out = net.forward_with_taps(&mut g, &input, mode, &[], false).unwrap();
            g.value(out.logits).data.clone()
        };
        let (la, lb) = (logits(&a), logits(&b));
        let same = la.len() == lb.len() && la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || {
            let i = la.iter().zip(&lb).position(|(x, y)| x.to_bits() != y.to_bits()).unwrap_or(0);
            format!("{mode:?}: logit {i} differs: {} vs {}", la[i], lb[i])
        })?;
        compared += la.len();
    }
    Ok(format!("{compared} logits bit-identical"))
}

/// The half-truth hand case and `DI ≥ JA` over random masks.
pub fn metric_identities() -> Check {
    use dragsaw_core::metrics::Confusion;
    let truth = ClassMap::new(1, 8, vec![0, 0, 1, 1, 1, 1, 0, 0]).unwrap();
    let pred = ClassMap::new(1, 8, vec![0, 0, 1, 1, 0, 0, 0, 0]).unwrap();
    let mut c = Confusion::new(2);
    c.add(&pred, &truth).unwrap();
    let r = c.report(1);
    ensure(r.di == 2.0 / 3.0 && r.ja == 0.5, || format!("half-truth case: di {} ja {}", r.di, r.ja))?;

    let mut rng = rng_for(29, 9);
    let rows = 500;
    for _ in 0..rows {
        let m = rng.random_range(2..=4);
        let n = rng.random_range(1..=40);
        let p_fg = rng.random_range(0.0..1.0);
        let map = |rng: &mut Rng| {
            let labels = (0..n).map(|_| if rng.random_bool(p_fg) { rng.random_range(1..m as u8) } else { 0 }).collect();
            ClassMap::new(1, n, labels).unwrap()
        };
        let mut c = Confusion::new(m);
        c.add(&map(&mut rng), &map(&mut rng)).unwrap();
        let r = c.report(1);
        ensure(r.di >= r.ja, || format!("di {} < ja {}", r.di, r.ja))?;
        for k in 0..m {
            ensure(r.per_class_di[k] >= r.per_class_ja[k], || format!("class {k}: di < ja"))?;
        }
    }
    Ok(format!("hand case exact, {rows} random reports"))
}
