//! Uncertainty-aware feature selection.
//!
//! A head predicts per-location class probabilities `A` from a hidden map
//! `H`, their normalized entropy `u` measures how unsure the layer is, and the
//! features are re-weighted as `Ĥ = H ⊙ (1 + (1 − u))`.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{BatchStats, Graph, Mode, Var, BN_EPS};
use crate::error::{Error, Result};
use crate::math;

/// Graph handles for one head's parameters.
#[derive(Debug, Clone, Copy)]
pub struct UafsHead {
    pub conv1_weight: Var,
    pub conv1_bias: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub conv2_weight: Var,
    pub conv2_bias: Var,
}

/// BN running statistics for a head.
#[derive(Debug, Clone, Copy)]
pub struct RunningStats<'a> {
    pub mean: &'a [f64],
    pub var: &'a [f64],
}

/// Per-item normalized entropy maps, `[B, 1, h, w]`, entries in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct UncertaintyMap(pub Var);

impl UncertaintyMap {
    /// The `h × w` map of batch item `b`.
    pub fn item(&self, g: &Graph, b: usize) -> Vec<f64> {
        let s = g.shape(self.0);
        let plane = s[2] * s[3];
        g.data(self.0)[b * plane..(b + 1) * plane].to_vec()
    }
}

/// `A = softmax(conv2(relu(bn(conv1(H)))))`.
pub fn head_forward(
    g: &mut Graph,
    h: Var,
    head: &UafsHead,
    stats: RunningStats<'_>,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    let c = g.value(h).dims4()?[1];
    let wc = g.shape(head.conv1_weight)[1];
    if wc != c {
        return Err(Error::Config(format!("UAFS head expects {wc} channels, features have {c}")));
    }
    let x = g.conv2d(h, head.conv1_weight, head.conv1_bias, 1, 1)?;
    let (x, batch) = g.batchnorm2d(x, head.bn_gamma, head.bn_beta, stats.mean, stats.var, mode, BN_EPS)?;
    let x = g.relu(x);
    let logits = g.conv2d(x, head.conv2_weight, head.conv2_bias, 1, 0)?;
    Ok((g.channel_softmax(logits)?, batch))
}

/// `u = −Σ_m a_m log a_m / log M` with `0·log 0 = 0`.
pub fn entropy_map(g: &mut Graph, a: Var) -> Result<UncertaintyMap> {
    let [b, m, h, w] = g.value(a).dims4()?;
    if m < 2 {
        return Err(Error::Config(format!("normalized entropy needs at least 2 classes, got {m}")));
    }
    let plogp = g.xlogx(a);
    let s = g.sum_axis(plogp, 1)?;
    let s = g.reshape(s, &[b, 1, h, w])?;
    Ok(UncertaintyMap(g.scale(s, -1.0 / math::ln(m as f64))))
}

/// `Ĥ = H ⊙ (1 + (1 − u))`, broadcast over channels.
pub fn select_features(g: &mut Graph, h: Var, u: UncertaintyMap) -> Result<Var> {
    let [b, _, hh, ww] = g.value(h).dims4()?;
    if g.shape(u.0) != [b, 1, hh, ww] {
        return Err(Error::Config(format!("uncertainty map {:?} does not match features {:?}", g.shape(u.0), g.shape(h))));
    }
    let certainty = g.rsub_scalar(1.0, u.0);
    let factor = g.add_scalar(certainty, 1.0);
    g.mul_channels(h, factor)
}

/// Result of gating one block.
#[derive(Debug, Clone)]
pub struct GateOutput {
    pub features: Var,
    pub uncertainty: UncertaintyMap,
    pub stats: Option<BatchStats>,
}

/// Head, entropy and re-weighting in one step. With `detach`, the gate factor
/// is a constant and no gradient reaches the head.
pub fn gate(
    g: &mut Graph,
    h: Var,
    head: &UafsHead,
    stats: RunningStats<'_>,
    mode: Mode,
    detach: bool,
) -> Result<GateOutput> {
    let (a, batch) = head_forward(g, h, head, stats, mode)?;
    let mut u = entropy_map(g, a)?;
    if detach {
        let value = g.value(u.0).clone();
        u = UncertaintyMap(g.constant(value));
    }
    let features = select_features(g, h, u)?;
    Ok(GateOutput { features, uncertainty: u, stats: batch })
}
