//! Patch-dragsaw contrastive loss.
//!
//! For the `n` hidden vectors sampled from one layer of one image, with
//! cosine similarities `s` and affinities `w` (dissimilarity `w̄ = 1 − w`):
//!
//! ```text
//! ℓ_ij = −log( exp(s_ij·w_ij/τ) / Σ_k exp(s_ik·w̄_ik/τ) )
//! L_l  = Σ_i Σ_j ℓ_ij
//! ```
//!
//! which expands to `L_l = −(1/τ)·Σ_ij s_ij·w_ij + Σ_i n_i·LSE_k(s_ik·w̄_ik/τ)`
//! with `n_i` the number of `j` terms in row `i`. That expanded form is what
//! [`pdcr_layer_loss`] builds on the tape.

use alloc::format;
use alloc::vec::Vec;

use crate::affinity::{affinity_matrix, grid_sample_coords, AffinityMatrix, AffinityVariant, Denominator};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::LayerGeometry;
use crate::math;
use crate::sample::ClassMap;
use crate::tensor::Tensor;

/// Vectors with a norm at or below this are dropped from the layer loss.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PdcrConfig {
    /// Temperature `τ > 0`.
    pub tau: f64,
    /// Weight of the contrastive term against the segmentation loss. The term
    /// is an unnormalized sum over `samples²` pairs per tap, hence the small
    /// default.
    pub lambda: f64,
    /// Hidden vectors sampled per tapped layer.
    pub samples: usize,
    /// 1-based encoder blocks whose outputs are regularized.
    pub tap_blocks: Vec<usize>,
    pub variant: AffinityVariant,
    /// Keep the `i = j` terms of the double sum.
    pub include_diagonal: bool,
    pub denominator: Denominator,
}

impl Default for PdcrConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda: 0.001,
            samples: 128,
            tap_blocks: alloc::vec![2, 3, 4],
            variant: AffinityVariant::Continuous,
            include_diagonal: true,
            denominator: Denominator::Unclipped,
        }
    }
}

impl PdcrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("pdcr.tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("pdcr.lambda must be >= 0, got {}", self.lambda)));
        }
        if self.samples == 0 {
            return Err(Error::Config("pdcr.samples must be >= 1".into()));
        }
        Ok(())
    }

    /// The contrastive term contributes to the objective.
    pub fn active(&self) -> bool {
        self.lambda > 0.0 && !self.tap_blocks.is_empty()
    }
}

/// `s_ij = v_i·v_j / (‖v_i‖‖v_j‖)` for the rows of `vectors: [n, d]`.
///
/// Rows must have norm above [`MIN_NORM`]; [`pdcr_total_loss`] filters them.
pub fn cosine_similarity_matrix(g: &mut Graph, vectors: Var) -> Result<Var> {
    let norms = g.row_norm(vectors)?;
    if let Some(i) = g.data(norms).iter().position(|n| *n <= MIN_NORM) {
        return Err(Error::Contract(format!("vector {i} has zero norm")));
    }
    let unit = g.div_rows(vectors, norms)?;
    let unit_t = g.transpose(unit)?;
    g.matmul(unit, unit_t)
}

/// Layer loss `L_l` for similarities `s: [n, n]` and constant affinities `w`.
pub fn pdcr_layer_loss(
    g: &mut Graph,
    s: Var,
    w: &AffinityMatrix,
    tau: f64,
    include_diagonal: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let n = w.n;
    if g.shape(s) != [n, n] {
        return Err(Error::Shape { op: "pdcr_layer_loss", detail: format!("similarity {:?} vs affinity {n}x{n}", g.shape(s)) });
    }
    if n == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut attract = w.w.clone();
    if !include_diagonal {
        (0..n).for_each(|i| attract[i * n + i] = 0.0);
    }
    let repel: Vec<f64> = w.w.iter().map(|v| 1.0 - v).collect();
    let terms_per_row = if include_diagonal { n } else { n - 1 } as f64;

    let attract = g.constant(Tensor::new(&[n, n], attract)?);
    let repel = g.constant(Tensor::new(&[n, n], repel)?);
    let pull = g.mul(s, attract)?;
    let pull = g.sum_all(pull);
    let pull = g.scale(pull, -1.0 / tau);
    let logits = g.mul(s, repel)?;
    let logits = g.scale(logits, 1.0 / tau);
    let lse = g.logsumexp_rows(logits)?;
    let push = g.sum_all(lse);
    let push = g.scale(push, terms_per_row);
    g.add(pull, push)
}

/// Individual `ℓ_ij` values for debug dumps (not differentiable).
pub fn pdcr_pair_terms(s: &[f64], w: &AffinityMatrix, tau: f64) -> Vec<f64> {
    let n = w.n;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|k| s[i * n + k] * (1.0 - w.get(i, k)) / tau).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + math::ln(row.iter().map(|v| math::exp(v - m)).sum());
        out.extend((0..n).map(|j| lse - s[i * n + j] * w.get(i, j) / tau));
    }
    out
}

/// One tapped encoder output with the geometry of its units.
#[derive(Debug, Clone, Copy)]
pub struct TapInput {
    pub block: usize,
    /// `[B, C, h, w]` post-activation features.
    pub features: Var,
    pub geometry: LayerGeometry,
}

/// Per-(image, layer) intermediate kept for audits.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    pub image: usize,
    pub block: usize,
    pub coords: Vec<(usize, usize)>,
    pub similarity: Var,
    pub affinity: AffinityMatrix,
    pub loss: Var,
}

#[derive(Debug, Clone)]
pub struct PdcrOutput {
    pub loss: Var,
    /// Samples dropped because their feature vector was zero.
    pub dropped: usize,
    pub layers: Vec<LayerRecord>,
}

/// Mean over tapped layers, then over the batch, of the per-image layer losses.
/// Pairs never cross images.
pub fn pdcr_total_loss(
    g: &mut Graph,
    taps: &[TapInput],
    masks: &[ClassMap],
    num_classes: usize,
    cfg: &PdcrConfig,
) -> Result<PdcrOutput> {
    cfg.validate()?;
    if taps.is_empty() || masks.is_empty() {
        let loss = g.constant(Tensor::scalar(0.0));
        return Ok(PdcrOutput { loss, dropped: 0, layers: Vec::new() });
    }
    let mut dropped = 0;
    let mut layers = Vec::new();
    let mut batch_sum: Option<Var> = None;
    for (b, mask) in masks.iter().enumerate() {
        let mut image_sum: Option<Var> = None;
        for tap in taps {
            let shape = g.shape(tap.features).to_vec();
            if shape.len() != 4 || shape[0] != masks.len() || (shape[2], shape[3]) != tap.geometry.extent {
                return Err(Error::Shape {
                    op: "pdcr_total_loss",
                    detail: format!("tap {} features {:?} vs extent {:?}", tap.block, shape, tap.geometry.extent),
                });
            }
            let grid = grid_sample_coords(tap.geometry.extent, cfg.samples);
            let (c, h, w) = (shape[1], shape[2], shape[3]);
            let data = g.data(tap.features);
            let mut keep = grid.clone();
            keep.coords.retain(|&(y, x)| {
                let sq: f64 = (0..c).map(|ci| data[((b * c + ci) * h + y) * w + x]).map(|v| v * v).sum();
                math::sqrt(sq) > MIN_NORM
            });
            dropped += grid.coords.len() - keep.coords.len();
            let affinity = affinity_matrix(mask, &keep, &tap.geometry, num_classes, cfg.variant, cfg.denominator)?;
            let (similarity, loss) = if keep.coords.is_empty() {
                let s = g.constant(Tensor::zeros(&[0, 0]));
                (s, g.constant(Tensor::scalar(0.0)))
            } else {
                let v = g.gather_spatial(tap.features, b, &keep.coords)?;
                let s = cosine_similarity_matrix(g, v)?;
                let l = pdcr_layer_loss(g, s, &affinity, cfg.tau, cfg.include_diagonal)?;
                (s, l)
            };
            image_sum = Some(match image_sum {
                Some(acc) => g.add(acc, loss)?,
                None => loss,
            });
            layers.push(LayerRecord { image: b, block: tap.block, coords: keep.coords, similarity, affinity, loss });
        }
        let image_mean = g.scale(image_sum.expect("at least one tap"), 1.0 / taps.len() as f64);
        batch_sum = Some(match batch_sum {
            Some(acc) => g.add(acc, image_mean)?,
            None => image_mean,
        });
    }
    let loss = g.scale(batch_sum.expect("at least one image"), 1.0 / masks.len() as f64);
    Ok(PdcrOutput { loss, dropped, layers })
}
