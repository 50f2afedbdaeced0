//! Training objective: pixel cross-entropy plus `λ ·` PDCR.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::network::ForwardOutput;
use crate::pdcr::{pdcr_total_loss, PdcrConfig, PdcrOutput};
use crate::sample::ClassMap;

/// Mean over all pixels of the batch of `−ln softmax(logits)[truth]`.
pub fn cross_entropy_loss(g: &mut Graph, logits: Var, masks: &[ClassMap]) -> Result<Var> {
    let targets: Vec<u8> = masks.iter().flat_map(|m| m.labels.iter().copied()).collect();
    g.cross_entropy(logits, &targets)
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    /// Absent when the contrastive term is switched off.
    pub pdcr: Option<PdcrOutput>,
}

/// `CE + λ·PDCR`. With `λ = 0` the total is the cross-entropy node itself.
pub fn total_loss(
    g: &mut Graph,
    out: &ForwardOutput,
    masks: &[ClassMap],
    num_classes: usize,
    cfg: &PdcrConfig,
) -> Result<LossTerms> {
    let ce = cross_entropy_loss(g, out.logits, masks)?;
    if !cfg.active() {
        return Ok(LossTerms { total: ce, ce, pdcr: None });
    }
    let pdcr = pdcr_total_loss(g, &out.taps, masks, num_classes, cfg)?;
    let weighted = g.scale(pdcr.loss, cfg.lambda);
    let total = g.add(ce, weighted)?;
    Ok(LossTerms { total, ce, pdcr: Some(pdcr) })
}
