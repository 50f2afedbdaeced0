//! Small encoder–decoder segmentation network with PDCR taps and UAFS gates.
//!
//! Encoder block `b`: conv 3×3/s1 + ReLU, conv 3×3/s2 + ReLU, optional gate.
//! Decoder block `j`: nearest 2× upsample, concat with the matching encoder
//! output (the input image for the last block), conv 3×3/s1 + ReLU, optional
//! gate. A 1×1 conv maps to class logits at full resolution.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;

use crate::autodiff::{BatchStats, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::geometry::{ConvLayer, ConvStackSpec, LayerGeometry};
use crate::math;
use crate::pdcr::TapInput;
use crate::rng::{fnv1a, rng_for};
use crate::sample::ClassMap;
use crate::tensor::Tensor;
use crate::uafs::{self, RunningStats, UafsHead, UncertaintyMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockId {
    /// 1-based encoder block.
    Enc(usize),
    /// 1-based decoder block, counted from the bottleneck.
    Dec(usize),
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Enc(b) => write!(f, "enc{b}"),
            Self::Dec(b) => write!(f, "dec{b}"),
        }
    }
}

impl FromStr for BlockId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |rest: &str| rest.parse::<usize>().ok().filter(|b| *b >= 1);
        let id = if let Some(rest) = s.strip_prefix("enc") {
            parse(rest).map(Self::Enc)
        } else if let Some(rest) = s.strip_prefix("dec") {
            parse(rest).map(Self::Dec)
        } else {
            None
        };
        id.ok_or_else(|| Error::Config(format!("bad block name {s:?}; expected encN or decN")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_channels: Vec<usize>,
    /// Blocks followed by a UAFS gate.
    pub uafs_layers: Vec<BlockId>,
    /// Start every gate's 1×1 conv at zero, which makes the gate an exact
    /// no-op at initialization.
    pub uafs_zero_init: bool,
    /// Treat the gate factor as a constant in backward.
    pub detach_uncertainty: bool,
    pub seed: u64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        let encoder_channels = vec![16, 32, 64, 64, 64];
        Self {
            in_channels: 1,
            num_classes: 2,
            uafs_layers: Self::all_blocks(encoder_channels.len()),
            encoder_channels,
            uafs_zero_init: false,
            detach_uncertainty: false,
            seed: 42,
        }
    }
}

impl SegNetConfig {
    pub fn all_blocks(depth: usize) -> Vec<BlockId> {
        (1..=depth).map(BlockId::Enc).chain((1..=depth).map(BlockId::Dec)).collect()
    }

    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn has_block(&self, block: BlockId) -> bool {
        let d = self.depth();
        matches!(block, BlockId::Enc(b) | BlockId::Dec(b) if (1..=d).contains(&b))
    }

    pub fn gated(&self, block: BlockId) -> bool {
        self.uafs_layers.contains(&block)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("network.in_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("network.num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config("network.encoder_channels must be non-empty and positive".into()));
        }
        if let Some(b) = self.uafs_layers.iter().find(|b| !self.has_block(**b)) {
            return Err(Error::Config(format!("UAFS block {b} does not exist in a depth-{} network", self.depth())));
        }
        Ok(())
    }

    /// Input sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth()
    }

    pub fn check_input(&self, size: (usize, usize)) -> Result<()> {
        let m = self.size_multiple();
        let (h, w) = size;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            let pad = |v: usize| (v.div_ceil(m).max(1) * m) - v;
            return Err(Error::Config(format!(
                "input {h}x{w} must be divisible by {m}; pad by {}x{} pixels",
                pad(h),
                pad(w)
            )));
        }
        Ok(())
    }

    pub fn check_taps(&self, taps: &[usize]) -> Result<()> {
        match taps.iter().find(|b| !self.has_block(BlockId::Enc(**b))) {
            Some(b) => Err(Error::Config(format!("tap block {b} is not an encoder block (1..={})", self.depth()))),
            None => Ok(()),
        }
    }

    fn dec_channels(&self, j: usize) -> (usize, usize, usize) {
        let d = self.depth();
        let c = &self.encoder_channels;
        let below = if j == 1 { c[d - 1] } else { self.dec_channels(j - 1).2 };
        let (skip, out) = if j < d { (c[d - j - 1], c[d - j - 1]) } else { (self.in_channels, c[0]) };
        (below, skip, out)
    }

    /// Channel count of a block's output.
    pub fn block_channels(&self, block: BlockId) -> usize {
        match block {
            BlockId::Enc(b) => self.encoder_channels[b - 1],
            BlockId::Dec(j) => self.dec_channels(j).2,
        }
    }

    /// `(name, shape, trainable)` of every tensor, in canonical order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            let block = BlockId::Enc(i + 1);
            push_conv(&mut out, format!("{block}.conv_a"), cin, c, 3);
            push_conv(&mut out, format!("{block}.conv_b"), c, c, 3);
            self.push_gate(&mut out, block, c);
            cin = c;
        }
        for j in 1..=self.depth() {
            let block = BlockId::Dec(j);
            let (below, skip, c) = self.dec_channels(j);
            push_conv(&mut out, format!("{block}.conv"), below + skip, c, 3);
            self.push_gate(&mut out, block, c);
        }
        push_conv(&mut out, "head".to_string(), self.dec_channels(self.depth()).2, self.num_classes, 1);
        out
    }

    fn push_gate(&self, out: &mut Vec<(String, Vec<usize>, bool)>, block: BlockId, c: usize) {
        if !self.gated(block) {
            return;
        }
        push_conv(out, format!("{block}.uafs.conv1"), c, c, 3);
        for (n, trainable) in [("gamma", true), ("beta", true), ("running_mean", false), ("running_var", false)] {
            out.push((format!("{block}.uafs.bn.{n}"), vec![c], trainable));
        }
        push_conv(out, format!("{block}.uafs.conv2"), c, self.num_classes, 1);
    }

    /// Convolution stack from the input to the output of encoder block
    /// `block`, including the 3×3 conv of each gate on the way.
    pub fn encoder_stack(&self, block: usize, image_size: (usize, usize)) -> Result<ConvStackSpec> {
        self.check_taps(&[block])?;
        let mut layers = Vec::new();
        for b in 1..=block {
            layers.push(ConvLayer::new(3, 1, 1));
            layers.push(ConvLayer::new(3, 2, 1));
            if self.gated(BlockId::Enc(b)) {
                layers.push(ConvLayer::new(3, 1, 1));
            }
        }
        ConvStackSpec::new(layers, image_size)
    }

    pub fn tap_geometry(&self, block: usize, image_size: (usize, usize)) -> Result<LayerGeometry> {
        let spec = self.encoder_stack(block, image_size)?;
        spec.layer_geometry(spec.depth())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// `false` for BN running statistics.
    pub trainable: bool,
}

/// Named tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }
}

/// Everything a forward pass produces besides the logits.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, M, H, W]`
    pub logits: Var,
    /// Requested encoder taps, post-gate, in request order.
    pub taps: Vec<TapInput>,
    pub uncertainty: Vec<(BlockId, UncertaintyMap)>,
    /// Train-mode batch statistics for each gate, to be folded into the
    /// running estimates by [`SegNet::apply_bn_updates`].
    pub bn_updates: Vec<(BlockId, BatchStats)>,
    /// Graph handle of every store entry, by store index.
    pub bound: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    pub config: SegNetConfig,
    pub params: ParamStore,
}

impl SegNet {
    /// Xavier-uniform weights, zero biases, unit BN scale. Each tensor draws
    /// from its own stream keyed by `(seed, name)`, so enabling gates does not
    /// perturb the weights of the main path.
    pub fn new(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        let entries = config
            .parameter_layout()
            .into_iter()
            .map(|(name, shape, trainable)| {
                let tensor = init_tensor(&config, &name, &shape);
                ParamEntry { name, tensor, trainable }
            })
            .collect();
        Ok(Self { config, params: ParamStore { entries } })
    }

    /// Rebuild a network from named tensors, inferring its configuration from
    /// names and shapes.
    pub fn from_named_tensors(named: Vec<(String, Tensor)>) -> Result<Self> {
        let find = |n: &str| named.iter().find(|(k, _)| k == n).map(|(_, t)| t);
        let mut encoder_channels = Vec::new();
        let mut in_channels = 0;
        while let Some(w) = find(&format!("enc{}.conv_a.weight", encoder_channels.len() + 1)) {
            if w.rank() != 4 {
                return Err(Error::Config(format!("enc{}.conv_a.weight has rank {}", encoder_channels.len() + 1, w.rank())));
            }
            if encoder_channels.is_empty() {
                in_channels = w.shape[1];
            }
            encoder_channels.push(w.shape[0]);
        }
        let head = find("head.weight").ok_or_else(|| Error::Config("missing tensor head.weight".into()))?;
        let depth = encoder_channels.len();
        let uafs_layers = SegNetConfig::all_blocks(depth)
            .into_iter()
            .filter(|b| find(&format!("{b}.uafs.conv1.weight")).is_some())
            .collect();
        let config = SegNetConfig {
            in_channels,
            num_classes: head.shape.first().copied().unwrap_or(0),
            encoder_channels,
            uafs_layers,
            ..SegNetConfig::default()
        };
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != named.len() {
            return Err(Error::Config(format!("expected {} tensors, found {}", layout.len(), named.len())));
        }
        let mut entries = Vec::with_capacity(layout.len());
        for (name, shape, trainable) in layout {
            let tensor = find(&name).ok_or_else(|| Error::Config(format!("missing tensor {name}")))?;
            if tensor.shape != shape {
                return Err(Error::Config(format!("tensor {name} has shape {:?}, expected {shape:?}", tensor.shape)));
            }
            entries.push(ParamEntry { name, tensor: tensor.clone(), trainable });
        }
        Ok(Self { config, params: ParamStore { entries } })
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.entries.iter().map(|e| (e.name.clone(), e.tensor.clone())).collect()
    }

    fn bound(&self, bound: &[Var], name: &str) -> Var {
        bound[self.params.index_of(name).expect("parameter registered by layout")]
    }

    fn conv(&self, g: &mut Graph, bound: &[Var], x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.bound(bound, &format!("{name}.weight"));
        let b = self.bound(bound, &format!("{name}.bias"));
        g.conv2d(x, w, b, stride, pad)
    }

    fn maybe_gate(
        &self,
        g: &mut Graph,
        bound: &[Var],
        block: BlockId,
        x: Var,
        mode: Mode,
        out: &mut ForwardOutput,
    ) -> Result<Var> {
        if !self.config.gated(block) {
            return Ok(x);
        }
        let p = |n: &str| self.bound(bound, &format!("{block}.uafs.{n}"));
        let head = UafsHead {
            conv1_weight: p("conv1.weight"),
            conv1_bias: p("conv1.bias"),
            bn_gamma: p("bn.gamma"),
            bn_beta: p("bn.beta"),
            conv2_weight: p("conv2.weight"),
            conv2_bias: p("conv2.bias"),
        };
        let stat = |n: &str| &self.params.get(&format!("{block}.uafs.bn.{n}")).expect("registered").data;
        let stats = RunningStats { mean: stat("running_mean"), var: stat("running_var") };
        let gated = uafs::gate(g, x, &head, stats, mode, self.config.detach_uncertainty)?;
        out.uncertainty.push((block, gated.uncertainty));
        if let Some(s) = gated.stats {
            out.bn_updates.push((block, s));
        }
        Ok(gated.features)
    }

    /// Forward pass. Trainable tensors are bound as gradient leaves when
    /// `track_params` is set, otherwise as constants.
    pub fn forward_with_taps(
        &self,
        g: &mut Graph,
        input: &Tensor,
        mode: Mode,
        taps: &[usize],
        track_params: bool,
    ) -> Result<ForwardOutput> {
        let [_, c, h, w] = input.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Config(format!("input has {c} channels, network expects {}", self.config.in_channels)));
        }
        self.config.check_input((h, w))?;
        self.config.check_taps(taps)?;
        let bound: Vec<Var> = self
            .params
            .entries
            .iter()
            .map(|e| {
                let t = e.tensor.clone();
                if e.trainable && track_params { g.leaf(t.with_grad()) } else { g.constant(t) }
            })
            .collect();
        let x = g.constant(input.clone());
        let mut out = ForwardOutput { logits: x, taps: Vec::new(), uncertainty: Vec::new(), bn_updates: Vec::new(), bound: Vec::new() };

        let mut skips = vec![x];
        let mut cur = x;
        for b in 1..=self.config.depth() {
            let block = BlockId::Enc(b);
            cur = self.conv(g, &bound, cur, &format!("{block}.conv_a"), 1, 1)?;
            cur = g.relu(cur);
            cur = self.conv(g, &bound, cur, &format!("{block}.conv_b"), 2, 1)?;
            cur = g.relu(cur);
            cur = self.maybe_gate(g, &bound, block, cur, mode, &mut out)?;
            skips.push(cur);
        }
        for &t in taps {
            let geometry = self.config.tap_geometry(t, (h, w))?;
            out.taps.push(TapInput { block: t, features: skips[t], geometry });
        }
        let d = self.config.depth();
        for j in 1..=d {
            let block = BlockId::Dec(j);
            let up = g.upsample2x(cur)?;
            let cat = g.concat_channels(&[up, skips[d - j]])?;
            cur = self.conv(g, &bound, cat, &format!("{block}.conv"), 1, 1)?;
            cur = g.relu(cur);
            cur = self.maybe_gate(g, &bound, block, cur, mode, &mut out)?;
        }
        out.logits = self.conv(g, &bound, cur, "head", 1, 0)?;
        out.bound = bound;
        Ok(out)
    }

    /// Fold train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[(BlockId, BatchStats)], momentum: f64) {
        for (block, stats) in updates {
            let mean_i = self.params.index_of(&format!("{block}.uafs.bn.running_mean")).expect("registered");
            let var_i = self.params.index_of(&format!("{block}.uafs.bn.running_var")).expect("registered");
            let mut mean = core::mem::take(&mut self.params.entries[mean_i].tensor.data);
            let mut var = core::mem::take(&mut self.params.entries[var_i].tensor.data);
            stats.update_running(&mut mean, &mut var, momentum);
            self.params.entries[mean_i].tensor.data = mean;
            self.params.entries[var_i].tensor.data = var;
        }
    }
}

fn push_conv(out: &mut Vec<(String, Vec<usize>, bool)>, name: String, cin: usize, cout: usize, k: usize) {
    out.push((format!("{name}.weight"), vec![cout, cin, k, k], true));
    out.push((format!("{name}.bias"), vec![cout], true));
}

fn init_tensor(config: &SegNetConfig, name: &str, shape: &[usize]) -> Tensor {
    if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".running_mean") {
        return Tensor::zeros(shape);
    }
    if name.ends_with(".gamma") || name.ends_with(".running_var") {
        return Tensor::full(shape, 1.0);
    }
    if config.uafs_zero_init && name.ends_with(".uafs.conv2.weight") {
        return Tensor::zeros(shape);
    }
    let field: usize = shape[2..].iter().product();
    let bound = math::sqrt(6.0 / ((shape[0] + shape[1]) * field) as f64);
    let mut rng = rng_for(config.seed, fnv1a(name));
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
}

/// Per-pixel argmax over channels; ties go to the lowest class.
pub fn predict_mask(logits: &Tensor) -> Result<Vec<ClassMap>> {
    let [b, m, h, w] = logits.dims4()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let labels = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..m {
                    if logits.data[(bi * m + c) * plane + p] > logits.data[(bi * m + best) * plane + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        out.push(ClassMap::new(h, w, labels)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SegNetConfig {
        SegNetConfig { encoder_channels: vec![4, 6], uafs_layers: SegNetConfig::all_blocks(2), ..SegNetConfig::default() }
    }

    #[test]
    fn block_names_round_trip() {
        for b in SegNetConfig::all_blocks(5) {
            assert_eq!(b.to_string().parse::<BlockId>().unwrap(), b);
        }
        assert!("enc0".parse::<BlockId>().is_err());
        assert!("mid2".parse::<BlockId>().is_err());
    }

    #[test]
    fn logits_shape_and_taps() {
        let net = SegNet::new(small()).unwrap();
        let mut g = Graph::new();
        let x = Tensor::full(&[2, 1, 8, 8], 0.5);
        let out = net.forward_with_taps(&mut g, &x, Mode::Train, &[1, 2], true).unwrap();
        assert_eq!(g.shape(out.logits), &[2, 2, 8, 8]);
        assert_eq!(g.shape(out.taps[0].features), &[2, 4, 4, 4]);
        assert_eq!(g.shape(out.taps[1].features), &[2, 6, 2, 2]);
        assert_eq!(out.uncertainty.len(), 4);
        assert_eq!(out.bn_updates.len(), 4);
    }

    #[test]
    fn indivisible_input_names_the_padding() {
        let net = SegNet::new(small()).unwrap();
        let mut g = Graph::new();
        let err = net.forward_with_taps(&mut g, &Tensor::zeros(&[1, 1, 10, 8]), Mode::Eval, &[], false).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("pad by 2x0")), "{err}");
    }

    #[test]
    fn unknown_tap_is_a_config_error() {
        assert!(matches!(small().check_taps(&[3]), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_seeded_and_biases_are_zero() {
        let a = SegNet::new(small()).unwrap();
        assert_eq!(a, SegNet::new(small()).unwrap());
        let c = SegNet::new(SegNetConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.params, c.params);
        for e in a.params.entries().iter().filter(|e| e.name.ends_with(".bias")) {
            assert!(e.tensor.data.iter().all(|v| *v == 0.0), "{}", e.name);
        }
    }

    #[test]
    fn gating_leaves_main_path_weights_alone() {
        let gated = SegNet::new(small()).unwrap();
        let plain = SegNet::new(SegNetConfig { uafs_layers: vec![], ..small() }).unwrap();
        for e in plain.params.entries() {
            assert_eq!(gated.params.get(&e.name), Some(&e.tensor), "{}", e.name);
        }
    }

    #[test]
    fn named_round_trip() {
        let cfg = SegNetConfig { uafs_layers: vec![BlockId::Enc(2), BlockId::Dec(1)], num_classes: 3, ..small() };
        let net = SegNet::new(cfg.clone()).unwrap();
        let back = SegNet::from_named_tensors(net.named_tensors()).unwrap();
        assert_eq!(back.config.uafs_layers, cfg.uafs_layers);
        assert_eq!(back.params, net.params);
        let mut broken = net.named_tensors();
        broken.pop();
        assert!(SegNet::from_named_tensors(broken).is_err());
    }

    #[test]
    fn default_parameter_count_is_pinned() {
        let net = SegNet::new(SegNetConfig::default()).unwrap();
        assert_eq!(net.params.trainable_count(), DEFAULT_PARAMETER_COUNT);
        let plain = SegNet::new(SegNetConfig { uafs_layers: vec![], ..SegNetConfig::default() }).unwrap();
        assert_eq!(plain.params.trainable_count(), BASELINE_PARAMETER_COUNT);
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::new(&[1, 3, 1, 3], vec![0.0, 1.0, 5.0, 0.0, 2.0, 5.0, -1.0, 2.0, 1.0]).unwrap();
        assert_eq!(predict_mask(&t).unwrap()[0].labels, vec![0, 1, 0]);
    }

    #[test]
    fn tap_geometry_counts_gate_convs() {
        let cfg = SegNetConfig::default();
        let g = cfg.tap_geometry(2, (64, 64)).unwrap();
        assert_eq!((g.r, g.jump, g.extent), (25, 4, (16, 16)));
        let plain = SegNetConfig { uafs_layers: vec![], ..cfg };
        assert_eq!(plain.tap_geometry(2, (64, 64)).unwrap().r, 13);
    }
}

/// Trainable scalars in [`SegNetConfig::default`].
pub const DEFAULT_PARAMETER_COUNT: usize = 616_038;
/// Trainable scalars in the default network without gates.
pub const BASELINE_PARAMETER_COUNT: usize = 404_194;
