//! Optimization loop and evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Mode, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::metrics::{Confusion, MetricsReport};
use crate::network::{predict_mask, SegNet, SegNetConfig};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::pdcr::PdcrConfig;
use crate::sample::{ClassMap, Sample};
use crate::synth::SyntheticConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub lr: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub pdcr: PdcrConfig,
    pub network: SegNetConfig,
    pub data: SyntheticConfig,
    /// Seeds the network and the fraction shuffle.
    pub seed: u64,
    /// Share of the training set used, in `(0, 1]`.
    pub fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            adam: AdamConfig::default(),
            epochs: 20,
            batch_size: 8,
            pdcr: PdcrConfig::default(),
            network: SegNetConfig::default(),
            data: SyntheticConfig::default(),
            seed: 42,
            fraction: 1.0,
        }
    }
}

impl RunConfig {
    /// PDCR off and no gates.
    pub fn baseline() -> Self {
        let mut cfg = Self::default();
        cfg.pdcr.lambda = 0.0;
        cfg.network.uafs_layers.clear();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return Err(Error::Config("adam.beta1/beta2 must be in [0,1), eps > 0, weight_decay >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction must be in (0, 1], got {}", self.fraction)));
        }
        self.pdcr.validate()?;
        self.network.validate()?;
        self.data.validate()?;
        if self.pdcr.active() {
            self.network.check_taps(&self.pdcr.tap_blocks)?;
        }
        if self.data.num_classes != self.network.num_classes {
            return Err(Error::Config(format!(
                "data.num_classes {} differs from network.num_classes {}",
                self.data.num_classes, self.network.num_classes
            )));
        }
        self.network.check_input((self.data.size, self.data.size))
    }

    /// `baseline`, `pdcr`, `uafs` or `pdcr+uafs`.
    pub fn label(&self) -> String {
        let uafs = !self.network.uafs_layers.is_empty();
        String::from(match (self.pdcr.active(), uafs) {
            (false, false) => "baseline",
            (true, false) => "pdcr",
            (false, true) => "uafs",
            (true, true) => "pdcr+uafs",
        })
    }

    fn taps(&self) -> &[usize] {
        if self.pdcr.active() { &self.pdcr.tap_blocks } else { &[] }
    }
}

/// Stack grayscale samples into `[B, 1, H, W]`.
pub fn batch_tensor(samples: &[Sample]) -> Result<Tensor> {
    let (h, w) = samples.first().map(Sample::size).ok_or_else(|| Error::Config("empty batch".into()))?;
    if let Some(s) = samples.iter().find(|s| s.size() != (h, w)) {
        return Err(Error::Config(format!("batch mixes {h}x{w} and {:?} samples", s.size())));
    }
    let data = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    Tensor::new(&[samples.len(), 1, h, w], data)
}

fn masks(samples: &[Sample]) -> Vec<ClassMap> {
    samples.iter().map(|s| s.mask.clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub ce: f64,
    pub pdcr: f64,
    /// Sample vectors dropped for zero norm.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Schedule value after the epoch's last step.
    pub lr: f64,
    pub train: LossValues,
    pub test: MetricsReport,
}

/// Batch size of every evaluation pass, so a checkpoint scores identically
/// during training and when evaluated later.
pub const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_sample: Vec<MetricsReport>,
}

pub fn evaluate(net: &SegNet, samples: &[Sample], batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty set".into()));
    }
    let m = net.config.num_classes;
    let mut total = Confusion::new(m);
    let mut per_sample = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let out = net.forward_with_taps(&mut g, &batch_tensor(chunk)?, Mode::Eval, &[], false)?;
        g.check_finite(out.logits)?;
        for (pred, s) in predict_mask(g.value(out.logits))?.iter().zip(chunk) {
            let mut c = Confusion::new(m);
            c.add(pred, &s.mask)?;
            per_sample.push(c.report(1));
            total.merge(&c);
        }
    }
    Ok(Evaluation { report: total.report(samples.len()), per_sample })
}

/// Mean training objective terms of `net` over `samples` in eval mode.
pub fn loss_values(net: &SegNet, samples: &[Sample], cfg: &RunConfig) -> Result<LossValues> {
    let mut acc = LossValues::default();
    for chunk in samples.chunks(cfg.batch_size) {
        let mut g = Graph::new();
        let out = net.forward_with_taps(&mut g, &batch_tensor(chunk)?, Mode::Eval, cfg.taps(), false)?;
        let terms = total_loss(&mut g, &out, &masks(chunk), net.config.num_classes, &cfg.pdcr)?;
        accumulate(&mut acc, &g, &terms, chunk.len());
    }
    finish(&mut acc, samples.len());
    Ok(acc)
}

fn accumulate(acc: &mut LossValues, g: &Graph, terms: &crate::loss::LossTerms, n: usize) {
    acc.ce += g.data(terms.ce)[0] * n as f64;
    if let Some(p) = &terms.pdcr {
        acc.pdcr += g.data(p.loss)[0] * n as f64;
        acc.dropped += p.dropped;
    }
}

fn finish(acc: &mut LossValues, n: usize) {
    if n > 0 {
        acc.ce /= n as f64;
        acc.pdcr /= n as f64;
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub net: SegNet,
    adam: Adam,
    step: u64,
    total_steps: u64,
}

impl Trainer {
    /// Fresh network for `config`, scheduled for `train_len` samples per epoch.
    pub fn new(config: RunConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        let mut net_cfg = config.network.clone();
        net_cfg.seed = config.seed;
        let net = SegNet::new(net_cfg)?;
        let steps_per_epoch = train_len.div_ceil(config.batch_size) as u64;
        Ok(Self {
            adam: Adam::new(config.adam),
            total_steps: steps_per_epoch * config.epochs as u64,
            step: 0,
            net,
            config,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.config.lr)
    }

    /// One optimizer step on `batch`; returns the batch's loss terms.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<LossValues> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let out = self.net.forward_with_taps(&mut g, &batch_tensor(batch)?, Mode::Train, cfg.taps(), true)?;
        let terms = total_loss(&mut g, &out, &masks(batch), self.net.config.num_classes, &cfg.pdcr)?;
        let mut values = LossValues::default();
        accumulate(&mut values, &g, &terms, 1);
        if !values.ce.is_finite() || !values.pdcr.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {}: cross-entropy {} pdcr {}",
                self.step, values.ce, values.pdcr
            )));
        }
        g.backward(terms.total)?;
        let grads: Vec<Option<Vec<f64>>> = out.bound.iter().map(|v| g.grad(*v).map(<[f64]>::to_vec)).collect();
        if grads.iter().flatten().any(|gr| gr.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("step {}: non-finite gradient", self.step)));
        }
        let lr = self.current_lr();
        self.adam.step(&mut self.net.params, &grads, lr);
        self.net.apply_bn_updates(&out.bn_updates, BN_MOMENTUM);
        self.step += 1;
        Ok(values)
    }

    /// One pass over `train` in order; returns sample-weighted mean losses.
    pub fn train_epoch(&mut self, train: &[Sample]) -> Result<LossValues> {
        let mut acc = LossValues::default();
        for chunk in train.chunks(self.config.batch_size) {
            let v = self.train_step(chunk)?;
            acc.ce += v.ce * chunk.len() as f64;
            acc.pdcr += v.pdcr * chunk.len() as f64;
            acc.dropped += v.dropped;
        }
        finish(&mut acc, train.len());
        Ok(acc)
    }

    /// Row 0 evaluates the initial network; rows `1..=epochs` follow each
    /// epoch. `on_epoch` sees every row together with the current network.
    pub fn fit<F>(&mut self, train: &[Sample], test: &[Sample], mut on_epoch: F) -> Result<Vec<EpochRecord>>
    where
        F: FnMut(&EpochRecord, &SegNet) -> Result<()>,
    {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut records = Vec::with_capacity(self.config.epochs + 1);
        for epoch in 0..=self.config.epochs {
            let losses = if epoch == 0 {
                loss_values(&self.net, train, &self.config)?
            } else {
                self.train_epoch(train)?
            };
            let test_eval = evaluate(&self.net, test, EVAL_BATCH)?;
            let record = EpochRecord { epoch, lr: self.current_lr(), train: losses, test: test_eval.report };
            on_epoch(&record, &self.net)?;
            records.push(record);
        }
        Ok(records)
    }
}
