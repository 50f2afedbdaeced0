//! End-to-end workflows behind the CLI subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dragsaw_core::affinity::{affinity_matrix_with_ratios, grid_sample_coords, AffinityVariant, Denominator};
use dragsaw_core::metrics::MetricsReport;
use dragsaw_core::network::{BlockId, SegNet, SegNetConfig};
use dragsaw_core::sample::{ClassMap, Sample};
use dragsaw_core::synth::{generate_sample, SyntheticConfig};
use dragsaw_core::train::{evaluate, EpochRecord, Evaluation, RunConfig, Trainer, EVAL_BATCH};
use dragsaw_core::{Error as CoreError, Graph, Mode, Tensor};

use crate::checkpoint;
use crate::config;
use crate::error::{self, AppError, Result};
use crate::manifest::{fraction_indices, sha256_hex, Manifest, ManifestEntry, Split};
use crate::pgm::Pgm;

pub const METRICS_HEADER: &str = "epoch,lr,train_ce,train_pdcr,test_ja,test_di,test_ac";
pub const EVAL_HEADER: &str = "sample,ja,di,ac";
pub const SWEEP_HEADER: &str = "fraction,n_train,ja,di,ac,wall_seconds";

/// Write the train and test splits of `cfg` under `out`.
pub fn synth(cfg: &SyntheticConfig, out: &Path) -> Result<(Manifest, Manifest)> {
    cfg.validate()?;
    let write_split = |split: Split, indices: std::ops::Range<usize>| -> Result<Manifest> {
        let mut entries = Vec::with_capacity(indices.len());
        for (k, index) in indices.enumerate() {
            let sample = generate_sample(cfg, index as u64)?;
            let n = sample.mask.width;
            let image = Pgm::from_unit(n, sample.mask.height, &sample.image).encode();
            let mask = Pgm::from_mask(&sample.mask).encode();
            let image_rel = PathBuf::from(format!("images/{}_{k:05}.pgm", split.name()));
            let mask_rel = PathBuf::from(format!("masks/{}_{k:05}.pgm", split.name()));
            error::write(&out.join(&image_rel), &image)?;
            error::write(&out.join(&mask_rel), &mask)?;
            entries.push(ManifestEntry {
                image: image_rel,
                mask: mask_rel,
                image_sha256: sha256_hex(&image),
                mask_sha256: sha256_hex(&mask),
            });
        }
        let manifest = Manifest { split, root: out.to_path_buf(), entries };
        manifest.write()?;
        Ok(manifest)
    };
    let train = write_split(Split::Train, 0..cfg.count)?;
    let test = write_split(Split::Test, cfg.count..cfg.count + cfg.test_count)?;
    Ok((train, test))
}

pub struct Dataset {
    pub train_manifest: Manifest,
    pub train: Vec<Sample>,
    pub test_manifest: Manifest,
    pub test: Vec<Sample>,
}

pub fn load_dataset(dir: &Path, num_classes: usize) -> Result<Dataset> {
    let train_manifest = Manifest::read(dir, Split::Train)?;
    let test_manifest = Manifest::read(dir, Split::Test)?;
    let train = train_manifest.load(num_classes)?;
    let test = test_manifest.load(num_classes)?;
    if test.is_empty() {
        return Err(AppError::format(Split::Test.manifest_path(dir), "test split is empty"));
    }
    Ok(Dataset { train_manifest, train, test_manifest, test })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub label: String,
    pub n_train: usize,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub final_net: SegNet,
    pub wall_seconds: f64,
}

/// The `metrics.csv` contents for `records`, header included.
pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut csv = format!("{METRICS_HEADER}\n");
    records.iter().for_each(|r| csv.push_str(&metrics_row(r)));
    csv
}

pub fn metrics_row(r: &EpochRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        r.epoch, r.lr, r.train.ce, r.train.pdcr, r.test.ja, r.test.di, r.test.ac
    )
}

/// Train on the `cfg.fraction` subset of `data.train`, evaluating on
/// `data.test` after every epoch. With `out`, writes `config.txt`,
/// `metadata.txt`, `metrics.csv`, `best.ckpt` and `final.ckpt` there (or
/// `abort.ckpt` when a loss turns non-finite).
pub fn train(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let selected = fraction_indices(data.train.len(), cfg.fraction, cfg.seed)?;
    let train: Vec<Sample> = selected.iter().map(|i| data.train[*i].clone()).collect();
    let mut trainer = Trainer::new(cfg.clone(), train.len())?;
    let label = cfg.label();
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| AppError::io(out, e))?;
        error::write(&out.join("config.txt"), config::to_text(cfg).as_bytes())?;
    }
    let mut csv = format!("{METRICS_HEADER}\n");
    let mut best: Option<(usize, f64)> = None;
    let result = trainer.fit(&train, &data.test, |record, net| {
        csv.push_str(&metrics_row(record));
        let improved = best.is_none_or(|(_, di)| record.test.di > di);
        if improved {
            best = Some((record.epoch, record.test.di));
        }
        if let Some(out) = out {
            error::write(&out.join("metrics.csv"), csv.as_bytes()).map_err(|e| CoreError::Contract(e.to_string()))?;
            if improved {
                checkpoint::write(&out.join("best.ckpt"), &net.named_tensors())
                    .map_err(|e| CoreError::Contract(e.to_string()))?;
            }
        }
        Ok(())
    });
    let records = match result {
        Ok(r) => r,
        Err(e) => {
            if let (Some(out), CoreError::NonFinite(_)) = (out, &e) {
                checkpoint::write(&out.join("abort.ckpt"), &trainer.net.named_tensors())?;
            }
            return Err(e.into());
        }
    };
    let best_epoch = best.map(|b| b.0).unwrap_or(0);
    if let Some(out) = out {
        checkpoint::write(&out.join("final.ckpt"), &trainer.net.named_tensors())?;
        let meta = format!(
            "configuration = {label}\naffinity_variant = {}\nn_train = {}\nn_test = {}\ntrainable_parameters = {}\nbest_epoch = {best_epoch}\n",
            cfg.pdcr.variant,
            train.len(),
            data.test.len(),
            trainer.net.params.trainable_count(),
        );
        error::write(&out.join("metadata.txt"), meta.as_bytes())?;
    }
    Ok(RunOutcome {
        label,
        n_train: train.len(),
        records,
        best_epoch,
        final_net: trainer.net,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn load_net(path: &Path) -> Result<SegNet> {
    SegNet::from_named_tensors(checkpoint::read(path)?).map_err(|e| AppError::format(path, e.to_string()))
}

/// Score `net` on `manifest`, as CSV rows `sample,ja,di,ac` plus an
/// `aggregate` row.
pub fn eval_csv(net: &SegNet, manifest: &Manifest) -> Result<(Evaluation, String)> {
    let samples = manifest.load(net.config.num_classes)?;
    let ev = evaluate(net, &samples, EVAL_BATCH)?;
    let mut csv = format!("{EVAL_HEADER}\n");
    for (e, r) in manifest.entries.iter().zip(&ev.per_sample) {
        let _ = writeln!(csv, "{},{},{},{}", e.image.display(), r.ja, r.di, r.ac);
    }
    let _ = writeln!(csv, "aggregate,{},{},{}", ev.report.ja, ev.report.di, ev.report.ac);
    Ok((ev, csv))
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub fraction: f64,
    pub selected: Vec<usize>,
    /// `None` when the fraction selected nothing.
    pub outcome: Option<RunOutcome>,
}

impl SweepRow {
    /// Final-epoch test metrics.
    pub fn final_report(&self) -> Option<&MetricsReport> {
        self.outcome.as_ref().map(|o| &o.records.last().expect("epoch 0 row").test)
    }

    pub fn csv(&self) -> String {
        match (self.final_report(), &self.outcome) {
            (Some(r), Some(o)) => format!(
                "{},{},{},{},{},{:.3}\n",
                self.fraction,
                self.selected.len(),
                r.ja,
                r.di,
                r.ac,
                o.wall_seconds
            ),
            _ => format!("{},0,,,,\n", self.fraction),
        }
    }
}

/// One full training run per fraction; metrics are the final epoch's.
pub fn sweep(cfg: &RunConfig, data: &Dataset, fractions: &[f64], mut progress: impl FnMut(&SweepRow)) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let selected = match fraction_indices(data.train.len(), fraction, cfg.seed) {
            Ok(s) => s,
            Err(AppError::Core(CoreError::Config(m))) if fraction > 0.0 && fraction <= 1.0 => {
                eprintln!("warning: skipping fraction {fraction}: {m}");
                let row = SweepRow { fraction, selected: Vec::new(), outcome: None };
                progress(&row);
                rows.push(row);
                continue;
            }
            Err(e) => return Err(e),
        };
        let run_cfg = RunConfig { fraction, ..cfg.clone() };
        let outcome = train(&run_cfg, data, None)?;
        let row = SweepRow { fraction, selected, outcome: Some(outcome) };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfRow {
    pub block: usize,
    /// Depth of the block's output in the encoder's conv stack.
    pub layer: usize,
    pub r: usize,
    pub jump: usize,
    pub start: i64,
}

pub fn rf_table(cfg: &SegNetConfig, image_size: (usize, usize)) -> Result<Vec<RfRow>> {
    cfg.validate()?;
    (1..=cfg.depth())
        .map(|block| {
            let spec = cfg.encoder_stack(block, image_size)?;
            let g = spec.layer_geometry(spec.depth())?;
            Ok(RfRow { block, layer: spec.depth(), r: g.r, jump: g.jump, start: g.start })
        })
        .collect()
}

pub fn rf_csv(rows: &[RfRow]) -> String {
    let mut s = String::from("block,layer,r,jump,start\n");
    for r in rows {
        let _ = writeln!(s, "enc{},{},{},{},{}", r.block, r.layer, r.r, r.jump, r.start);
    }
    s
}

/// Pairwise affinities of the grid samples of encoder block `block`.
pub fn affinity_csv(
    cfg: &SegNetConfig,
    mask: &ClassMap,
    block: usize,
    n: usize,
    variant: AffinityVariant,
    denominator: Denominator,
) -> Result<String> {
    let geom = cfg.tap_geometry(block, mask.size())?;
    let grid = grid_sample_coords(geom.extent, n);
    let m = cfg.num_classes;
    let (w, phi) = affinity_matrix_with_ratios(mask, &grid, &geom, m, variant, denominator)?;
    let mut s = String::from("row,col,w");
    for side in ["i", "j"] {
        for c in 0..m {
            let _ = write!(s, ",phi_{side}{c}");
        }
    }
    s.push('\n');
    for i in 0..w.n {
        for j in 0..w.n {
            let _ = write!(s, "{i},{j},{}", w.get(i, j));
            for v in phi[i].ratios.iter().chain(&phi[j].ratios) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    Ok(s)
}

fn image_input(net: &SegNet, image: &Pgm) -> Result<Tensor> {
    if net.config.in_channels != 1 {
        return Err(CoreError::Config(format!("network expects {} channels; PGM input is greyscale", net.config.in_channels)).into());
    }
    Ok(Tensor::new(&[1, 1, image.height, image.width], image.to_unit())?)
}

/// One `round(255·u)` map per gate, in network order.
pub fn uncertainty_maps(net: &SegNet, image: &Pgm) -> Result<Vec<(BlockId, Pgm)>> {
    let mut g = Graph::new();
    let out = net.forward_with_taps(&mut g, &image_input(net, image)?, Mode::Eval, &[], false)?;
    Ok(out
        .uncertainty
        .iter()
        .map(|(block, u)| {
            let s = g.shape(u.0);
            (*block, Pgm::from_unit(s[3], s[2], &u.item(&g, 0)))
        })
        .collect())
}

/// `block,i,y,x,v0,…` rows of grid-sampled hidden vectors; shorter vectors
/// leave trailing cells empty.
pub fn embeddings_csv(net: &SegNet, image: &Pgm, blocks: &[usize], n: usize) -> Result<String> {
    let mut g = Graph::new();
    let out = net.forward_with_taps(&mut g, &image_input(net, image)?, Mode::Eval, blocks, false)?;
    let width = blocks.iter().map(|b| net.config.block_channels(BlockId::Enc(*b))).max().unwrap_or(0);
    let mut s = String::from("block,i,y,x");
    for c in 0..width {
        let _ = write!(s, ",v{c}");
    }
    s.push('\n');
    for tap in &out.taps {
        let grid = grid_sample_coords(tap.geometry.extent, n);
        let v = g.gather_spatial(tap.features, 0, &grid.coords)?;
        let dim = g.shape(v)[1];
        for (i, (y, x)) in grid.coords.iter().enumerate() {
            let _ = write!(s, "enc{},{i},{y},{x}", tap.block);
            for c in 0..width {
                match g.data(v).get(i * dim + c).filter(|_| c < dim) {
                    Some(val) => {
                        let _ = write!(s, ",{val}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
    }
    Ok(s)
}
