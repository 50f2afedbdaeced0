use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dragsaw::config;
use dragsaw::error::{self, AppError, Result};
use dragsaw::manifest::{Manifest, Split};
use dragsaw::pgm::Pgm;
use dragsaw::runner::{self, Dataset};
use dragsaw_core::affinity::{AffinityVariant, Denominator};
use dragsaw_core::synth::generate_split;
use dragsaw_core::train::RunConfig;

#[derive(Parser)]
#[command(name = "dragsaw", version, about = "Patch-dragsaw contrastive regularization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = config::load(self.config.as_deref())?;
        for s in &self.set {
            config::apply_override(&mut cfg, s)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct Variants {
    /// Train without the contrastive term.
    #[arg(long)]
    no_pdcr: bool,
    /// Train without feature-selection gates.
    #[arg(long)]
    no_uafs: bool,
    #[arg(long, value_name = "continuous|constant|diagonal|bipartite")]
    affinity_variant: Option<AffinityVariant>,
}

impl Variants {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.no_pdcr {
            cfg.pdcr.lambda = 0.0;
        }
        if self.no_uafs {
            cfg.network.uafs_layers.clear();
        }
        if let Some(v) = self.affinity_variant {
            cfg.pdcr.variant = v;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train/test manifests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Training samples.
        #[arg(long)]
        count: Option<usize>,
        /// Test samples; defaults to a quarter of --count when that is given.
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and write config, per-epoch metrics and checkpoints.
    Train {
        /// Dataset directory from `synth`; generated in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
        #[command(flatten)]
        variants: Variants,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
    },
    /// Print the receptive-field table of the encoder.
    Rf {
        /// Input side length.
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Dump the affinity matrix of one mask at one encoder block.
    Affinity {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        block: usize,
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, default_value = "continuous")]
        variant: AffinityVariant,
        #[arg(long)]
        denominator: Option<Denominator>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write each gate's uncertainty map as a PGM.
    Uncertainty {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export grid-sampled hidden vectors of encoder blocks.
    Embeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        blocks: Vec<usize>,
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per training-set fraction.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.25,0.5,1.0")]
        fractions: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        variants: Variants,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(dir) => runner::load_dataset(dir, cfg.network.num_classes),
        None => {
            cfg.validate()?;
            let (train, test) = generate_split(&cfg.data)?;
            let empty = |split| Manifest { split, root: PathBuf::new(), entries: Vec::new() };
            Ok(Dataset { train_manifest: empty(Split::Train), train, test_manifest: empty(Split::Test), test })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, count, test_count, size, classes, seed, cfg } => {
            let mut data = cfg.load()?.data;
            if let Some(c) = count {
                data.count = c;
                data.test_count = c / 4;
            }
            data.test_count = test_count.unwrap_or(data.test_count);
            data.size = size.unwrap_or(data.size);
            data.num_classes = classes.unwrap_or(data.num_classes);
            data.seed = seed.unwrap_or(data.seed);
            let (train, test) = runner::synth(&data, &out)?;
            println!("{}", Split::Train.manifest_path(&train.root).display());
            println!("{}", Split::Test.manifest_path(&test.root).display());
        }
        Command::Train { data, out, fraction, variants, cfg } => {
            let mut cfg = cfg.load()?;
            variants.apply(&mut cfg);
            if let Some(f) = fraction {
                cfg.fraction = f;
            }
            cfg.validate()?;
            let ds = dataset(&cfg, data.as_deref())?;
            let outcome = runner::train(&cfg, &ds, Some(&out))?;
            let best = &outcome.records[outcome.best_epoch].test;
            println!(
                "{}: {} training samples, best epoch {} (ja {:.4}, di {:.4}, ac {:.4})",
                outcome.label, outcome.n_train, outcome.best_epoch, best.ja, best.di, best.ac
            );
        }
        Command::Eval { checkpoint, data, out, split } => {
            let net = runner::load_net(&checkpoint)?;
            let split = if split == "train" { Split::Train } else { Split::Test };
            let manifest = Manifest::read(&data, split)?;
            let (ev, csv) = runner::eval_csv(&net, &manifest)?;
            error::write(&out, csv.as_bytes())?;
            println!("ja {} di {} ac {}", ev.report.ja, ev.report.di, ev.report.ac);
        }
        Command::Rf { size, cfg } => {
            let cfg = cfg.load()?;
            let side = size.unwrap_or(cfg.data.size);
            print!("{}", runner::rf_csv(&runner::rf_table(&cfg.network, (side, side))?));
        }
        Command::Affinity { mask, block, n, variant, denominator, out, cfg } => {
            let cfg = cfg.load()?;
            let m = Pgm::read(&mask)?
                .to_mask(cfg.network.num_classes)
                .map_err(|e| AppError::format(&mask, e.to_string()))?;
            let denom = denominator.unwrap_or(cfg.pdcr.denominator);
            let csv = runner::affinity_csv(&cfg.network, &m, block, n, variant, denom)?;
            error::write(&out, csv.as_bytes())?;
        }
        Command::Uncertainty { checkpoint, image, out } => {
            let net = runner::load_net(&checkpoint)?;
            let maps = runner::uncertainty_maps(&net, &Pgm::read(&image)?)?;
            std::fs::create_dir_all(&out).map_err(|e| AppError::io(&out, e))?;
            for (block, map) in &maps {
                let path = out.join(format!("{block}.pgm"));
                map.write(&path)?;
                println!("{}", path.display());
            }
        }
        Command::Embeddings { checkpoint, image, blocks, n, out } => {
            let net = runner::load_net(&checkpoint)?;
            let csv = runner::embeddings_csv(&net, &Pgm::read(&image)?, &blocks, n)?;
            error::write(&out, csv.as_bytes())?;
        }
        Command::Sweep { data, fractions, out, variants, cfg } => {
            let mut cfg = cfg.load()?;
            variants.apply(&mut cfg);
            cfg.validate()?;
            if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
                return Err(AppError::Usage(format!("fraction {f} is outside (0, 1]")));
            }
            let ds = dataset(&cfg, data.as_deref())?;
            let mut csv = format!("{}\n", runner::SWEEP_HEADER);
            runner::sweep(&cfg, &ds, &fractions, |row| {
                csv.push_str(&row.csv());
                eprint!("{}", row.csv());
            })?;
            error::write(&out, csv.as_bytes())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
