//! Flat `key = value` run configuration.
//!
//! `#` starts a comment, dotted keys address nested settings
//! (`pdcr.tau = 0.5`). Lists are comma-separated. Layers of precedence, lowest
//! first: built-in defaults, `DRAGSAW_SEED`, the config file, command-line
//! flags.

use std::path::Path;

use dragsaw_core::network::BlockId;
use dragsaw_core::train::RunConfig;

use crate::error::{self, AppError, Result};

pub const SEED_ENV: &str = "DRAGSAW_SEED";

/// Every accepted key, in snapshot order.
pub const KEYS: &[&str] = &[
    "seed",
    "lr",
    "epochs",
    "batch_size",
    "fraction",
    "num_classes",
    "adam.beta1",
    "adam.beta2",
    "adam.eps",
    "adam.weight_decay",
    "pdcr.tau",
    "pdcr.lambda",
    "pdcr.samples",
    "pdcr.taps",
    "pdcr.variant",
    "pdcr.include_diagonal",
    "pdcr.denominator",
    "network.encoder_channels",
    "network.uafs_layers",
    "network.uafs_zero_init",
    "network.detach_uncertainty",
    "data.count",
    "data.test_count",
    "data.size",
    "data.blobs",
    "data.offset",
    "data.blur",
    "data.noise",
    "data.texture",
    "data.seed",
];

fn bad(key: &str, value: &str, what: &str) -> AppError {
    AppError::Usage(format!("config key `{key}`: cannot parse `{value}` as {what}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, what))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(bad(key, value, "a boolean")),
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<Vec<T>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim(), what)).collect()
}

fn pair<T: std::str::FromStr + Copy>(key: &str, value: &str, what: &str) -> Result<(T, T)> {
    match list::<T>(key, value, what)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(bad(key, value, &format!("two comma-separated {what}s"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    if items.is_empty() {
        return "none".into();
    }
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Apply one `key = value` setting.
pub fn set(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let value = value.trim();
    match key {
        "seed" => cfg.seed = num(key, value, "an unsigned integer")?,
        "lr" => cfg.lr = num(key, value, "a number")?,
        "epochs" => cfg.epochs = num(key, value, "an unsigned integer")?,
        "batch_size" => cfg.batch_size = num(key, value, "an unsigned integer")?,
        "fraction" => cfg.fraction = num(key, value, "a number")?,
        "num_classes" => {
            let m = num(key, value, "an unsigned integer")?;
            cfg.network.num_classes = m;
            cfg.data.num_classes = m;
        }
        "adam.beta1" => cfg.adam.beta1 = num(key, value, "a number")?,
        "adam.beta2" => cfg.adam.beta2 = num(key, value, "a number")?,
        "adam.eps" => cfg.adam.eps = num(key, value, "a number")?,
        "adam.weight_decay" => cfg.adam.weight_decay = num(key, value, "a number")?,
        "pdcr.tau" => cfg.pdcr.tau = num(key, value, "a number")?,
        "pdcr.lambda" => cfg.pdcr.lambda = num(key, value, "a number")?,
        "pdcr.samples" => cfg.pdcr.samples = num(key, value, "an unsigned integer")?,
        "pdcr.taps" => cfg.pdcr.tap_blocks = list(key, value, "block number")?,
        "pdcr.variant" => cfg.pdcr.variant = value.parse()?,
        "pdcr.include_diagonal" => cfg.pdcr.include_diagonal = boolean(key, value)?,
        "pdcr.denominator" => cfg.pdcr.denominator = value.parse()?,
        "network.encoder_channels" => cfg.network.encoder_channels = list(key, value, "channel count")?,
        "network.uafs_layers" => {
            cfg.network.uafs_layers = if value == "all" {
                dragsaw_core::network::SegNetConfig::all_blocks(cfg.network.depth())
            } else {
                list::<BlockId>(key, value, "block name")?
            }
        }
        "network.uafs_zero_init" => cfg.network.uafs_zero_init = boolean(key, value)?,
        "network.detach_uncertainty" => cfg.network.detach_uncertainty = boolean(key, value)?,
        "data.count" => cfg.data.count = num(key, value, "an unsigned integer")?,
        "data.test_count" => cfg.data.test_count = num(key, value, "an unsigned integer")?,
        "data.size" => cfg.data.size = num(key, value, "an unsigned integer")?,
        "data.blobs" => cfg.data.blobs = pair(key, value, "integer")?,
        "data.offset" => cfg.data.offset = pair(key, value, "number")?,
        "data.blur" => cfg.data.blur_sigma = pair(key, value, "number")?,
        "data.noise" => cfg.data.noise_sigma = num(key, value, "a number")?,
        "data.texture" => cfg.data.texture = boolean(key, value)?,
        "data.seed" => cfg.data.seed = num(key, value, "an unsigned integer")?,
        _ => return Err(AppError::Usage(format!("unknown config key `{key}`"))),
    }
    Ok(())
}

/// Apply `key = value` lines.
pub fn apply_text(cfg: &mut RunConfig, text: &str, origin: &str) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| AppError::Usage(format!("{origin}:{}: expected `key = value`", i + 1)))?;
        set(cfg, key.trim(), value).map_err(|e| match e {
            AppError::Usage(m) => AppError::Usage(format!("{origin}:{}: {m}", i + 1)),
            other => other,
        })?;
    }
    Ok(())
}

/// Apply a `key=value` command-line override.
pub fn apply_override(cfg: &mut RunConfig, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| AppError::Usage(format!("--set expects key=value, got `{assignment}`")))?;
    set(cfg, key.trim(), value)
}

/// Defaults, then `DRAGSAW_SEED`, then the optional file.
pub fn load(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(seed) = std::env::var(SEED_ENV) {
        set(&mut cfg, "seed", &seed).map_err(|_| AppError::Usage(format!("{SEED_ENV}=`{seed}` is not an unsigned integer")))?;
    }
    if let Some(path) = path {
        let bytes = error::read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| AppError::format(path, "config is not UTF-8"))?;
        apply_text(&mut cfg, &text, &path.display().to_string())?;
    }
    Ok(cfg)
}

fn value_of(cfg: &RunConfig, key: &str) -> String {
    let f = |v: f64| format!("{v:?}");
    match key {
        "seed" => cfg.seed.to_string(),
        "lr" => f(cfg.lr),
        "epochs" => cfg.epochs.to_string(),
        "batch_size" => cfg.batch_size.to_string(),
        "fraction" => f(cfg.fraction),
        "num_classes" => cfg.network.num_classes.to_string(),
        "adam.beta1" => f(cfg.adam.beta1),
        "adam.beta2" => f(cfg.adam.beta2),
        "adam.eps" => f(cfg.adam.eps),
        "adam.weight_decay" => f(cfg.adam.weight_decay),
        "pdcr.tau" => f(cfg.pdcr.tau),
        "pdcr.lambda" => f(cfg.pdcr.lambda),
        "pdcr.samples" => cfg.pdcr.samples.to_string(),
        "pdcr.taps" => join(&cfg.pdcr.tap_blocks),
        "pdcr.variant" => cfg.pdcr.variant.to_string(),
        "pdcr.include_diagonal" => cfg.pdcr.include_diagonal.to_string(),
        "pdcr.denominator" => cfg.pdcr.denominator.to_string(),
        "network.encoder_channels" => join(&cfg.network.encoder_channels),
        "network.uafs_layers" => join(&cfg.network.uafs_layers),
        "network.uafs_zero_init" => cfg.network.uafs_zero_init.to_string(),
        "network.detach_uncertainty" => cfg.network.detach_uncertainty.to_string(),
        "data.count" => cfg.data.count.to_string(),
        "data.test_count" => cfg.data.test_count.to_string(),
        "data.size" => cfg.data.size.to_string(),
        "data.blobs" => format!("{},{}", cfg.data.blobs.0, cfg.data.blobs.1),
        "data.offset" => format!("{},{}", f(cfg.data.offset.0), f(cfg.data.offset.1)),
        "data.blur" => format!("{},{}", f(cfg.data.blur_sigma.0), f(cfg.data.blur_sigma.1)),
        "data.noise" => f(cfg.data.noise_sigma),
        "data.texture" => cfg.data.texture.to_string(),
        "data.seed" => cfg.data.seed.to_string(),
        _ => unreachable!("key list and serializer disagree on {key}"),
    }
}

/// The whole configuration in the file format; parsing it back yields `cfg`.
pub fn to_text(cfg: &RunConfig) -> String {
    KEYS.iter().map(|k| format!("{k} = {}\n", value_of(cfg, k))).collect()
}
