//! Dataset manifests: one `image<TAB>mask<TAB>sha256(image)<TAB>sha256(mask)`
//! line per sample, paths relative to the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dragsaw_core::rng::{fraction_count, permutation};
use dragsaw_core::sample::Sample;
use dragsaw_core::Error as CoreError;
use sha2::{Digest, Sha256};

use crate::error::{self, AppError, Result};
use crate::pgm::Pgm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }

    pub fn manifest_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.tsv", self.name()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub image_sha256: String,
    pub mask_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub split: Split,
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl Manifest {
    pub fn encode(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", e.image.display(), e.mask.display(), e.image_sha256, e.mask_sha256))
            .collect()
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = self.split.manifest_path(&self.root);
        error::write(&path, self.encode().as_bytes())?;
        Ok(path)
    }

    pub fn read(dir: &Path, split: Split) -> Result<Self> {
        let path = split.manifest_path(dir);
        let text = String::from_utf8(error::read(&path)?).map_err(|_| AppError::format(&path, "not UTF-8"))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(AppError::format(&path, format!("line {}: expected 4 tab-separated fields", i + 1)));
            }
            entries.push(ManifestEntry {
                image: f[0].into(),
                mask: f[1].into(),
                image_sha256: f[2].to_string(),
                mask_sha256: f[3].to_string(),
            });
        }
        Ok(Self { split, root: dir.to_path_buf(), entries })
    }

    /// Load every sample, verifying checksums.
    pub fn load(&self, num_classes: usize) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|e| {
                let image = self.checked_pgm(&e.image, &e.image_sha256)?;
                let mask = self.checked_pgm(&e.mask, &e.mask_sha256)?;
                let mask_path = self.root.join(&e.mask);
                let mask = mask.to_mask(num_classes).map_err(|err| AppError::format(&mask_path, err.to_string()))?;
                if (image.height, image.width) != mask.size() {
                    return Err(AppError::format(&mask_path, "mask size differs from image"));
                }
                Ok(Sample::new(image.to_unit(), mask)?)
            })
            .collect()
    }

    fn checked_pgm(&self, rel: &Path, sha: &str) -> Result<Pgm> {
        let path = self.root.join(rel);
        let bytes = error::read(&path)?;
        let found = sha256_hex(&bytes);
        if found != sha {
            return Err(AppError::format(&path, format!("checksum mismatch: manifest {sha}, file {found}")));
        }
        Pgm::decode(&bytes).map_err(|e| AppError::format(&path, e.to_string()))
    }

    /// The [`fraction_indices`] subset, in selection order.
    pub fn select_fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        let entries = fraction_indices(self.entries.len(), fraction, seed)?
            .into_iter()
            .map(|i| self.entries[i].clone())
            .collect();
        Ok(Self { entries, ..self.clone() })
    }
}

/// Seeded shuffle of `0..n`, then the first `ceil(fraction · n)` indices.
/// Smaller fractions of the same seed select prefixes of larger ones.
pub fn fraction_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::Config(format!("fraction must be in (0, 1], got {fraction}")).into());
    }
    let k = fraction_count(n, fraction);
    if k == 0 {
        return Err(CoreError::Config(format!("fraction {fraction} of {n} samples is empty")).into());
    }
    let mut order = permutation(n, seed);
    order.truncate(k);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> Manifest {
        let entries = (0..n)
            .map(|i| ManifestEntry {
                image: format!("{i}.pgm").into(),
                mask: format!("{i}_mask.pgm").into(),
                image_sha256: String::new(),
                mask_sha256: String::new(),
            })
            .collect();
        Manifest { split: Split::Train, root: PathBuf::new(), entries }
    }

    #[test]
    fn fractions_nest() {
        let m = manifest(400);
        let quarter = m.select_fraction(0.25, 42).unwrap();
        let half = m.select_fraction(0.5, 42).unwrap();
        assert_eq!(quarter.entries.len(), 100);
        assert_eq!(quarter.entries[..], half.entries[..100]);
        assert_eq!(m.select_fraction(1.0, 42).unwrap().entries.len(), 400);
        assert_ne!(m.select_fraction(1.0, 42).unwrap(), m.select_fraction(1.0, 43).unwrap());
    }

    #[test]
    fn empty_selection_is_a_config_error() {
        let e = manifest(0).select_fraction(0.5, 1).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(manifest(3).select_fraction(1.5, 1).is_err());
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
