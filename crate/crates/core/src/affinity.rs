//! Class-composition affinities between hidden units.
//!
//! Each sampled hidden unit is mapped to its receptive-field patch, the patch
//! is summarized by per-class area ratios, and two units are scored by
//! `w = 1 − (1/M)·Σ_m |φ_i(m) − φ_j(m)|`. Affinities come from annotations
//! only and are constants for differentiation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{LayerGeometry, PatchRect};
use crate::sample::ClassMap;

/// How pairwise affinities are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AffinityVariant {
    /// Class-ratio affinity score.
    #[default]
    Continuous,
    /// Every entry 0.5.
    Constant,
    /// Identity: a patch is only positive with itself.
    Diagonal,
    /// 1 when the patch-centre labels agree, else 0.
    Bipartite,
}

impl AffinityVariant {
    pub const ALL: [AffinityVariant; 4] = [Self::Continuous, Self::Constant, Self::Diagonal, Self::Bipartite];

    pub fn name(self) -> &'static str {
        match self {
            Self::Continuous => "continuous",
            Self::Constant => "constant",
            Self::Diagonal => "diagonal",
            Self::Bipartite => "bipartite",
        }
    }
}

impl fmt::Display for AffinityVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AffinityVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown affinity variant `{s}`")))
    }
}

/// Denominator of the class ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Denominator {
    /// `r²`, even when the patch is cut by the image border.
    #[default]
    Unclipped,
    /// Pixels of the patch that lie inside the image.
    Clipped,
}

impl Denominator {
    pub fn name(self) -> &'static str {
        match self {
            Self::Unclipped => "unclipped",
            Self::Clipped => "clipped",
        }
    }
}

impl fmt::Display for Denominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Denominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unclipped" => Ok(Self::Unclipped),
            "clipped" => Ok(Self::Clipped),
            _ => Err(Error::Config(format!("unknown ratio denominator `{s}`"))),
        }
    }
}

/// Per-class area ratios of one patch, background included as class 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRatioVector {
    pub ratios: Vec<f64>,
    /// The clipped patch had no pixels; all ratios are zero.
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub n: usize,
    /// Row-major `n × n`.
    pub w: Vec<f64>,
}

impl AffinityMatrix {
    pub fn filled(n: usize, value: f64) -> Self {
        Self { n, w: vec![value; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::filled(n, 0.0);
        (0..n).for_each(|i| m.w[i * n + i] = 1.0);
        m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    /// Keep only rows/columns listed in `keep`, in that order.
    pub fn select(&self, keep: &[usize]) -> Self {
        let n = keep.len();
        let mut w = Vec::with_capacity(n * n);
        for &i in keep {
            w.extend(keep.iter().map(|&j| self.get(i, j)));
        }
        Self { n, w }
    }
}

/// Ordered hidden coordinates sampled from one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleGrid {
    pub coords: Vec<(usize, usize)>,
}

/// Regular lattice of up to `n` coordinates over a `(h, w)` hidden map.
///
/// With `g = ceil(sqrt(n))`, lattice index `i` along an axis of length `len`
/// sits at `floor((2i + 1)·len / (2g))`: spacing `len/g`, offset half a
/// spacing. Coordinates are emitted row-major and truncated to `n`; when the
/// map has no more than `n` units every unit is returned. An axis shorter than
/// `g` uses one lattice line per unit, so coordinates stay unique.
pub fn grid_sample_coords(extent: (usize, usize), n: usize) -> SampleGrid {
    let (h, w) = extent;
    if n == 0 || h == 0 || w == 0 {
        return SampleGrid { coords: Vec::new() };
    }
    if h * w <= n {
        let coords = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect();
        return SampleGrid { coords };
    }
    let mut g = 1;
    while g * g < n {
        g += 1;
    }
    let axis = |len: usize| -> Vec<usize> {
        let lines = g.min(len);
        (0..lines).map(|i| (2 * i + 1) * len / (2 * lines)).collect()
    };
    let (ys, xs) = (axis(h), axis(w));
    let coords = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).take(n).collect();
    SampleGrid { coords }
}

/// Per-class pixel share of `rect` in `mask`.
pub fn foreground_ratios(
    mask: &ClassMap,
    rect: &PatchRect,
    num_classes: usize,
    denominator: Denominator,
) -> Result<ClassRatioVector> {
    let mut counts = vec![0usize; num_classes];
    for y in rect.top..rect.bottom {
        for x in rect.left..rect.right {
            let c = mask.get(y, x) as usize;
            if c >= num_classes {
                return Err(Error::Config(format!("mask class {c} at ({y}, {x}) >= class count {num_classes}")));
            }
            counts[c] += 1;
        }
    }
    if rect.clipped_area == 0 {
        return Ok(ClassRatioVector { ratios: vec![0.0; num_classes], empty: true });
    }
    let denom = match denominator {
        Denominator::Unclipped => rect.unclipped_area,
        Denominator::Clipped => rect.clipped_area,
    } as f64;
    Ok(ClassRatioVector { ratios: counts.iter().map(|&c| c as f64 / denom).collect(), empty: false })
}

/// `1 − (1/M)·Σ_m |φ_i(m) − φ_j(m)|`
pub fn affinity_score(phi_i: &ClassRatioVector, phi_j: &ClassRatioVector) -> Result<f64> {
    let m = phi_i.ratios.len();
    if m != phi_j.ratios.len() || m == 0 {
        return Err(Error::Config(format!(
            "class count mismatch: {} vs {}",
            phi_i.ratios.len(),
            phi_j.ratios.len()
        )));
    }
    let l1: f64 = phi_i.ratios.iter().zip(&phi_j.ratios).map(|(a, b)| (a - b).abs()).sum();
    Ok(1.0 - l1 / m as f64)
}

/// Affinity matrix together with the class ratios it was built from
/// (ratios are filled for every variant so audits can print them).
pub fn affinity_matrix_with_ratios(
    mask: &ClassMap,
    grid: &SampleGrid,
    geom: &LayerGeometry,
    num_classes: usize,
    variant: AffinityVariant,
    denominator: Denominator,
) -> Result<(AffinityMatrix, Vec<ClassRatioVector>)> {
    let size = mask.size();
    let n = grid.coords.len();
    let mut rects = Vec::with_capacity(n);
    for &(y, x) in &grid.coords {
        if y >= geom.extent.0 || x >= geom.extent.1 {
            return Err(Error::Config(format!("grid coordinate ({y}, {x}) outside hidden extent {:?}", geom.extent)));
        }
        rects.push(geom.patch_bounds((y, x), size));
    }
    let ratios = rects
        .iter()
        .map(|r| foreground_ratios(mask, r, num_classes, denominator))
        .collect::<Result<Vec<_>>>()?;
    let matrix = match variant {
        AffinityVariant::Constant => AffinityMatrix::filled(n, 0.5),
        AffinityVariant::Diagonal => AffinityMatrix::identity(n),
        AffinityVariant::Bipartite => {
            let labels: Vec<u8> = rects
                .iter()
                .map(|r| {
                    let (cy, cx) = r.clamped_center(size);
                    mask.get(cy, cx)
                })
                .collect();
            let mut m = AffinityMatrix::filled(n, 0.0);
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == labels[j] {
                        m.w[i * n + j] = 1.0;
                    }
                }
            }
            m
        }
        AffinityVariant::Continuous => {
            let mut m = AffinityMatrix::identity(n);
            for i in 0..n {
                for j in i + 1..n {
                    let s = affinity_score(&ratios[i], &ratios[j])?;
                    m.w[i * n + j] = s;
                    m.w[j * n + i] = s;
                }
            }
            m
        }
    };
    Ok((matrix, ratios))
}

pub fn affinity_matrix(
    mask: &ClassMap,
    grid: &SampleGrid,
    geom: &LayerGeometry,
    num_classes: usize,
    variant: AffinityVariant,
    denominator: Denominator,
) -> Result<AffinityMatrix> {
    affinity_matrix_with_ratios(mask, grid, geom, num_classes, variant, denominator).map(|(m, _)| m)
}
