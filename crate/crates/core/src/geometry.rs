//! Receptive-field arithmetic for stacks of odd-kernel strided convolutions.
//!
//! For layer `L` the receptive-field side is
//! `r_L = Σ_{l=1..L} (k_l − 1)·Π_{t<l} s_t + 1`, the cumulative stride
//! ("jump") is `Π_{t≤L} s_t`, and the input coordinate of the centre of
//! hidden unit 0 follows `start_L = start_{L−1} + ((k_L − 1)/2 − p_L)·jump_{L−1}`.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::conv_out_len as spatial_out_len;
use crate::error::{Error, Result};

/// One convolution: odd `kernel`, `stride ≥ 1`, zero `padding`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvStackSpec {
    pub layers: Vec<ConvLayer>,
    pub image_size: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    /// Receptive-field side length in input pixels.
    pub r: usize,
    /// Input pixels per unit step in the hidden map.
    pub jump: usize,
    /// Input coordinate of the centre of hidden unit 0 (may be negative).
    pub start: i64,
    /// Hidden-map extent `(h, w)` at this layer.
    pub extent: (usize, usize),
}

/// Input-space rectangle of a hidden unit. Bounds are half-open and clipped
/// to the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
    /// Unclipped centre `(y, x)`.
    pub center: (i64, i64),
    /// `r²`
    pub unclipped_area: usize,
    /// Pixels of the rectangle inside the image.
    pub clipped_area: usize,
}

impl PatchRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.bottom).contains(&y) && (self.left..self.right).contains(&x)
    }

    /// Centre pixel clamped into the image.
    pub fn clamped_center(&self, image_size: (usize, usize)) -> (usize, usize) {
        let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
        (clamp(self.center.0, image_size.0), clamp(self.center.1, image_size.1))
    }
}

impl ConvStackSpec {
    pub fn new(layers: Vec<ConvLayer>, image_size: (usize, usize)) -> Result<Self> {
        let spec = Self { layers, image_size };
        spec.validate()?;
        Ok(spec)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (mut h, mut w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel == 0 || l.kernel % 2 == 0 {
                return Err(Error::Config(format!("layer {}: kernel {} must be odd and positive", i + 1, l.kernel)));
            }
            if l.stride == 0 {
                return Err(Error::Config(format!("layer {}: stride must be >= 1", i + 1)));
            }
            match (spatial_out_len(h, l.kernel, l.stride, l.padding), spatial_out_len(w, l.kernel, l.stride, l.padding)) {
                (Some(nh), Some(nw)) => (h, w) = (nh, nw),
                _ => return Err(Error::Config(format!("layer {}: spatial size collapses below 1", i + 1))),
            }
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer > self.depth() {
            return Err(Error::Config(format!("layer {layer} out of range 1..={}", self.depth())));
        }
        Ok(())
    }

    /// Receptive-field side of layer `layer` (1-based; `0` is the input itself).
    pub fn rf_size(&self, layer: usize) -> Result<usize> {
        self.check_layer(layer)?;
        let mut r = 1;
        let mut jump = 1;
        for l in &self.layers[..layer] {
            r += (l.kernel - 1) * jump;
            jump *= l.stride;
        }
        Ok(r)
    }

    pub fn layer_geometry(&self, layer: usize) -> Result<LayerGeometry> {
        self.check_layer(layer)?;
        let (mut h, mut w) = self.image_size;
        let mut jump = 1usize;
        let mut start = 0i64;
        for l in &self.layers[..layer] {
            start += ((l.kernel as i64 - 1) / 2 - l.padding as i64) * jump as i64;
            jump *= l.stride;
            h = spatial_out_len(h, l.kernel, l.stride, l.padding).unwrap_or(0);
            w = spatial_out_len(w, l.kernel, l.stride, l.padding).unwrap_or(0);
        }
        Ok(LayerGeometry { r: self.rf_size(layer)?, jump, start, extent: (h, w) })
    }
}

impl LayerGeometry {
    /// Input rectangle of hidden unit `coord = (y, x)`, clipped to `image_size`.
    pub fn patch_bounds(&self, coord: (usize, usize), image_size: (usize, usize)) -> PatchRect {
        let half = (self.r as i64 - 1) / 2;
        let cy = self.start + coord.0 as i64 * self.jump as i64;
        let cx = self.start + coord.1 as i64 * self.jump as i64;
        let clip = |lo: i64, hi: i64, n: usize| -> (usize, usize) {
            let lo = lo.clamp(0, n as i64) as usize;
            let hi = hi.clamp(0, n as i64) as usize;
            (lo, hi.max(lo))
        };
        let (top, bottom) = clip(cy - half, cy + half + 1, image_size.0);
        let (left, right) = clip(cx - half, cx + half + 1, image_size.1);
        PatchRect {
            top,
            left,
            bottom,
            right,
            center: (cy, cx),
            unclipped_area: self.r * self.r,
            clipped_area: (bottom - top) * (right - left),
        }
    }
}
