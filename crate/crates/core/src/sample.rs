use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Config(format!("{} labels for a {height}x{width} map", labels.len())));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self { height, width, labels: alloc::vec![class; height * width] }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.labels[y * self.width + x] = class;
    }

    /// Pixel count per class `0..num_classes`.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = alloc::vec![0; num_classes];
        for &l in &self.labels {
            if (l as usize) < num_classes {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|l| **l as usize >= num_classes) {
            Some(l) => Err(Error::Config(format!("mask holds class {l} but only {num_classes} classes exist"))),
            None => Ok(()),
        }
    }
}

/// A grayscale image in `[0, 1]` with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub mask: ClassMap,
}

impl Sample {
    pub fn new(image: Vec<f64>, mask: ClassMap) -> Result<Self> {
        if image.len() != mask.labels.len() {
            return Err(Error::Config(format!(
                "image has {} pixels but mask is {}x{}",
                image.len(),
                mask.height,
                mask.width
            )));
        }
        Ok(Self { image, mask })
    }

    pub fn size(&self) -> (usize, usize) {
        self.mask.size()
    }
}
