//! Jaccard (JA), Dice (DI) and pixel accuracy (AC).
//!
//! JA and DI are computed per foreground class from confusion counts and
//! averaged over foreground classes. A class absent from both prediction and
//! truth scores 1.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::sample::ClassMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub correct: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ja: f64,
    pub di: f64,
    pub ac: f64,
    /// Indexed by class; entry 0 (background) is reported but not averaged.
    pub per_class_ja: Vec<f64>,
    pub per_class_di: Vec<f64>,
    pub samples: usize,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self { tp: vec![0; num_classes], fp: vec![0; num_classes], fn_: vec![0; num_classes], correct: 0, total: 0 }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn add(&mut self, pred: &ClassMap, truth: &ClassMap) -> Result<()> {
        if pred.size() != truth.size() {
            return Err(Error::Config(format!("prediction {:?} vs truth {:?}", pred.size(), truth.size())));
        }
        let m = self.num_classes();
        truth.check_classes(m)?;
        pred.check_classes(m)?;
        for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
            let (p, t) = (p as usize, t as usize);
            if p == t {
                self.tp[p] += 1;
                self.correct += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[t] += 1;
            }
            self.total += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for c in 0..self.num_classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        self.correct += other.correct;
        self.total += other.total;
    }

    pub fn jaccard(&self, class: usize) -> f64 {
        let (tp, fp, fn_) = (self.tp[class], self.fp[class], self.fn_[class]);
        if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fp + fn_) as f64 }
    }

    pub fn dice(&self, class: usize) -> f64 {
        let (tp, fp, fn_) = (self.tp[class], self.fp[class], self.fn_[class]);
        if tp + fp + fn_ == 0 { 1.0 } else { (2 * tp) as f64 / (2 * tp + fp + fn_) as f64 }
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 { 1.0 } else { self.correct as f64 / self.total as f64 }
    }

    pub fn report(&self, samples: usize) -> MetricsReport {
        let m = self.num_classes();
        let per_class_ja: Vec<f64> = (0..m).map(|c| self.jaccard(c)).collect();
        let per_class_di: Vec<f64> = (0..m).map(|c| self.dice(c)).collect();
        let fg = (m - 1).max(1) as f64;
        MetricsReport {
            ja: per_class_ja[1..].iter().sum::<f64>() / fg,
            di: per_class_di[1..].iter().sum::<f64>() / fg,
            ac: self.accuracy(),
            per_class_ja,
            per_class_di,
            samples,
        }
    }
}
