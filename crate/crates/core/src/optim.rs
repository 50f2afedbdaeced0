//! Adam with decoupled weight decay, and the cosine learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::network::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of a single parameter slot. `slot` identifies the moment
    /// buffers; call [`Adam::tick`] once per optimizer step first.
    pub fn update(&mut self, slot: usize, p: &mut [f64], g: &[f64], lr: f64) {
        if self.m.len() <= slot {
            self.m.resize(slot + 1, Vec::new());
            self.v.resize(slot + 1, Vec::new());
        }
        if self.m[slot].len() != p.len() {
            self.m[slot] = vec![0.0; p.len()];
            self.v[slot] = vec![0.0; p.len()];
        }
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - math::powi(beta1, t);
        let c2 = 1.0 - math::powi(beta2, t);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..p.len() {
            p[i] -= lr * weight_decay * p[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (math::sqrt(v_hat) + eps);
        }
    }

    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Update every trainable entry of `params` that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) {
        self.tick();
        for (slot, (entry, grad)) in params.entries_mut().iter_mut().zip(grads).enumerate() {
            if let (true, Some(g)) = (entry.trainable, grad) {
                self.update(slot, &mut entry.tensor.data, g, lr);
            }
        }
    }
}

/// `lr0 · (1 + cos(π t / T)) / 2`; `T = 0` keeps `lr0`.
pub fn cosine_lr(t: u64, total: u64, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = t.min(total) as f64;
    lr0 * (1.0 + math::cos(core::f64::consts::PI * t / total as f64)) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut adam = Adam::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        let mut p = [1.5, -2.0];
        adam.tick();
        adam.update(0, &mut p, &[0.0, 0.0], 0.1);
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut adam = Adam::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        let mut p = [0.0, 0.0];
        let g = [0.3, -4.0];
        adam.tick();
        adam.update(0, &mut p, &g, 0.001);
        for i in 0..2 {
            let want = -0.001 * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - want).abs() < 1e-15, "{} vs {want}", p[i]);
        }
    }

    #[test]
    fn decay_is_applied_before_the_update() {
        let mut adam = Adam::new(AdamConfig { weight_decay: 0.5, ..Default::default() });
        let mut p = [2.0];
        adam.tick();
        adam.update(0, &mut p, &[0.0], 0.1);
        assert_eq!(p, [2.0 - 0.1 * 0.5 * 2.0]);
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 0.001), 0.001);
        assert!(cosine_lr(100, 100, 0.001).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.001) - 0.0005).abs() < 1e-18);
        assert_eq!(cosine_lr(3, 0, 0.01), 0.01);
    }
}
