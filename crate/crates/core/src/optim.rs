//! Adam with bias correction. Moments are keyed by caller-chosen names so
//! one optimizer can span several parameter sets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam: invalid betas/eps {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    /// Number of completed steps.
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, moments: BTreeMap::new() }
    }

    /// Start a new step; call once before the per-tensor updates.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, key: &str, lr: f64, param: &mut [f32], grad: &[f32]) {
        assert_eq!(param.len(), grad.len(), "adam: size mismatch for {key}");
        assert!(self.t > 0, "adam: tick() before update");
        let mo = self
            .moments
            .entry(key.to_string())
            .or_insert_with(|| Moments { m: vec![0.0; param.len()], v: vec![0.0; param.len()] });
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = (lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        let eps = self.cfg.eps as f32;
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        for i in 0..param.len() {
            let g = grad[i];
            let m = b1f * mo.m[i] + (1.0 - b1f) * g;
            let v = b2f * mo.v[i] + (1.0 - b2f) * g * g;
            mo.m[i] = m;
            mo.v[i] = v;
            param[i] -= step * m / (v.sqrt() / c2s + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut a = Adam::new(AdamConfig::default());
        let mut p = vec![1.0f32, -2.0, 0.5];
        a.tick();
        a.update("x", 0.1, &mut p, &[3.0, -0.2, 0.0]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut a = Adam::new(AdamConfig::default());
        let mut p = vec![5.0f32];
        for _ in 0..2000 {
            let g = [2.0 * p[0]];
            a.tick();
            a.update("x", 0.05, &mut p, &g);
        }
        assert!(p[0].abs() < 1e-2);
    }
}
