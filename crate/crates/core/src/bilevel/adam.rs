use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Grid>,
    v: Vec<Grid>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Grid> = params.grids().iter().map(|g| Grid::zeros(g.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Returns the updated parameters for gradient `grad` at learning rate `lr`.
    pub fn step(&mut self, params: &ParamSet, grad: &[Grid], lr: f64) -> Result<ParamSet> {
        if grad.len() != self.m.len() {
            return Err(Error::invalid("gradient count differs from optimizer state"));
        }
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let mut out = Vec::with_capacity(grad.len());
        for (i, g) in grad.iter().enumerate() {
            self.m[i] = self.m[i].zip_map(g, |m, g| beta1 * m + (1.0 - beta1) * g)?;
            self.v[i] = self.v[i].zip_map(g, |v, g| beta2 * v + (1.0 - beta2) * g * g)?;
            let step = self.m[i].zip_map(&self.v[i], |m, v| lr * (m / c1) / ((v / c2).sqrt() + eps))?;
            out.push(params.grids()[i].sub(&step)?);
        }
        params.with_grids(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let p = ParamSet::new(vec!["a".into()], vec![Grid::from_vec(vec![1.0, 1.0])]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let g = vec![Grid::from_vec(vec![3.0, -0.2])];
        let q = opt.step(&p, &g, 0.01).unwrap();
        assert!((q.grids()[0].data()[0] - 0.99).abs() < 1e-9);
        assert!((q.grids()[0].data()[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new(vec!["a".into()], vec![Grid::from_vec(vec![3.0, -2.0])]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &p);
        for _ in 0..3000 {
            let g = vec![p.grids()[0].scale(2.0)];
            p = opt.step(&p, &g, 0.01).unwrap();
        }
        assert!(p.grids()[0].max_abs() < 1e-2);
    }
}
