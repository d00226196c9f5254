//! Adam with a dense variant for small matrices and a lazy row-sparse variant
//! for hashed embedding tables.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to the coordinates being updated.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

fn check_finite(what: &str, grads: &[f64]) -> Result<()> {
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("{what} gradient at coordinate {i}: {}", grads[i])));
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct DenseAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl DenseAdam {
    pub fn new(len: usize) -> Self {
        DenseAdam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &AdamConfig) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                actual: grads.len(),
            });
        }
        check_finite("dense", grads)?;
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= cfg.lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

/// Lazy Adam: only rows present in the gradient have their moments advanced.
/// Rows are applied in ascending id order.
#[derive(Debug, Clone, Default)]
pub struct RowAdam {
    width: usize,
    state: HashMap<u32, (Vec<f64>, Vec<f64>)>,
    t: u64,
}

impl RowAdam {
    pub fn new(width: usize) -> Self {
        RowAdam {
            width,
            state: HashMap::new(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        table: &mut [f64],
        grads: &HashMap<u32, Vec<f64>>,
        cfg: &AdamConfig,
    ) -> Result<()> {
        let mut rows: Vec<u32> = grads.keys().copied().collect();
        rows.sort_unstable();
        for &r in &rows {
            check_finite(&format!("embedding row {r}"), &grads[&r])?;
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let w = self.width;
        for r in rows {
            let g = &grads[&r];
            let (m, v) = self
                .state
                .entry(r)
                .or_insert_with(|| (vec![0.0; w], vec![0.0; w]));
            let row = &mut table[r as usize * w..(r as usize + 1) * w];
            for k in 0..w {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                row[k] -= cfg.lr
                    * ((m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps) + cfg.weight_decay * row[k]);
            }
        }
        Ok(())
    }

    pub fn tracked_rows(&self) -> usize {
        self.state.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let before = p.clone();
        let mut opt = DenseAdam::new(3);
        opt.step(&mut p, &[0.0; 3], &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = vec![0.0; 2];
        let mut opt = DenseAdam::new(2);
        let err = opt.step(&mut p, &[0.0, f64::NAN], &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"));
        let mut table = vec![0.0; 4];
        let mut rows = RowAdam::new(2);
        let grads = HashMap::from([(1u32, vec![f64::INFINITY, 0.0])]);
        assert!(rows.step(&mut table, &grads, &AdamConfig::default()).is_err());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut opt = DenseAdam::new(1);
        opt.step(&mut p, &[5.0], &AdamConfig::with_lr(0.1)).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn row_adam_touches_only_given_rows() {
        let mut table = vec![1.0; 6];
        let mut opt = RowAdam::new(2);
        let grads = HashMap::from([(2u32, vec![1.0, -1.0])]);
        opt.step(&mut table, &grads, &AdamConfig::with_lr(0.5)).unwrap();
        assert_eq!(&table[..4], &[1.0; 4]);
        assert!((table[4] - 0.5).abs() < 1e-6 && (table[5] - 1.5).abs() < 1e-6);
        assert_eq!(opt.tracked_rows(), 1);
    }
}
