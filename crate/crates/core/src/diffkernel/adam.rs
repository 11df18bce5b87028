use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

struct Moments {
    first: Matrix,
    second: Matrix,
}

/// Adam optimizer state, keyed by parameter name.
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one bias-corrected Adam update to every `(name, param, grad)`.
    /// All shapes are checked before any parameter is touched.
    pub fn step<'a>(
        &mut self,
        updates: impl IntoIterator<Item = (&'a str, &'a mut Matrix, &'a Matrix)>,
    ) -> Result<()> {
        let updates: Vec<_> = updates.into_iter().collect();
        for (name, param, grad) in &updates {
            if param.shape() != grad.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: param {:?} grad {:?}", param.shape(), grad.shape()),
                ));
            }
            if let Some(m) = self.moments.get(*name) {
                if m.first.shape() != param.shape() {
                    return Err(Error::shape(
                        "adam_step",
                        format!("{name}: state {:?} param {:?}", m.first.shape(), param.shape()),
                    ));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, param, grad) in updates {
            let m = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: Matrix::zeros(param.rows(), param.cols()),
                second: Matrix::zeros(param.rows(), param.cols()),
            });
            let first = m.first.as_mut_slice();
            let second = m.second.as_mut_slice();
            for (k, (p, &g)) in param
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_slice())
                .enumerate()
            {
                first[k] = beta1 * first[k] + (1.0 - beta1) * g;
                second[k] = beta2 * second[k] + (1.0 - beta2) * g * g;
                let m_hat = first[k] / bc1;
                let v_hat = second[k] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut state = AdamState::new(AdamConfig::default());
        let mut p = Matrix::from_rows(&[vec![0.3, -1.2], vec![4.0, 0.0]]);
        let before = p.clone();
        let g = Matrix::zeros(2, 2);
        for _ in 0..5 {
            state.step([("p", &mut p, &g)]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // m̂ = g, v̂ = g², so Δ = -lr · g / (|g| + eps).
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(cfg);
        let mut p = Matrix::from_rows(&[vec![1.0, 1.0, 1.0]]);
        let g = Matrix::from_rows(&[vec![0.5, -3.0, 1e-3]]);
        state.step([("p", &mut p, &g)]).unwrap();
        for (k, &gk) in g.as_slice().iter().enumerate() {
            let expected = 1.0 - cfg.lr * gk / (gk.abs() + cfg.eps);
            assert!((p.as_slice()[k] - expected).abs() < 1e-15);
            assert!(((p.as_slice()[k] - 1.0).abs() - cfg.lr).abs() < 1e-7);
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut state = AdamState::new(AdamConfig::with_lr(0.01));
            let mut p = Matrix::from_rows(&[vec![0.1, 0.2]]);
            for i in 0..20 {
                let g = Matrix::from_rows(&[vec![(i as f64).sin(), (i as f64 * 0.3).cos()]]);
                state.step([("p", &mut p, &g)]).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut state = AdamState::new(AdamConfig::default());
        let mut p = Matrix::zeros(2, 2);
        let g = Matrix::zeros(1, 2);
        assert!(state.step([("p", &mut p, &g)]).is_err());
        assert_eq!(state.step_count(), 0);
    }
}
