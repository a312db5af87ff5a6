//! Adam with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::params::Parameterized;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {name:?} at step {step}")]
    NonFiniteGrad { name: String, step: u64 },
    #[error("no gradient supplied for parameter {0:?}")]
    MissingGrad(String),
}

#[derive(Debug, Clone, Copy)]
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
            ..Default::default()
        }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    step_count: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: AdamState::default(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.state.step_count
    }

    /// One bias-corrected update of every parameter in `target`, using the
    /// gradient map from [`crate::tape::Tape::param_grads`]. Fails fast on
    /// missing or non-finite gradients.
    pub fn step(
        &mut self,
        target: &mut impl Parameterized,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), OptimError> {
        self.state.step_count += 1;
        let t = self.state.step_count;
        let c1 = 1.0 - self.config.beta1.powi(t as i32);
        let c2 = 1.0 - self.config.beta2.powi(t as i32);
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;

        let mut failure: Option<OptimError> = None;
        let moments = &mut self.state.moments;
        target.visit_params_mut(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            let Some(g) = grads.get(name) else {
                failure = Some(OptimError::MissingGrad(name.to_string()));
                return;
            };
            if !g.all_finite() {
                failure = Some(OptimError::NonFiniteGrad {
                    name: name.to_string(),
                    step: t,
                });
                return;
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Moment buffers flattened to named tensors (for checkpoints).
    pub fn export_moments(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, (m, v)) in &self.state.moments {
            out.push((format!("{name}.m"), Tensor::vector(m.clone())));
            out.push((format!("{name}.v"), Tensor::vector(v.clone())));
        }
        out
    }

    pub fn restore_moments(&mut self, step_count: u64, entries: &[(String, Tensor)]) {
        self.state.step_count = step_count;
        self.state.moments.clear();
        let mut halves: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
        for (name, t) in entries {
            if let Some(base) = name.strip_suffix(".m") {
                halves.entry(base.to_string()).or_default().0 = Some(t.data().to_vec());
            } else if let Some(base) = name.strip_suffix(".v") {
                halves.entry(base.to_string()).or_default().1 = Some(t.data().to_vec());
            }
        }
        for (name, (m, v)) in halves {
            if let (Some(m), Some(v)) = (m, v) {
                self.state.moments.insert(name, (m, v));
            }
        }
    }
}
