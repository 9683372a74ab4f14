//! First-order optimizers over flat parameter vectors.

use crate::error::{FlowError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerKind {
    /// Adam with bias-corrected first and second moments.
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    /// RMSProp with a decaying squared-gradient accumulator.
    RmsProp { decay: f64, epsilon: f64 },
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Optimizer {
    pub fn adam(learning_rate: f64, param_len: usize) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            learning_rate,
            step_count: 0,
            first_moment: vec![0.0; param_len],
            second_moment: vec![0.0; param_len],
        }
    }

    pub fn rmsprop(learning_rate: f64, param_len: usize) -> Self {
        Optimizer {
            kind: OptimizerKind::RmsProp {
                decay: 0.9,
                epsilon: 1e-8,
            },
            learning_rate,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: vec![0.0; param_len],
        }
    }

    /// Applies one update in place. Rejects non-finite gradients before
    /// touching any state, and never changes parameters on error.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if grads.len() != params.len() || self.second_moment.len() != params.len() {
            return Err(FlowError::shape_mismatch(
                format!("{} parameters", self.second_moment.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(FlowError::Numeric(format!(
                "non-finite gradient at index {i}"
            )));
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.first_moment[i] = beta1 * self.first_moment[i] + (1.0 - beta1) * g;
                    self.second_moment[i] = beta2 * self.second_moment[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.first_moment[i] / bc1;
                    let v_hat = self.second_moment[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
            OptimizerKind::RmsProp { decay, epsilon } => {
                for i in 0..params.len() {
                    let g = grads[i];
                    self.second_moment[i] = decay * self.second_moment[i] + (1.0 - decay) * g * g;
                    params[i] -= lr * g / (self.second_moment[i].sqrt() + epsilon);
                }
            }
        }
        Ok(())
    }
}
