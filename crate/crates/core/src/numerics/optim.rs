use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{CoeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer with per-parameter state slots.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    // (first moment / velocity, second moment); the second is unused by SGD.
    slots: Vec<(Matrix, Matrix)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(CoeError::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            kind,
            learning_rate,
            step: 0,
            slots: Vec::new(),
        })
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::default(), learning_rate)
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Result<Self> {
        Self::new(OptimizerKind::SgdMomentum { momentum }, learning_rate)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients are validated before any parameter moves.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(CoeError::Dimension {
                op: "optimizer_step",
                left: (params.len(), 1),
                right: (grads.len(), 1),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(CoeError::Dimension {
                    op: "optimizer_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(CoeError::Divergence(
                    "non-finite gradient passed to optimizer".into(),
                ));
            }
        }
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| (Matrix::zeros(p.rows(), p.cols()), Matrix::zeros(p.rows(), p.cols())))
                .collect();
        } else if self.slots.len() != params.len()
            || self
                .slots
                .iter()
                .zip(params.iter())
                .any(|(s, p)| s.0.shape() != p.shape())
        {
            return Err(CoeError::Config(
                "parameter list changed shape between optimizer steps".into(),
            ));
        }

        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), (vel, _)) in params.iter_mut().zip(grads).zip(&mut self.slots) {
                    for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.slots) {
                    let pd = p.data_mut();
                    let md = m.data_mut();
                    let vd = v.data_mut();
                    for (i, &gv) in g.data().iter().enumerate() {
                        md[i] = beta1 * md[i] + (1.0 - beta1) * gv;
                        vd[i] = beta2 * vd[i] + (1.0 - beta2) * gv * gv;
                        let m_hat = md[i] / bc1;
                        let v_hat = vd[i] / bc2;
                        pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
