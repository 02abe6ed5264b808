use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_len, DiffnetError, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            weight_decay: 0.0,
        }
    }

    pub fn sgd_momentum(lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum { momentum },
            lr,
            weight_decay: 0.0,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(3e-3)
    }
}

/// Moment (Adam) or velocity (SGD) buffers over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, param_count: usize) -> Self {
        let second = match config.kind {
            OptimizerKind::Adam { .. } => vec![0.0; param_count],
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            config,
            step: 0,
            first: vec![0.0; param_count],
            second,
        }
    }

    pub fn param_count(&self) -> usize {
        self.first.len()
    }

    /// First-moment (Adam) or velocity (SGD) buffer.
    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    /// Applies one update over a sequence of parameter segments laid out
    /// back to back in the optimizer's buffers. Nothing is modified when a
    /// gradient is non-finite.
    pub fn apply(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), DiffnetError> {
        check_len("gradient segments", params.len(), grads.len())?;
        let mut total = 0;
        for (p, g) in params.iter().zip(grads) {
            check_len("gradient segment", p.len(), g.len())?;
            total += p.len();
        }
        check_len("optimizer state", self.first.len(), total)?;
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(DiffnetError::NonFinite("gradients"));
        }
        self.step += 1;
        let lr = self.config.lr;
        let wd = self.config.weight_decay;
        let mut offset = 0;
        match self.config.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for (p, g) in params.iter_mut().zip(grads) {
                    let m = &mut self.first[offset..offset + p.len()];
                    let v = &mut self.second[offset..offset + p.len()];
                    for i in 0..p.len() {
                        let grad = g[i] + wd * p[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * grad;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * grad * grad;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                    offset += p.len();
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    let vel = &mut self.first[offset..offset + p.len()];
                    for i in 0..p.len() {
                        let grad = g[i] + wd * p[i];
                        vel[i] = momentum * vel[i] + grad;
                        p[i] -= lr * vel[i];
                    }
                    offset += p.len();
                }
            }
        }
        Ok(())
    }
}

/// One Adam update on a single flat parameter vector at learning rate `lr`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), DiffnetError> {
    if !matches!(state.config.kind, OptimizerKind::Adam { .. }) {
        return Err(DiffnetError::InvalidSpec("optimizer state is not Adam".into()));
    }
    state.config.lr = lr;
    state.apply(&mut [params], &[grads])
}

/// `v <- momentum * v + grad; p <- p - lr * v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<(), DiffnetError> {
    if !matches!(state.config.kind, OptimizerKind::SgdMomentum { .. }) {
        return Err(DiffnetError::InvalidSpec("optimizer state is not SGD".into()));
    }
    state.config.lr = lr;
    state.config.kind = OptimizerKind::SgdMomentum { momentum };
    state.apply(&mut [params], &[grads])
}

pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Versioned textual dump of networks plus optional optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub schema: u32,
    pub nets: Vec<Mlp>,
    pub optimizer: Option<OptimizerState>,
}

impl NetCheckpoint {
    pub fn new(nets: Vec<Mlp>, optimizer: Option<OptimizerState>) -> Self {
        Self {
            schema: CHECKPOINT_SCHEMA,
            nets,
            optimizer,
        }
    }

    pub fn to_json(&self) -> Result<String, DiffnetError> {
        serde_json::to_string(self).map_err(|e| DiffnetError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, DiffnetError> {
        let ckpt: Self = serde_json::from_str(text).map_err(|e| DiffnetError::Checkpoint(e.to_string()))?;
        if ckpt.schema != CHECKPOINT_SCHEMA {
            return Err(DiffnetError::Checkpoint(format!(
                "unsupported schema {} (expected {CHECKPOINT_SCHEMA})",
                ckpt.schema
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffnetError> {
        std::fs::write(path, self.to_json()?).map_err(|e| DiffnetError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DiffnetError> {
        let text = std::fs::read_to_string(path).map_err(|e| DiffnetError::Checkpoint(e.to_string()))?;
        Self::from_json(&text)
    }
}
