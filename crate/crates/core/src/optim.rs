//! Mini-batch SGD with classical momentum and L2-coupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_per_fold: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.8,
            weight_decay: 1e-6,
            batch_size: 24,
            epochs_per_fold: 100,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    pub params: Vec<Tensor>,
    pub velocities: Vec<Tensor>,
}

impl ParamState {
    pub fn new(params: Vec<Tensor>) -> Self {
        let velocities = params.iter().map(|p| p.map(|_| 0.0)).collect();
        ParamState { params, velocities }
    }

    pub fn reset_velocities(&mut self) {
        for v in &mut self.velocities {
            v.data_mut().fill(0.0);
        }
    }
}

/// `v ← μ·v − η·(g + λ·w)`, then `w ← w + v`, for weights and biases alike.
pub fn sgd_step(state: &mut ParamState, grads: &[Tensor], cfg: &SgdConfig) -> Result<()> {
    if grads.len() != state.params.len()
        || grads.iter().zip(&state.params).any(|(g, p)| g.shape() != p.shape())
    {
        return Err(Error::DimensionMismatch(
            "gradient list does not match the parameter shapes".into(),
        ));
    }
    let ParamState { params, velocities } = state;
    for ((w, v), g) in params.iter_mut().zip(velocities.iter_mut()).zip(grads) {
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = cfg.momentum * *vi - cfg.lr * (gi + cfg.weight_decay * *wi);
            *wi += *vi;
        }
    }
    Ok(())
}
