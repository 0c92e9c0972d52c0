use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes `upstream` where the pre-activation was positive.
pub fn relu_backward(pre_activation: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if pre_activation.shape() != upstream.shape() {
        return Err(Error::DimensionMismatch(format!(
            "relu upstream {:?} vs activation {:?}",
            upstream.shape(),
            pre_activation.shape()
        )));
    }
    let data = pre_activation
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(upstream.shape().to_vec(), data)
}

/// Per-element multiplier: 0 for dropped units, `1/(1-p)` for survivors.
#[derive(Debug, Clone)]
pub struct DropoutMask(Option<Vec<f64>>);

impl DropoutMask {
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        match &self.0 {
            None => Ok(t.clone()),
            Some(mask) => {
                if mask.len() != t.len() {
                    return Err(Error::DimensionMismatch("dropout mask size differs from gradient".into()));
                }
                let data = t.data().iter().zip(mask).map(|(v, m)| v * m).collect();
                Tensor::new(t.shape().to_vec(), data)
            }
        }
    }

    pub fn kept_fraction(&self) -> Option<f64> {
        self.0
            .as_ref()
            .map(|m| m.iter().filter(|&&v| v != 0.0).count() as f64 / m.len() as f64)
    }
}

/// Inverted dropout. Evaluation mode and `p = 0` are the identity.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, rng: &mut R, training: bool) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("dropout probability must be in [0, 1), got {p}")));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), DropoutMask(None)));
    }
    let keep_scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
        .collect();
    let mask = DropoutMask(Some(mask));
    let y = mask.apply(x)?;
    Ok((y, mask))
}

/// Row-wise softmax of an N×M matrix with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let [_, m] = logits.dims2()?;
    if m < 2 {
        return Err(Error::InvalidConfig(format!("softmax needs at least 2 classes, got {m}")));
    }
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(m) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Vector-Jacobian product of softmax: `p ⊙ (g − Σ g·p)` per row.
pub fn softmax_backward(probs: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let [_, m] = probs.dims2()?;
    if probs.shape() != upstream.shape() {
        return Err(Error::DimensionMismatch("softmax upstream shape differs from output".into()));
    }
    let mut out = Vec::with_capacity(probs.len());
    for (p, g) in probs.data().chunks(m).zip(upstream.data().chunks(m)) {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        out.extend(p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)));
    }
    Tensor::new(probs.shape().to_vec(), out)
}

/// Gradient of mean cross-entropy with respect to the logits: `(p − y) / N`.
pub fn softmax_cross_entropy_grad(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let [n, m] = probs.dims2()?;
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    let mut g = probs.data().to_vec();
    for (row, &label) in g.chunks_mut(m).zip(labels) {
        if label >= m {
            return Err(Error::LabelOutOfRange { label, classes: m });
        }
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    Tensor::new(vec![n, m], g)
}
