//! First-order parameter optimizers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Update rule selector with its hyper-coefficients.
#[derive(Debug, Clone, PartialEq)]
pub enum OptKind {
    SgdMomentum { momentum: f64 },
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

struct Slot {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Moment buffers plus step bookkeeping for a fixed parameter list.
/// Buffers are keyed by parameter name and created on first use.
pub struct OptimizerState {
    pub kind: OptKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    slots: Vec<Slot>,
    /// (name prefix, factor) pairs; the first matching prefix scales the
    /// learning rate for that parameter. Factor 0 freezes it.
    pub lr_scales: Vec<(String, f64)>,
}

impl OptimizerState {
    pub fn new(kind: OptKind, lr: f64, weight_decay: f64) -> OptimizerState {
        OptimizerState { kind, lr, weight_decay, step: 0, slots: Vec::new(), lr_scales: Vec::new() }
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> OptimizerState {
        OptimizerState::new(OptKind::SgdMomentum { momentum }, lr, weight_decay)
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> OptimizerState {
        OptimizerState::new(OptKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 }, lr, weight_decay)
    }

    fn scale_for(&self, name: &str) -> f64 {
        for (prefix, s) in &self.lr_scales {
            if name.starts_with(prefix.as_str()) {
                return *s;
            }
        }
        1.0
    }

    fn slot_index(&mut self, name: &str, len: usize) -> usize {
        if let Some(i) = self.slots.iter().position(|s| s.name == name) {
            return i;
        }
        self.slots.push(Slot { name: name.to_string(), m: vec![0.0; len], v: vec![0.0; len] });
        self.slots.len() - 1
    }

    /// Applies one update over `params` using each tensor's accumulated
    /// gradient (missing gradient = zero). Steps the counter exactly once.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        self.step += 1;
        let t = self.step;
        for (name, p) in params {
            let scale = self.scale_for(name);
            if scale == 0.0 {
                continue;
            }
            let lr = self.lr * scale;
            let grad = match p.grad() {
                Some(g) => g,
                None => vec![0.0; p.numel()],
            };
            if grad.len() != p.numel() {
                return Err(Error::ShapeMismatch { op: "optimizer_step", lhs: p.shape(), rhs: vec![grad.len()] });
            }
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { what: format!("parameter {name}"), step: Some(t as usize) });
            }
            let mut data = p.data();
            let idx = self.slot_index(name, data.len());
            match self.kind {
                OptKind::SgdMomentum { momentum } => {
                    let slot = &mut self.slots[idx];
                    for i in 0..data.len() {
                        let g = grad[i] + self.weight_decay * data[i];
                        slot.m[i] = momentum * slot.m[i] + g;
                        data[i] -= lr * slot.m[i];
                    }
                }
                OptKind::AdamW { beta1, beta2, eps } => {
                    let slot = &mut self.slots[idx];
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - beta2.powi(t as i32);
                    for i in 0..data.len() {
                        let g = grad[i];
                        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                        let mhat = slot.m[i] / bc1;
                        let vhat = slot.v[i] / bc2;
                        data[i] -= lr * (mhat / (vhat.sqrt() + eps) + self.weight_decay * data[i]);
                    }
                }
            }
            p.set_data(&data)?;
        }
        Ok(())
    }
}

/// Cosine decay from `base` to `base*floor_frac` over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64, floor_frac: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    let lo = base * floor_frac;
    lo + 0.5 * (base - lo) * (1.0 + (std::f64::consts::PI * t).cos())
}
