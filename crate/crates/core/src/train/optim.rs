//! AdamW with decoupled weight decay and bias correction.
//!
//! Sparse-aware: only blocks present in [`Gradients`] are decayed and updated,
//! and only their moments advance. Bias correction uses the global step.

use crate::error::{Error, Result};
use crate::model::{EdgeId, SiFuModel};
use crate::real::Real;

use super::backward::Gradients;

/// Attention logits are clamped to this magnitude after every step.
pub const ALPHA_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moments laid out like the model's parameter blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub node_m: Vec<T>,
    pub node_v: Vec<T>,
    pub alpha_m: Vec<T>,
    pub alpha_v: Vec<T>,
    pub shared_m: Vec<T>,
    pub shared_v: Vec<T>,
    pub dedicated_m: Vec<T>,
    pub dedicated_v: Vec<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(model: &SiFuModel<T>, config: AdamWConfig) -> Self {
        let c = model.config();
        let node = c.vocab_size * c.node_dim;
        let alpha = c.attention_len();
        let edge = c.edge_len();
        let dedicated = model.edges().dedicated_count() * edge;
        Self {
            config,
            step: 0,
            node_m: vec![T::zero(); node],
            node_v: vec![T::zero(); node],
            alpha_m: vec![T::zero(); alpha],
            alpha_v: vec![T::zero(); alpha],
            shared_m: vec![T::zero(); edge],
            shared_v: vec![T::zero(); edge],
            dedicated_m: vec![T::zero(); dedicated],
            dedicated_v: vec![T::zero(); dedicated],
        }
    }

    pub fn matches(&self, model: &SiFuModel<T>) -> bool {
        let fresh = Self::new(model, self.config);
        [
            (self.node_m.len(), fresh.node_m.len()),
            (self.node_v.len(), fresh.node_v.len()),
            (self.alpha_m.len(), fresh.alpha_m.len()),
            (self.alpha_v.len(), fresh.alpha_v.len()),
            (self.shared_m.len(), fresh.shared_m.len()),
            (self.shared_v.len(), fresh.shared_v.len()),
            (self.dedicated_m.len(), fresh.dedicated_m.len()),
            (self.dedicated_v.len(), fresh.dedicated_v.len()),
        ]
        .iter()
        .all(|(a, b)| a == b)
    }

    /// Same state in another scalar type.
    pub fn cast<U: Real>(&self) -> OptimizerState<U> {
        use crate::model::cast_vec;
        OptimizerState {
            config: self.config,
            step: self.step,
            node_m: cast_vec(&self.node_m),
            node_v: cast_vec(&self.node_v),
            alpha_m: cast_vec(&self.alpha_m),
            alpha_v: cast_vec(&self.alpha_v),
            shared_m: cast_vec(&self.shared_m),
            shared_v: cast_vec(&self.shared_v),
            dedicated_m: cast_vec(&self.dedicated_m),
            dedicated_v: cast_vec(&self.dedicated_v),
        }
    }
}

struct StepConsts<T> {
    lr: T,
    decay: T,
    beta1: T,
    beta2: T,
    one_minus_beta1: T,
    one_minus_beta2: T,
    bias1: T,
    bias2: T,
    eps: T,
}

fn update_block<T: Real>(params: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], k: &StepConsts<T>) {
    for i in 0..params.len() {
        let g = grad[i];
        let p = params[i] * k.decay;
        m[i] = k.beta1 * m[i] + k.one_minus_beta1 * g;
        v[i] = k.beta2 * v[i] + k.one_minus_beta2 * g * g;
        let m_hat = m[i] / k.bias1;
        let v_hat = v[i] / k.bias2;
        params[i] = p - k.lr * m_hat / (v_hat.sqrt() + k.eps);
    }
}

/// One AdamW update at learning rate `lr` (the schedule's value for this step).
pub fn adamw_step<T: Real>(
    model: &mut SiFuModel<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let cfg = model.config().clone();
    if grads.dim() != cfg.node_dim || grads.vocab_size() != cfg.vocab_size || grads.alpha.len() != cfg.attention_len() {
        return Err(Error::Shape("gradients do not match the model dimensions".into()));
    }
    if !state.matches(model) {
        return Err(Error::Shape("optimizer state does not match the model layout".into()));
    }
    let edge_len = cfg.edge_len();
    let dedicated_count = model.edges().dedicated_count();
    if grads.dedicated.keys().any(|&slot| slot as usize >= dedicated_count)
        || grads.node_bias.keys().any(|&v| v as usize >= cfg.vocab_size)
    {
        return Err(Error::Shape("gradient refers to a parameter the model does not have".into()));
    }

    state.step += 1;
    let h = state.config;
    let t = state.step as i32;
    let k = StepConsts {
        lr: T::lit(lr),
        decay: T::lit(1.0 - lr * h.weight_decay),
        beta1: T::lit(h.beta1),
        beta2: T::lit(h.beta2),
        one_minus_beta1: T::lit(1.0 - h.beta1),
        one_minus_beta2: T::lit(1.0 - h.beta2),
        bias1: T::lit(1.0 - h.beta1.powi(t)),
        bias2: T::lit(1.0 - h.beta2.powi(t)),
        eps: T::lit(h.eps),
    };

    let d = cfg.node_dim;
    let (node_bias, edges, alpha) = model.parts_mut();
    for (&v, g) in &grads.node_bias {
        let r = v as usize * d..(v as usize + 1) * d;
        update_block(&mut node_bias[r.clone()], g, &mut state.node_m[r.clone()], &mut state.node_v[r], &k);
    }
    let touched = grads.alpha_touched;
    update_block(
        &mut alpha[..touched],
        &grads.alpha[..touched],
        &mut state.alpha_m[..touched],
        &mut state.alpha_v[..touched],
        &k,
    );
    let limit = T::lit(ALPHA_CLAMP);
    for a in alpha.iter_mut() {
        *a = a.max(-limit).min(limit);
    }
    if cfg.shared_edge_trainable {
        if let Some(g) = &grads.shared {
            update_block(edges.block_mut(EdgeId::Shared), g, &mut state.shared_m, &mut state.shared_v, &k);
        }
    }
    for (&slot, g) in &grads.dedicated {
        let r = slot as usize * edge_len..(slot as usize + 1) * edge_len;
        update_block(
            edges.block_mut(EdgeId::Dedicated(slot)),
            g,
            &mut state.dedicated_m[r.clone()],
            &mut state.dedicated_v[r],
            &k,
        );
    }
    Ok(())
}
