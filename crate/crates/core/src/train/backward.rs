//! Reverse pass over a [`ComputationRecord`]: softmax cross-entropy, the L2
//! energy (or per-source norms), attention softmax, candidate GeLU/affine
//! maps and finally the chain back to the last reset.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{EdgeId, ModelConfig, PredictionMode, SiFuModel};
use crate::predict::attention_slot;
use crate::real::Real;
use crate::signal::gelu_grad;

use super::record::ComputationRecord;

/// Gradients for the parameters a sequence touched. Absent entries are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    d: usize,
    vocab_size: usize,
    pub node_bias: BTreeMap<u32, Vec<T>>,
    /// Length `max_seq_len - 1`; entries at or past `alpha_touched` are zero.
    pub alpha: Vec<T>,
    pub alpha_touched: usize,
    pub shared: Option<Vec<T>>,
    /// Keyed by dedicated slot.
    pub dedicated: BTreeMap<u32, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            d: config.node_dim,
            vocab_size: config.vocab_size,
            node_bias: BTreeMap::new(),
            alpha: vec![T::zero(); config.attention_len()],
            alpha_touched: 0,
            shared: None,
            dedicated: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Flat `[weight | bias]` gradient block of an edge, created on first use.
    pub fn edge_mut(&mut self, id: EdgeId) -> &mut Vec<T> {
        let len = self.d * self.d + self.d;
        match id {
            EdgeId::Shared => self.shared.get_or_insert_with(|| vec![T::zero(); len]),
            EdgeId::Dedicated(slot) => self.dedicated.entry(slot).or_insert_with(|| vec![T::zero(); len]),
        }
    }

    pub fn edge(&self, id: EdgeId) -> Option<&[T]> {
        match id {
            EdgeId::Shared => self.shared.as_deref(),
            EdgeId::Dedicated(slot) => self.dedicated.get(&slot).map(Vec::as_slice),
        }
    }

    pub fn node_mut(&mut self, node: u32) -> &mut Vec<T> {
        let d = self.d;
        self.node_bias.entry(node).or_insert_with(|| vec![T::zero(); d])
    }

    /// `self += other`, in key order.
    pub fn accumulate(&mut self, other: &Self) {
        fn add<T: Real>(dst: &mut [T], src: &[T]) {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a = *a + b;
            }
        }
        for (&node, g) in &other.node_bias {
            add(self.node_mut(node), g);
        }
        add(&mut self.alpha, &other.alpha);
        self.alpha_touched = self.alpha_touched.max(other.alpha_touched);
        if let Some(g) = &other.shared {
            add(self.edge_mut(EdgeId::Shared), g);
        }
        for (&slot, g) in &other.dedicated {
            add(self.edge_mut(EdgeId::Dedicated(slot)), g);
        }
    }

    pub fn scale(&mut self, factor: T) {
        let all = self
            .node_bias
            .values_mut()
            .chain(self.shared.iter_mut())
            .chain(self.dedicated.values_mut())
            .flat_map(|v| v.iter_mut())
            .chain(self.alpha.iter_mut());
        for g in all {
            *g = *g * factor;
        }
    }

    pub fn max_abs(&self) -> T {
        self.node_bias
            .values()
            .chain(self.shared.iter())
            .chain(self.dedicated.values())
            .flat_map(|v| v.iter())
            .chain(self.alpha.iter())
            .fold(T::zero(), |m, g| m.max(g.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.node_bias
            .values()
            .chain(self.shared.iter())
            .chain(self.dedicated.values())
            .flat_map(|v| v.iter())
            .chain(self.alpha.iter())
            .all(|g| g.is_finite())
    }
}

/// `grad[W] += gz ⊗ r`, `grad[b] += gz`, and `gr += Wᵀ·gz` when `gr` is given.
fn affine_backward<T: Real>(weight: &[T], r: &[T], gz: &[T], grad: &mut [T], gr: Option<&mut [T]>) {
    let d = r.len();
    let (gw, gb) = grad.split_at_mut(d * d);
    for i in 0..d {
        let g = gz[i];
        let row = &mut gw[i * d..(i + 1) * d];
        for (w, &x) in row.iter_mut().zip(r) {
            *w = *w + g * x;
        }
        gb[i] = gb[i] + g;
    }
    if let Some(gr) = gr {
        for i in 0..d {
            let g = gz[i];
            let row = &weight[i * d..(i + 1) * d];
            for (acc, &w) in gr.iter_mut().zip(row) {
                *acc = *acc + w * g;
            }
        }
    }
}

/// Exact gradients of `record.loss` with respect to every touched parameter.
#[allow(clippy::needless_range_loop)]
pub fn backward<T: Real>(model: &SiFuModel<T>, record: &ComputationRecord<T>) -> Result<Gradients<T>> {
    if record.revision != model.revision() {
        return Err(Error::StaleRecord { recorded: record.revision, current: model.revision() });
    }
    let config = model.config();
    let n = record.n;
    let d = record.chain.d;
    let m = record.nodes.len();
    let max = config.max_seq_len;
    let mut grads = Gradients::zeros(config);

    // candidate-signal gradients, per source and row
    let mut gc: Vec<Vec<T>> = record.fanouts.iter().map(|f| vec![T::zero(); f.rows() * d]).collect();
    let head_weight = T::one() / T::from_usize(record.heads.len()).unwrap_or_else(T::one);

    for head in &record.heads {
        let t = head.sources;
        let mut ga = vec![T::zero(); t];
        let ge: Vec<T> = head
            .probs
            .iter()
            .enumerate()
            .map(|(v, &p)| {
                let y = if v as u32 == head.target { T::one() } else { T::zero() };
                head_weight * (p - y)
            })
            .collect();
        match record.mode {
            PredictionMode::AggregateThenNorm => {
                let mut gs = vec![T::zero(); d];
                for v in 0..n {
                    let agg = &head.aggregate[v * d..(v + 1) * d];
                    let norm = head.energies[v];
                    if norm == T::zero() {
                        continue;
                    }
                    let scale = ge[v] / norm;
                    for (g, &s) in gs.iter_mut().zip(agg) {
                        *g = scale * s;
                    }
                    for k in 0..t {
                        let fan = &record.fanouts[k];
                        let row = fan.row_of(v);
                        let a = head.attention[k];
                        let sig = fan.signal(row);
                        let mut dot = T::zero();
                        for ((acc, &g), &c) in gc[k][row * d..(row + 1) * d].iter_mut().zip(&gs).zip(sig) {
                            *acc = *acc + a * g;
                            dot = dot + g * c;
                        }
                        ga[k] = ga[k] + dot;
                    }
                }
            }
            PredictionMode::SumOfNorms => {
                for k in 0..t {
                    let fan = &record.fanouts[k];
                    let a = head.attention[k];
                    for v in 0..n {
                        let row = fan.row_of(v);
                        let norm = fan.norm[row];
                        ga[k] = ga[k] + ge[v] * norm;
                        if norm == T::zero() {
                            continue;
                        }
                        let scale = ge[v] * a / norm;
                        for (acc, &c) in gc[k][row * d..(row + 1) * d].iter_mut().zip(fan.signal(row)) {
                            *acc = *acc + scale * c;
                        }
                    }
                }
            }
        }
        // softmax over the head's logits
        let mean: T = head.attention.iter().zip(&ga).map(|(&a, &g)| a * g).sum();
        for k in 0..t {
            let slot = attention_slot(k, max);
            grads.alpha[slot] = grads.alpha[slot] + head.attention[k] * (ga[k] - mean);
        }
        grads.alpha_touched = grads.alpha_touched.max(attention_slot(t - 1, max) + 1);
    }

    // candidate fan-out: GeLU, then the affine edge map
    let mut gr = vec![T::zero(); m * d];
    let mut gz = vec![T::zero(); d];
    for k in 0..m {
        let fan = &record.fanouts[k];
        let r = record.chain.signal(k);
        for row in 0..fan.rows() {
            let z = &fan.z[row * d..(row + 1) * d];
            for ((g, &c), &x) in gz.iter_mut().zip(&gc[k][row * d..(row + 1) * d]).zip(z) {
                *g = c * gelu_grad(x);
            }
            let id = fan.row_edge[row];
            let weight = model.edges().params(id).weight;
            affine_backward(weight, r, &gz, grads.edge_mut(id), Some(&mut gr[k * d..(k + 1) * d]));
        }
    }

    // chain, newest position first; resets stop the flow
    for k in (0..m).rev() {
        let z = &record.chain.z[k * d..(k + 1) * d];
        for ((g, &x), &up) in gz.iter_mut().zip(z).zip(&gr[k * d..(k + 1) * d]) {
            *g = up * gelu_grad(x);
        }
        match record.chain.edge[k] {
            None => {
                for (b, &g) in grads.node_mut(record.nodes[k]).iter_mut().zip(&gz) {
                    *b = *b + g;
                }
            }
            Some(id) => {
                let weight = model.edges().params(id).weight;
                let (before, _) = gr.split_at_mut(k * d);
                let prev = record.chain.signal(k - 1);
                affine_backward(weight, prev, &gz, grads.edge_mut(id), Some(&mut before[(k - 1) * d..]));
            }
        }
    }
    Ok(grads)
}
