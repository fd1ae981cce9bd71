//! Autoregressive generation with a running-softmax cache.
//!
//! Each accepted token costs one chain step plus one candidate fan-out from
//! its position; the attention-weighted aggregate is kept as an
//! unnormalized numerator `N_v = Σ_k exp(α_k)·r_k^(v)` and denominator
//! `Z = Σ_k exp(α_k)`, so per-token work and cache size do not grow with the
//! context. Attention logits stay within ±20 (clamped by the optimizer), so
//! the unshifted exponentials cannot overflow.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PredictionMode, SiFuModel};
use crate::predict::{argmax, attention_slot, sample_from_energies, SourceFanout};
use crate::real::Real;
use crate::signal::{affine_into, gelu_into, initial_preact_into, is_reset_position, write_positional_encoding};

/// Running state for scoring the next token of one stream.
#[derive(Debug, Clone)]
pub struct PredictionCache<T> {
    mode: PredictionMode,
    n: usize,
    d: usize,
    /// `n×d` attention-weighted signal sums (aggregate mode).
    numer: Vec<T>,
    /// `n` attention-weighted energy sums (sum-of-norms mode).
    numer_norm: Vec<T>,
    denom: T,
    len: usize,
    last_node: u32,
    last_signal: Vec<T>,
    /// Shared-edge result of the newest source, reused by all candidates on the shared edge.
    shared_signal: Option<Vec<T>>,
    shared_hits: u64,
    fanout_edges: u64,
}

impl<T: Real> PredictionCache<T> {
    pub fn new(model: &SiFuModel<T>) -> Self {
        let n = model.vocab_size();
        let d = model.dim();
        Self {
            mode: model.config().prediction_mode,
            n,
            d,
            numer: vec![T::zero(); n * d],
            numer_norm: vec![T::zero(); n],
            denom: T::zero(),
            len: 0,
            last_node: 0,
            last_signal: vec![T::zero(); d],
            shared_signal: None,
            shared_hits: 0,
            fanout_edges: 0,
        }
    }

    /// Tokens accepted so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn denominator(&self) -> T {
        self.denom
    }

    pub fn shared_signal(&self) -> Option<&[T]> {
        self.shared_signal.as_deref()
    }

    /// Fraction of candidate edges, over all fan-outs so far, that hit the shared edge.
    pub fn shared_hit_fraction(&self) -> f64 {
        if self.fanout_edges == 0 {
            0.0
        } else {
            self.shared_hits as f64 / self.fanout_edges as f64
        }
    }

    /// Appends a token: advances the chain and folds its fan-out into the accumulators.
    pub fn push(&mut self, model: &SiFuModel<T>, node: u32) -> Result<()> {
        model.check_node(node)?;
        let d = self.d;
        let pos = self.len;
        let mut pe = vec![T::zero(); d];
        let mut z = vec![T::zero(); d];
        if is_reset_position(pos, model.config().reset_depth) {
            write_positional_encoding(pos, &mut pe);
            initial_preact_into(model.node_bias(node), &pe, &mut z);
        } else {
            write_positional_encoding(pos - 1, &mut pe);
            let id = model.edges().resolve(self.last_node, node);
            affine_into(model.edges().params(id), &self.last_signal, &pe, &mut z);
        }
        gelu_into(&z, &mut self.last_signal);
        self.last_node = node;

        write_positional_encoding(pos, &mut pe);
        let fan = SourceFanout::compute(model, node, &self.last_signal, &pe, true);
        let weight = model.alpha()[attention_slot(pos, model.config().max_seq_len)].exp();
        match self.mode {
            PredictionMode::AggregateThenNorm => {
                for v in 0..self.n {
                    let sig = fan.signal(fan.row_of(v));
                    for (acc, &x) in self.numer[v * d..(v + 1) * d].iter_mut().zip(sig) {
                        *acc = *acc + weight * x;
                    }
                }
            }
            PredictionMode::SumOfNorms => {
                for (v, acc) in self.numer_norm.iter_mut().enumerate() {
                    *acc = *acc + weight * fan.norm[fan.row_of(v)];
                }
            }
        }
        self.denom = self.denom + weight;
        self.shared_signal =
            (0..fan.rows()).find(|&row| fan.row_edge[row].is_shared()).map(|row| fan.signal(row).to_vec());
        self.shared_hits += fan.shared_hits() as u64;
        self.fanout_edges += self.n as u64;
        self.len += 1;
        Ok(())
    }

    /// Candidate energies for the next position.
    pub fn energies(&self) -> Vec<T> {
        if self.len == 0 {
            return vec![T::zero(); self.n];
        }
        let d = self.d;
        match self.mode {
            PredictionMode::AggregateThenNorm => (0..self.n)
                .map(|v| {
                    let sq: T = self.numer[v * d..(v + 1) * d].iter().map(|&x| x * x).sum();
                    sq.sqrt() / self.denom
                })
                .collect(),
            PredictionMode::SumOfNorms => self.numer_norm.iter().map(|&x| x / self.denom).collect(),
        }
    }

    /// Attention weights over the current context, recomputed from the logits.
    pub fn attention(&self, model: &SiFuModel<T>) -> Vec<f64> {
        let max = model.config().max_seq_len;
        let denom = self.denom.as_f64();
        (0..self.len).map(|k| model.alpha()[attention_slot(k, max)].exp().as_f64() / denom).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u32,
    pub energy: f64,
}

/// One generated token and the evidence behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub context_len: usize,
    pub token_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    /// Highest-energy candidates, descending.
    pub top_k: Vec<Candidate>,
    pub attention: Vec<f64>,
    pub shared_edge_hit_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub steps: Vec<TraceStep>,
}

#[derive(Debug, Clone, Copy)]
pub struct GenerateOptions {
    pub decoding: Decoding,
    /// Candidates recorded per trace step.
    pub top_k: usize,
    /// Record attention vectors and top-k lists (costs O(context) per token).
    pub trace: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self { decoding: Decoding::Greedy, top_k: 5, trace: true }
    }
}

/// Highest `k` candidates, descending by energy, ties by lower id.
pub fn top_k<T: Real>(energies: &[T], k: usize) -> Vec<Candidate> {
    let mut order: Vec<usize> = (0..energies.len()).collect();
    order.sort_by(|&a, &b| energies[b].partial_cmp(&energies[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.into_iter().take(k).map(|i| Candidate { id: i as u32, energy: energies[i].as_f64() }).collect()
}

/// Continues `prompt` by `max_new` tokens. Returns the full sequence
/// (prompt first) and one trace step per generated token.
pub fn generate<T: Real>(
    model: &SiFuModel<T>,
    prompt: &[u32],
    max_new: usize,
    options: GenerateOptions,
) -> Result<(Vec<u32>, GenerationTrace)> {
    if prompt.is_empty() {
        return Err(Error::SequenceLength { len: 0, min: 1, max: usize::MAX });
    }
    for &id in prompt {
        model.check_node(id)?;
    }
    if let Decoding::Sample { temperature, .. } = options.decoding {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Temperature(temperature));
        }
    }
    let mut rng = match options.decoding {
        Decoding::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Decoding::Greedy => None,
    };
    let mut cache = PredictionCache::new(model);
    for &id in prompt {
        cache.push(model, id)?;
    }
    let mut tokens = prompt.to_vec();
    let mut trace = GenerationTrace::default();
    for step in 0..max_new {
        let energies = cache.energies();
        let next = match (options.decoding, rng.as_mut()) {
            (Decoding::Sample { temperature, .. }, Some(rng)) => {
                sample_from_energies(&energies, temperature, rng)? as u32
            }
            _ => argmax(&energies) as u32,
        };
        if options.trace {
            trace.steps.push(TraceStep {
                step,
                context_len: cache.len(),
                token_id: next,
                token: None,
                top_k: top_k(&energies, options.top_k),
                attention: cache.attention(model),
                shared_edge_hit_fraction: cache.shared_hit_fraction(),
            });
        }
        tokens.push(next);
        cache.push(model, next)?;
    }
    Ok((tokens, trace))
}
