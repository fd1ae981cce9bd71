//! Candidate scoring: every context position fans its signal out to every
//! vocabulary node, the results are attention-weighted, and the candidate with
//! the highest energy wins.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{EdgeId, PredictionMode, SiFuModel};
use crate::real::Real;
use crate::signal::{affine_into, energy, gelu_into, write_positional_encoding, SignalState};

/// Attention logit slot used by source position `k`. Positions past the
/// trained range reuse the last logit.
#[inline]
pub fn attention_slot(k: usize, max_seq_len: usize) -> usize {
    k.min(max_seq_len - 2)
}

/// Max-shifted softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax over the first `len - 1` attention logits.
pub fn attention_weights<T: Real>(model: &SiFuModel<T>, len: usize) -> Result<Vec<T>> {
    let max = model.config().max_seq_len;
    if len < 2 || len > max {
        return Err(Error::SequenceLength { len, min: 2, max });
    }
    Ok(softmax(&model.alpha()[..len - 1]))
}

/// Attention over a context of `sources` positions, any length.
pub(crate) fn context_attention<T: Real>(model: &SiFuModel<T>, sources: usize) -> Vec<T> {
    let max = model.config().max_seq_len;
    let logits: Vec<T> = (0..sources).map(|k| model.alpha()[attention_slot(k, max)]).collect();
    softmax(&logits)
}

/// Signals one source position sends to every candidate node.
///
/// Rows hold distinct edge results; `cand_row[v]` names the row candidate `v`
/// reads. With deduplication on, all shared-edge candidates read one row.
#[derive(Debug, Clone)]
pub(crate) struct SourceFanout<T> {
    pub d: usize,
    pub z: Vec<T>,
    pub c: Vec<T>,
    pub norm: Vec<T>,
    pub row_edge: Vec<EdgeId>,
    pub cand_row: Vec<u32>,
}

impl<T: Real> SourceFanout<T> {
    pub fn compute(model: &SiFuModel<T>, src: u32, r: &[T], pe: &[T], dedupe: bool) -> Self {
        let n = model.vocab_size();
        let d = model.dim();
        let edges = model.edges();
        let mut out = SourceFanout {
            d,
            z: Vec::new(),
            c: Vec::new(),
            norm: Vec::new(),
            row_edge: Vec::new(),
            cand_row: Vec::with_capacity(n),
        };
        let mut shared_row: Option<u32> = None;
        let mut z = vec![T::zero(); d];
        let mut c = vec![T::zero(); d];
        for v in 0..n as u32 {
            let id = edges.resolve(src, v);
            if dedupe && id.is_shared() {
                if let Some(row) = shared_row {
                    out.cand_row.push(row);
                    continue;
                }
            }
            affine_into(edges.params(id), r, pe, &mut z);
            gelu_into(&z, &mut c);
            let row = out.row_edge.len() as u32;
            out.z.extend_from_slice(&z);
            out.c.extend_from_slice(&c);
            out.norm.push(energy(&c));
            out.row_edge.push(id);
            out.cand_row.push(row);
            if id.is_shared() {
                shared_row = Some(row);
            }
        }
        out
    }

    #[inline]
    pub fn row_of(&self, v: usize) -> usize {
        self.cand_row[v] as usize
    }

    #[inline]
    pub fn signal(&self, row: usize) -> &[T] {
        &self.c[row * self.d..(row + 1) * self.d]
    }

    pub fn rows(&self) -> usize {
        self.row_edge.len()
    }

    pub fn shared_hits(&self) -> usize {
        self.cand_row.iter().filter(|&&row| self.row_edge[row as usize].is_shared()).count()
    }
}

/// Energies of every candidate given per-source fan-outs and attention weights.
/// Also returns the aggregated signals (aggregate mode only; empty otherwise).
pub(crate) fn score_candidates<T: Real>(
    mode: PredictionMode,
    n: usize,
    d: usize,
    attention: &[T],
    fanouts: &[SourceFanout<T>],
) -> (Vec<T>, Vec<T>) {
    match mode {
        PredictionMode::AggregateThenNorm => {
            let mut agg = vec![T::zero(); n * d];
            for (a, fan) in attention.iter().zip(fanouts) {
                for v in 0..n {
                    let sig = fan.signal(fan.row_of(v));
                    for (s, &x) in agg[v * d..(v + 1) * d].iter_mut().zip(sig) {
                        *s = *s + *a * x;
                    }
                }
            }
            let energies = (0..n).map(|v| energy(&agg[v * d..(v + 1) * d])).collect();
            (energies, agg)
        }
        PredictionMode::SumOfNorms => {
            let mut energies = vec![T::zero(); n];
            for (a, fan) in attention.iter().zip(fanouts) {
                for (v, e) in energies.iter_mut().enumerate() {
                    *e = *e + *a * fan.norm[fan.row_of(v)];
                }
            }
            (energies, Vec::new())
        }
    }
}

fn validate_states<T: Real>(model: &SiFuModel<T>, states: &[SignalState<T>]) -> Result<()> {
    if states.is_empty() {
        return Err(Error::SequenceLength { len: 0, min: 1, max: model.config().max_seq_len - 1 });
    }
    for s in states {
        model.check_node(s.node)?;
        if s.r.len() != model.dim() {
            return Err(Error::Shape(format!("signal of length {} for d = {}", s.r.len(), model.dim())));
        }
    }
    Ok(())
}

/// Energy of every candidate node given the chain states of the context.
///
/// Each state's position selects both its positional encoding and its
/// attention logit. Contexts longer than the trained range reuse the last logit.
pub fn candidate_energies<T: Real>(model: &SiFuModel<T>, states: &[SignalState<T>]) -> Result<Vec<T>> {
    candidate_energies_with(model, states, true)
}

/// As [`candidate_energies`], with shared-edge deduplication switchable.
pub fn candidate_energies_with<T: Real>(
    model: &SiFuModel<T>,
    states: &[SignalState<T>],
    dedupe: bool,
) -> Result<Vec<T>> {
    validate_states(model, states)?;
    let d = model.dim();
    let mut pe = vec![T::zero(); d];
    let fanouts: Vec<SourceFanout<T>> = states
        .iter()
        .map(|s| {
            write_positional_encoding(s.pos, &mut pe);
            SourceFanout::compute(model, s.node, &s.r, &pe, dedupe)
        })
        .collect();
    let attention = context_attention(model, states.len());
    let (energies, _) = score_candidates(model.config().prediction_mode, model.vocab_size(), d, &attention, &fanouts);
    Ok(energies)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_next<T: Real>(model: &SiFuModel<T>, states: &[SignalState<T>]) -> Result<u32> {
    Ok(argmax(&candidate_energies(model, states)?) as u32)
}

/// Draws an index from `softmax(energies / temperature)`.
pub fn sample_from_energies<T: Real, R: Rng + ?Sized>(energies: &[T], temperature: f64, rng: &mut R) -> Result<usize> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Temperature(temperature));
    }
    let scaled: Vec<f64> = energies.iter().map(|e| e.as_f64() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return Ok(i);
        }
        u -= w;
    }
    // rounding left u at the top edge; fall back to the last positive weight
    Ok(weights.iter().rposition(|&w| w > 0.0).unwrap_or(0))
}

pub fn sample_next<T: Real, R: Rng + ?Sized>(
    model: &SiFuModel<T>,
    states: &[SignalState<T>],
    temperature: f64,
    rng: &mut R,
) -> Result<u32> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Temperature(temperature));
    }
    let energies = candidate_energies(model, states)?;
    Ok(sample_from_energies(&energies, temperature, rng)? as u32)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{all_pairs, ModelConfig};
    use crate::signal::{chain_forward, gelu, positional_encoding};

    #[test]
    fn attention_examples() {
        let mut model = SiFuModel::<f64>::zeroed(ModelConfig::new(3, 2, 6), &BTreeSet::new()).unwrap();
        assert_eq!(attention_weights(&model, 5).unwrap(), vec![0.25; 4]);
        assert_eq!(attention_weights(&model, 2).unwrap(), vec![1.0]);
        model.alpha_mut()[0] = 3f64.ln();
        let w = attention_weights(&model, 3).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
        assert!(attention_weights(&model, 1).is_err());
        assert!(attention_weights(&model, 7).is_err());
    }

    /// n = 2, d = 1, one source at position 0 (PE = 0) with signal 1:
    /// candidate 0 gets weight 2 (GeLU(2)), candidate 1 weight 1 (GeLU(1)).
    fn two_candidate_model(mode: PredictionMode) -> SiFuModel<f64> {
        let config = ModelConfig::new(2, 1, 4).with_mode(mode);
        let mut model = SiFuModel::zeroed(config, &[(0, 0)].into_iter().collect()).unwrap();
        model.edges_mut().block_mut(EdgeId::Dedicated(0))[0] = 2.0;
        model.edges_mut().block_mut(EdgeId::Shared)[0] = 1.0;
        model
    }

    #[test]
    fn two_candidate_energies() {
        for mode in [PredictionMode::AggregateThenNorm, PredictionMode::SumOfNorms] {
            let model = two_candidate_model(mode);
            let states = vec![SignalState { r: vec![1.0], pos: 0, node: 0 }];
            let e = candidate_energies(&model, &states).unwrap();
            // brute force over both candidates
            let oracle = [gelu(2.0f64), gelu(1.0f64)];
            assert!((e[0] - oracle[0]).abs() < 1e-12 && (e[1] - oracle[1]).abs() < 1e-12);
            assert!((e[0] - 1.9545).abs() < 1e-4 && (e[1] - 0.8413).abs() < 1e-4);
            assert_eq!(predict_next(&model, &states).unwrap(), 0);
        }
    }

    #[test]
    fn null_model_ties_to_lowest_id() {
        let mut model = SiFuModel::<f64>::zeroed(ModelConfig::new(4, 2, 4), &BTreeSet::new()).unwrap();
        let pe = positional_encoding::<f64>(0, 2);
        let block = model.edges_mut().block_mut(EdgeId::Shared);
        block[4] = -pe[0];
        block[5] = -pe[1];
        let states = vec![SignalState { r: vec![0.3, -0.7], pos: 0, node: 2 }];
        let e = candidate_energies(&model, &states).unwrap();
        assert!(e.iter().all(|&x| x == 0.0));
        assert_eq!(predict_next(&model, &states).unwrap(), 0);
        assert_eq!(argmax(&[1.0f64, 1.0]), 0);
        assert_eq!(argmax(&[1.9545f64, 0.8413]), 0);
    }

    fn random_model(n: usize, d: usize, seed: u64, dense: bool) -> SiFuModel<f64> {
        let config = ModelConfig::new(n, d, 8).with_seed(seed);
        let pairs = if dense {
            all_pairs(n)
        } else {
            all_pairs(n).into_iter().filter(|(s, t)| (s + 2 * t + seed as u32).is_multiple_of(3)).collect()
        };
        let mut model = SiFuModel::init(config, &pairs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in model.alpha_mut() {
            *a = rng.gen_range(-1.0..1.0);
        }
        for v in 0..n as u32 {
            for b in model.node_bias_mut(v) {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        model
    }

    /// Direct transcription of the scoring rule: no dedupe, no shared buffers.
    fn brute_force_energies(model: &SiFuModel<f64>, states: &[SignalState<f64>]) -> Vec<f64> {
        let n = model.vocab_size();
        let d = model.dim();
        let logits: Vec<f64> = (0..states.len()).map(|k| model.alpha()[k]).collect();
        let z: f64 = logits.iter().map(|x| x.exp()).sum();
        let attn: Vec<f64> = logits.iter().map(|x| x.exp() / z).collect();
        (0..n as u32)
            .map(|v| {
                let mut agg = vec![0.0; d];
                let mut sum_norms = 0.0;
                for (k, s) in states.iter().enumerate() {
                    let edge = model.edge_lookup(s.node, v).unwrap().params;
                    let pe = positional_encoding::<f64>(s.pos, d);
                    let sig: Vec<f64> = (0..d)
                        .map(|i| {
                            let dot: f64 = (0..d).map(|j| edge.weight[i * d + j] * s.r[j]).sum();
                            gelu(dot + edge.bias[i] + pe[i])
                        })
                        .collect();
                    for i in 0..d {
                        agg[i] += attn[k] * sig[i];
                    }
                    sum_norms += attn[k] * sig.iter().map(|x| x * x).sum::<f64>().sqrt();
                }
                match model.config().prediction_mode {
                    PredictionMode::AggregateThenNorm => agg.iter().map(|x| x * x).sum::<f64>().sqrt(),
                    PredictionMode::SumOfNorms => sum_norms,
                }
            })
            .collect()
    }

    #[test]
    fn modes_agree_for_a_single_source() {
        let mut model = random_model(5, 3, 11, false);
        let states = chain_forward(&model, &[2]).unwrap();
        let agg = candidate_energies(&model, &states).unwrap();
        model.set_prediction_mode(PredictionMode::SumOfNorms);
        let sum = candidate_energies(&model, &states).unwrap();
        for (a, b) in agg.iter().zip(&sum) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn matches_brute_force_oracle(
            n in 2usize..=16,
            d in 1usize..=4,
            seed in 0u64..1000,
            len in 1usize..=7,
            sum_mode in any::<bool>(),
            dense in any::<bool>(),
        ) {
            let mut model = random_model(n, d, seed, dense);
            if sum_mode {
                model.set_prediction_mode(PredictionMode::SumOfNorms);
            }
            let nodes: Vec<u32> = (0..len).map(|i| ((seed as usize + 3 * i) % n) as u32).collect();
            let states = chain_forward(&model, &nodes).unwrap();
            let fast = candidate_energies(&model, &states).unwrap();
            let slow = brute_force_energies(&model, &states);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
            prop_assert_eq!(argmax(&fast), argmax(&slow));
        }

        #[test]
        fn dedupe_never_changes_energies(seed in 0u64..1000, len in 1usize..=7) {
            let model = random_model(9, 3, seed, false);
            let nodes: Vec<u32> = (0..len).map(|i| ((seed as usize + i * 5) % 9) as u32).collect();
            let states = chain_forward(&model, &nodes).unwrap();
            let with = candidate_energies_with(&model, &states, true).unwrap();
            let without = candidate_energies_with(&model, &states, false).unwrap();
            prop_assert_eq!(with, without);
        }

        #[test]
        fn alpha_shift_keeps_prediction(seed in 0u64..1000, shift in -5.0f64..5.0, len in 2usize..=7) {
            let mut model = random_model(7, 3, seed, true);
            let nodes: Vec<u32> = (0..len).map(|i| ((seed as usize + i) % 7) as u32).collect();
            let states = chain_forward(&model, &nodes).unwrap();
            let before = candidate_energies(&model, &states).unwrap();
            let w = attention_weights(&model, len).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for a in model.alpha_mut() {
                *a += shift;
            }
            let after = candidate_energies(&model, &states).unwrap();
            let w2 = attention_weights(&model, len).unwrap();
            for (x, y) in w.iter().zip(&w2) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in before.iter().zip(&after) {
                prop_assert!((x - y).abs() < 1e-10 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn sampling_limits_and_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let energies = [0.3f64, 1.7, 1.2, -0.4];
        for _ in 0..100 {
            assert_eq!(sample_from_energies(&energies, 1e-6, &mut rng).unwrap(), 1);
        }
        let draws = 10_000;
        let hits = (0..draws).filter(|_| sample_from_energies(&[3f64.ln(), 0.0], 1.0, &mut rng).unwrap() == 0).count();
        let p = hits as f64 / draws as f64;
        assert!((p - 0.75).abs() <= 0.02, "p = {p}");

        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[sample_from_energies(&[2.0f64; 4], 0.7, &mut rng).unwrap()] += 1;
        }
        let mean = draws as f64 / 4.0;
        let sigma = (draws as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{counts:?}");
        }
        assert!(matches!(sample_from_energies(&energies, 0.0, &mut rng), Err(Error::Temperature(_))));
        assert!(sample_from_energies(&energies, -1.0, &mut rng).is_err());
    }

    #[test]
    fn sample_next_matches_greedy_at_low_temperature() {
        let model = random_model(6, 3, 4, true);
        let states = chain_forward(&model, &[1, 4, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let greedy = predict_next(&model, &states).unwrap();
        assert_eq!(sample_next(&model, &states, 1e-6, &mut rng).unwrap(), greedy);
        assert!(sample_next(&model, &states, 0.0, &mut rng).is_err());
    }
}
