use crate::error::{Error, Result};
use crate::model::{PredictionMode, SiFuModel};
use crate::predict::{attention_slot, score_candidates, softmax, SourceFanout};
use crate::real::Real;
use crate::signal::ChainTrace;

/// One prediction made over the first `sources` chain positions.
#[derive(Debug, Clone)]
pub struct HeadRecord<T> {
    pub sources: usize,
    pub target: u32,
    /// Attention logits of this head, one per source.
    pub logits: Vec<T>,
    pub attention: Vec<T>,
    /// `n×d` aggregated candidate signals (aggregate-then-norm only).
    pub aggregate: Vec<T>,
    pub energies: Vec<T>,
    pub probs: Vec<T>,
    pub loss: T,
}

/// Forward trace of one training sequence, sufficient for exact backprop.
#[derive(Debug, Clone)]
pub struct ComputationRecord<T> {
    pub(crate) revision: u64,
    pub(crate) mode: PredictionMode,
    pub(crate) n: usize,
    pub(crate) nodes: Vec<u32>,
    pub(crate) chain: ChainTrace<T>,
    pub(crate) fanouts: Vec<SourceFanout<T>>,
    pub heads: Vec<HeadRecord<T>>,
    pub loss: T,
}

/// Which positions of a sequence are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Targets {
    /// Only the final token, predicted from all before it.
    Last,
    /// Every token after the first, each from its own prefix.
    AllPrefixes,
}

fn head_forward<T: Real>(
    mode: PredictionMode,
    n: usize,
    d: usize,
    logits: Vec<T>,
    fanouts: &[SourceFanout<T>],
    target: u32,
) -> HeadRecord<T> {
    let attention = softmax(&logits);
    let (energies, aggregate) = score_candidates(mode, n, d, &attention, fanouts);
    let max = energies.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = energies.iter().map(|&e| (e - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let probs = exps.iter().map(|&e| e / total).collect();
    // subtract before adding the log-sum so huge equal energies do not cancel it away
    let loss = (max - energies[target as usize]) + total.ln();
    HeadRecord { sources: fanouts.len(), target, logits, attention, aggregate, energies, probs, loss }
}

fn mean_loss<T: Real>(heads: &[HeadRecord<T>]) -> T {
    let sum: T = heads.iter().map(|h| h.loss).sum();
    sum / T::from_usize(heads.len()).unwrap_or_else(T::one)
}

impl<T: Real> ComputationRecord<T> {
    /// Recomputes the loss from the stored candidate signals and attention logits.
    pub fn recompute_loss(&self) -> T {
        let d = self.chain.d;
        let heads: Vec<HeadRecord<T>> = self
            .heads
            .iter()
            .map(|h| head_forward(self.mode, self.n, d, h.logits.clone(), &self.fanouts[..h.sources], h.target))
            .collect();
        mean_loss(&heads)
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn sequence(&self) -> &[u32] {
        &self.nodes
    }
}

/// Cross-entropy of the final token of `sequence` given its prefix.
pub fn forward_loss<T: Real>(model: &SiFuModel<T>, sequence: &[u32]) -> Result<(T, ComputationRecord<T>)> {
    forward(model, sequence, Targets::Last)
}

/// Mean cross-entropy over the chosen targets of `sequence`.
pub fn forward<T: Real>(model: &SiFuModel<T>, sequence: &[u32], targets: Targets) -> Result<(T, ComputationRecord<T>)> {
    let max = model.config().max_seq_len;
    if sequence.len() < 2 || sequence.len() > max {
        return Err(Error::SequenceLength { len: sequence.len(), min: 2, max });
    }
    for &v in sequence {
        model.check_node(v)?;
    }
    let n = model.vocab_size();
    let d = model.dim();
    let mode = model.config().prediction_mode;
    let sources = &sequence[..sequence.len() - 1];
    let chain = ChainTrace::run(model, sources);
    let fanouts: Vec<SourceFanout<T>> = (0..sources.len())
        .map(|k| SourceFanout::compute(model, sources[k], chain.signal(k), chain.pe_at(k), true))
        .collect();
    let head_range = match targets {
        Targets::Last => sources.len()..=sources.len(),
        Targets::AllPrefixes => 1..=sources.len(),
    };
    let heads: Vec<HeadRecord<T>> = head_range
        .map(|t| {
            let logits = (0..t).map(|k| model.alpha()[attention_slot(k, max)]).collect();
            head_forward(mode, n, d, logits, &fanouts[..t], sequence[t])
        })
        .collect();
    let loss = mean_loss(&heads);
    let record =
        ComputationRecord { revision: model.revision(), mode, n, nodes: sources.to_vec(), chain, fanouts, heads, loss };
    Ok((loss, record))
}
