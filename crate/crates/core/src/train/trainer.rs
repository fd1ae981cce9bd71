use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::SiFuModel;
use crate::predict::argmax;
use crate::real::Real;

use super::backward::{backward, Gradients};
use super::optim::{adamw_step, OptimizerState};
use super::record::{forward, Targets};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup for `warmup` steps, then cosine decay to `floor · lr` at `total`.
    WarmupCosine {
        warmup: u64,
        total: u64,
        floor: f64,
    },
}

impl LrSchedule {
    /// Learning rate for the update that makes `step` (1-based) steps in total.
    pub fn at(&self, base: f64, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::WarmupCosine { warmup, total, floor } => {
                if step <= warmup && warmup > 0 {
                    return base * step as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1) as f64;
                let progress = ((step - warmup) as f64 / span).min(1.0);
                let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                base * (floor + (1.0 - floor) * cosine)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// Seeds batch sampling; the stream for each step is derived from the global step.
    pub seed: u64,
    pub targets: Targets,
    /// Run per-sequence forward/backward on the rayon pool. Results are identical either way.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 16,
            schedule: LrSchedule::Constant,
            seed: 42,
            targets: Targets::AllPrefixes,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    /// Global optimizer step after this update (1-based).
    pub step: u64,
    pub loss: f64,
    pub ppl: f64,
    pub wall_ms: f64,
}

fn sequence_grads<T: Real>(model: &SiFuModel<T>, seq: &[u32], targets: Targets) -> Result<(T, Gradients<T>)> {
    let (loss, record) = forward(model, seq, targets)?;
    Ok((loss, backward(model, &record)?))
}

/// Batch indices for global step `step`; depends only on `(seed, step, len)`.
pub fn batch_indices(seed: u64, step: u64, len: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    (0..batch_size).map(|_| rng.gen_range(0..len)).collect()
}

/// Runs `config.steps` optimizer steps, continuing from `state.step`.
///
/// Each step draws a batch, sums per-sequence gradients in batch order,
/// averages them and applies one AdamW update. `on_step` sees the model after
/// every update. A non-finite loss or gradient stops the run with
/// [`Error::Diverged`] before the offending update is applied.
pub fn train<T, F>(
    model: &mut SiFuModel<T>,
    state: &mut OptimizerState<T>,
    data: &[Vec<u32>],
    config: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<StepLog>>
where
    T: Real,
    F: FnMut(&StepLog, &SiFuModel<T>, &OptimizerState<T>) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::EmptyCorpus("no training sequences".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut curve = Vec::with_capacity(config.steps as usize);
    for _ in 0..config.steps {
        let started = Instant::now();
        let picks = batch_indices(config.seed, state.step, data.len(), config.batch_size);
        let targets = config.targets;
        let frozen: &SiFuModel<T> = model;
        let results: Vec<Result<(T, Gradients<T>)>> = if config.parallel {
            picks.par_iter().map(|&i| sequence_grads(frozen, &data[i], targets)).collect()
        } else {
            picks.iter().map(|&i| sequence_grads(frozen, &data[i], targets)).collect()
        };
        let mut total = Gradients::zeros(model.config());
        let mut loss_sum = 0.0;
        for result in results {
            let (loss, grads) = result?;
            loss_sum += loss.as_f64();
            total.accumulate(&grads);
        }
        let batch = T::from_usize(picks.len()).unwrap_or_else(T::one);
        total.scale(T::one() / batch);
        if !loss_sum.is_finite() || !total.is_finite() {
            return Err(Error::Diverged { step: state.step + 1 });
        }
        let lr = config.schedule.at(state.config.lr, state.step + 1);
        adamw_step(model, &total, state, lr)?;
        let loss = loss_sum / picks.len() as f64;
        let log = StepLog { step: state.step, loss, ppl: loss.exp(), wall_ms: started.elapsed().as_secs_f64() * 1e3 };
        on_step(&log, model, state)?;
        curve.push(log);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    /// Predicted tokens scored.
    pub tokens: usize,
    pub mean_ce: f64,
    pub ppl: f64,
    /// Fraction of tokens whose greedy prediction is correct.
    pub accuracy: f64,
}

/// Scores every token after the first of each sequence from its prefix.
pub fn evaluate<T: Real>(model: &SiFuModel<T>, data: &[Vec<u32>]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus("no evaluation sequences".into()));
    }
    let per_seq: Vec<Result<(f64, usize, usize)>> = data
        .par_iter()
        .map(|seq| {
            let (_, record) = forward(model, seq, Targets::AllPrefixes)?;
            let ce: f64 = record.heads.iter().map(|h| h.loss.as_f64()).sum();
            let hits = record.heads.iter().filter(|h| argmax(&h.energies) as u32 == h.target).count();
            Ok((ce, hits, record.heads.len()))
        })
        .collect();
    let (mut ce, mut hits, mut tokens) = (0.0, 0, 0);
    for r in per_seq {
        let (c, h, t) = r?;
        ce += c;
        hits += h;
        tokens += t;
    }
    let mean_ce = ce / tokens as f64;
    Ok(EvalReport { tokens, mean_ce, ppl: mean_ce.exp(), accuracy: hits as f64 / tokens as f64 })
}
