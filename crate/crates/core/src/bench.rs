//! Per-token generation latency at increasing context lengths.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::generate::PredictionCache;
use crate::model::SiFuModel;
use crate::predict::argmax;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyRow {
    pub context: usize,
    pub ms_per_token: f64,
}

/// Greedy-decodes up to each requested context length and times the last
/// `window` tokens before it. Each length is measured `repeats` times and the
/// fastest run is kept.
pub fn token_latency<T: Real>(
    model: &SiFuModel<T>,
    start: u32,
    lengths: &[usize],
    window: usize,
    repeats: usize,
) -> Result<Vec<LatencyRow>> {
    model.check_node(start)?;
    if window == 0 || repeats == 0 {
        return Err(Error::Config("window and repeats must be positive".into()));
    }
    let mut rows = Vec::with_capacity(lengths.len());
    for &context in lengths {
        if context <= window {
            return Err(Error::Config(format!("context {context} must exceed the timing window {window}")));
        }
        let mut best = f64::INFINITY;
        for _ in 0..repeats {
            let mut cache = PredictionCache::new(model);
            cache.push(model, start)?;
            while cache.len() < context - window {
                let next = argmax(&cache.energies()) as u32;
                cache.push(model, next)?;
            }
            let t0 = Instant::now();
            while cache.len() < context {
                let next = argmax(&cache.energies()) as u32;
                cache.push(model, next)?;
            }
            best = best.min(t0.elapsed().as_secs_f64() * 1e3 / window as f64);
        }
        rows.push(LatencyRow { context, ms_per_token: best });
    }
    Ok(rows)
}
