//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sifu_core::model::all_pairs;
use sifu_core::train::{backward, forward, Gradients, Targets};
use sifu_core::{EdgeId, ModelConfig, PredictionMode, SiFuModel};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCase {
    pub model: SiFuModel<f64>,
    pub sequence: Vec<u32>,
    pub targets: Targets,
}

/// A random small model with random dedicated pairs, biases and attention logits.
pub fn random_case(seed: u64, mode: PredictionMode, reset_depth: Option<usize>) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=8usize);
    let d = rng.gen_range(1..=4usize);
    let max_len = rng.gen_range(2..=6usize);
    let depth = reset_depth.map_or(max_len, |r| r.min(max_len));
    let config = ModelConfig::new(n, d, max_len).with_mode(mode).with_reset_depth(depth).with_seed(seed);
    let density = rng.gen_range(0.0..1.0);
    let pairs: BTreeSet<(u32, u32)> = all_pairs(n).into_iter().filter(|_| rng.gen_bool(density)).collect();
    let mut model = SiFuModel::<f64>::init(config, &pairs).expect("valid config");
    for a in model.alpha_mut() {
        *a = rng.gen_range(-1.0..1.0);
    }
    for v in 0..n as u32 {
        for b in model.node_bias_mut(v) {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
    for slot in 0..pairs.len() as u32 {
        perturb_biases(&mut model, EdgeId::Dedicated(slot), d, &mut rng);
    }
    perturb_biases(&mut model, EdgeId::Shared, d, &mut rng);
    let len = rng.gen_range(2..=max_len);
    let sequence = (0..len).map(|_| rng.gen_range(0..n as u32)).collect();
    let targets = if rng.gen_bool(0.5) { Targets::Last } else { Targets::AllPrefixes };
    GradCase { model, sequence, targets }
}

fn perturb_biases(model: &mut SiFuModel<f64>, id: EdgeId, d: usize, rng: &mut ChaCha8Rng) {
    let block = model.edges_mut().block_mut(id);
    for b in &mut block[d * d..] {
        *b = rng.gen_range(-0.3..0.3);
    }
}

/// Every scalar parameter, addressed for perturbation.
#[derive(Debug, Clone, Copy)]
pub enum Param {
    Node(u32, usize),
    Alpha(usize),
    Edge(EdgeId, usize),
}

pub fn all_params(model: &SiFuModel<f64>) -> Vec<Param> {
    let d = model.dim();
    let mut out = Vec::new();
    for v in 0..model.vocab_size() as u32 {
        out.extend((0..d).map(|i| Param::Node(v, i)));
    }
    out.extend((0..model.alpha().len()).map(Param::Alpha));
    let e = model.edges().edge_len();
    out.extend((0..e).map(|i| Param::Edge(EdgeId::Shared, i)));
    for slot in 0..model.edges().dedicated_count() as u32 {
        out.extend((0..e).map(|i| Param::Edge(EdgeId::Dedicated(slot), i)));
    }
    out
}

pub fn param_mut(model: &mut SiFuModel<f64>, p: Param) -> &mut f64 {
    match p {
        Param::Node(v, i) => &mut model.node_bias_mut(v)[i],
        Param::Alpha(i) => &mut model.alpha_mut()[i],
        Param::Edge(id, i) => &mut model.edges_mut().block_mut(id)[i],
    }
}

pub fn grad_of(grads: &Gradients<f64>, p: Param) -> f64 {
    match p {
        Param::Node(v, i) => grads.node_bias.get(&v).map_or(0.0, |g| g[i]),
        Param::Alpha(i) => grads.alpha[i],
        Param::Edge(id, i) => grads.edge(id).map_or(0.0, |g| g[i]),
    }
}

pub fn loss(model: &SiFuModel<f64>, seq: &[u32], targets: Targets) -> f64 {
    forward(model, seq, targets).expect("valid sequence").0
}

/// Largest relative disagreement between backprop and central differences.
pub fn max_fd_error(case: &GradCase) -> f64 {
    let (_, record) = forward(&case.model, &case.sequence, case.targets).unwrap();
    let grads = backward(&case.model, &record).unwrap();
    let mut worst = 0.0f64;
    let mut probe = case.model.clone();
    for p in all_params(&case.model) {
        let x = *param_mut(&mut probe, p);
        *param_mut(&mut probe, p) = x + FD_STEP;
        let up = loss(&probe, &case.sequence, case.targets);
        *param_mut(&mut probe, p) = x - FD_STEP;
        let down = loss(&probe, &case.sequence, case.targets);
        *param_mut(&mut probe, p) = x;
        let fd = (up - down) / (2.0 * FD_STEP);
        let an = grad_of(&grads, p);
        let err = (an - fd).abs() / an.abs().max(fd.abs()).max(FD_FLOOR);
        worst = worst.max(err);
    }
    worst
}

/// The 50-case sweep: both modes crossed with reset depths 1, 2 and none.
pub fn fd_sweep(cases: usize) -> Vec<(GradCase, f64)> {
    let modes = [PredictionMode::AggregateThenNorm, PredictionMode::SumOfNorms];
    let depths = [Some(1), Some(2), None];
    (0..cases as u64)
        .map(|i| {
            let mode = modes[i as usize % 2];
            let depth = depths[(i as usize / 2) % 3];
            let case = random_case(1000 + i, mode, depth);
            let err = max_fd_error(&case);
            (case, err)
        })
        .collect()
}
