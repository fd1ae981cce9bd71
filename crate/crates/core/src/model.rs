//! Parameter containers: node biases, the sparse edge table with its shared
//! fallback edge, and the positional attention logits.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::real::Real;

/// How candidate energies are scored from the per-source candidate signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionMode {
    /// `‖Σ_k A_k r_k‖`: aggregate the attention-weighted signals, then take the norm.
    #[default]
    AggregateThenNorm,
    /// `Σ_k A_k ‖r_k‖`: attention-weighted sum of per-source energies.
    SumOfNorms,
}

impl PredictionMode {
    pub fn code(self) -> u8 {
        match self {
            PredictionMode::AggregateThenNorm => 0,
            PredictionMode::SumOfNorms => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PredictionMode::AggregateThenNorm),
            1 => Some(PredictionMode::SumOfNorms),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of graph nodes, one per vocabulary entry.
    pub vocab_size: usize,
    /// Signal dimensionality.
    pub node_dim: usize,
    /// Training truncation length; the attention vector has `max_seq_len - 1` logits.
    pub max_seq_len: usize,
    /// Signal-reset period in propagation steps.
    pub reset_depth: usize,
    pub prediction_mode: PredictionMode,
    pub shared_edge_trainable: bool,
    pub rng_seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, node_dim: usize, max_seq_len: usize) -> Self {
        Self {
            vocab_size,
            node_dim,
            max_seq_len,
            reset_depth: max_seq_len,
            prediction_mode: PredictionMode::default(),
            shared_edge_trainable: true,
            rng_seed: 42,
        }
    }

    pub fn with_reset_depth(mut self, depth: usize) -> Self {
        self.reset_depth = depth;
        self
    }

    pub fn with_mode(mut self, mode: PredictionMode) -> Self {
        self.prediction_mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_shared_edge_trainable(mut self, trainable: bool) -> Self {
        self.shared_edge_trainable = trainable;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!("vocab_size must be >= 2, got {}", self.vocab_size)));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::Config("vocab_size does not fit in u32".into()));
        }
        if self.node_dim < 1 {
            return Err(Error::Config("node_dim must be >= 1".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config(format!("max_seq_len must be >= 2, got {}", self.max_seq_len)));
        }
        if self.reset_depth < 1 || self.reset_depth > self.max_seq_len {
            return Err(Error::Config(format!(
                "reset_depth must lie in [1, {}], got {}",
                self.max_seq_len, self.reset_depth
            )));
        }
        Ok(())
    }

    /// Parameters held by one edge: a `d×d` weight plus a `d` bias.
    pub fn edge_len(&self) -> usize {
        self.node_dim * self.node_dim + self.node_dim
    }

    pub fn attention_len(&self) -> usize {
        self.max_seq_len - 1
    }
}

/// Identity of the parameters an ordered node pair resolves to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeId {
    Shared,
    /// Index into the sorted dedicated-pair list.
    Dedicated(u32),
}

impl EdgeId {
    pub fn is_shared(self) -> bool {
        matches!(self, EdgeId::Shared)
    }
}

/// Borrowed view of one edge's affine map.
#[derive(Debug, Clone, Copy)]
pub struct EdgeParams<'a, T> {
    /// Row-major `d×d` matrix.
    pub weight: &'a [T],
    pub bias: &'a [T],
}

#[derive(Debug, Clone, Copy)]
pub struct EdgeRef<'a, T> {
    pub params: EdgeParams<'a, T>,
    pub id: EdgeId,
}

impl<T> EdgeRef<'_, T> {
    pub fn is_shared(&self) -> bool {
        self.id.is_shared()
    }
}

const NO_SLOT: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
enum PairIndex {
    Hashed(HashMap<(u32, u32), u32>),
    /// `n×n` slot table addressed by `src * n + dst`.
    Dense(Vec<u32>),
}

/// How the pair → slot resolution is stored. Both layouts resolve identically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    Hashed,
    Dense,
}

/// Sparse map from ordered node pairs to dedicated edge parameters, with one
/// shared edge covering every pair that is not listed.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTable<T> {
    n: usize,
    d: usize,
    keys: Vec<(u32, u32)>,
    index: PairIndex,
    dedicated: Vec<T>,
    shared: Vec<T>,
}

impl<T: Real> EdgeTable<T> {
    /// Builds a table with zeroed parameters. `keys` must be sorted and unique.
    fn zeroed(n: usize, d: usize, keys: Vec<(u32, u32)>, kind: IndexKind) -> Self {
        let edge_len = d * d + d;
        let index = build_index(n, &keys, kind);
        Self { n, d, dedicated: vec![T::zero(); keys.len() * edge_len], shared: vec![T::zero(); edge_len], keys, index }
    }

    pub(crate) fn from_raw(
        n: usize,
        d: usize,
        keys: Vec<(u32, u32)>,
        shared: Vec<T>,
        dedicated: Vec<T>,
    ) -> Result<Self> {
        let edge_len = d * d + d;
        if shared.len() != edge_len || dedicated.len() != keys.len() * edge_len {
            return Err(Error::Shape("edge blob sizes do not match the edge index".into()));
        }
        validate_pairs(n, &keys)?;
        if keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("edge index is not strictly sorted".into()));
        }
        let index = build_index(n, &keys, default_index_kind(n));
        Ok(Self { n, d, keys, index, dedicated, shared })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn edge_len(&self) -> usize {
        self.d * self.d + self.d
    }

    /// Sorted dedicated pairs; position in this slice is the slot index.
    pub fn dedicated_pairs(&self) -> &[(u32, u32)] {
        &self.keys
    }

    pub fn dedicated_count(&self) -> usize {
        self.keys.len()
    }

    pub fn index_kind(&self) -> IndexKind {
        match self.index {
            PairIndex::Hashed(_) => IndexKind::Hashed,
            PairIndex::Dense(_) => IndexKind::Dense,
        }
    }

    pub fn reindex(&mut self, kind: IndexKind) {
        self.index = build_index(self.n, &self.keys, kind);
    }

    /// Resolves a pair without range checks; callers guarantee `src, dst < n`.
    #[inline]
    pub(crate) fn resolve(&self, src: u32, dst: u32) -> EdgeId {
        let slot = match &self.index {
            PairIndex::Hashed(map) => map.get(&(src, dst)).copied().unwrap_or(NO_SLOT),
            PairIndex::Dense(table) => table[src as usize * self.n + dst as usize],
        };
        if slot == NO_SLOT {
            EdgeId::Shared
        } else {
            EdgeId::Dedicated(slot)
        }
    }

    pub fn lookup(&self, src: u32, dst: u32) -> Result<EdgeRef<'_, T>> {
        for id in [src, dst] {
            if id as usize >= self.n {
                return Err(Error::NodeOutOfRange { id, n: self.n });
            }
        }
        let id = self.resolve(src, dst);
        Ok(EdgeRef { params: self.params(id), id })
    }

    #[inline]
    pub fn params(&self, id: EdgeId) -> EdgeParams<'_, T> {
        let block = self.block(id);
        let (weight, bias) = block.split_at(self.d * self.d);
        EdgeParams { weight, bias }
    }

    /// Flat `[weight | bias]` block of one edge.
    #[inline]
    pub fn block(&self, id: EdgeId) -> &[T] {
        match id {
            EdgeId::Shared => &self.shared,
            EdgeId::Dedicated(slot) => {
                let len = self.edge_len();
                let start = slot as usize * len;
                &self.dedicated[start..start + len]
            }
        }
    }

    pub fn block_mut(&mut self, id: EdgeId) -> &mut [T] {
        match id {
            EdgeId::Shared => &mut self.shared,
            EdgeId::Dedicated(slot) => {
                let len = self.edge_len();
                let start = slot as usize * len;
                &mut self.dedicated[start..start + len]
            }
        }
    }

    pub fn shared_block(&self) -> &[T] {
        &self.shared
    }

    /// All dedicated parameters, slot-major.
    pub fn dedicated_blob(&self) -> &[T] {
        &self.dedicated
    }

    fn cast<U: Real>(&self) -> EdgeTable<U> {
        EdgeTable {
            n: self.n,
            d: self.d,
            keys: self.keys.clone(),
            index: self.index.clone(),
            dedicated: cast_vec(&self.dedicated),
            shared: cast_vec(&self.shared),
        }
    }
}

fn default_index_kind(n: usize) -> IndexKind {
    // A dense slot table costs 4·n² bytes; use it while that stays small.
    if n.saturating_mul(n) <= 1 << 22 {
        IndexKind::Dense
    } else {
        IndexKind::Hashed
    }
}

fn build_index(n: usize, keys: &[(u32, u32)], kind: IndexKind) -> PairIndex {
    match kind {
        IndexKind::Hashed => {
            PairIndex::Hashed(keys.iter().enumerate().map(|(slot, &pair)| (pair, slot as u32)).collect())
        }
        IndexKind::Dense => {
            let mut table = vec![NO_SLOT; n * n];
            for (slot, &(src, dst)) in keys.iter().enumerate() {
                table[src as usize * n + dst as usize] = slot as u32;
            }
            PairIndex::Dense(table)
        }
    }
}

fn validate_pairs(n: usize, pairs: &[(u32, u32)]) -> Result<()> {
    for &(src, dst) in pairs {
        if src as usize >= n || dst as usize >= n {
            return Err(Error::Config(format!("dedicated pair ({src}, {dst}) out of range for {n} nodes")));
        }
    }
    Ok(())
}

pub(crate) fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::from_f64(x.as_f64()).unwrap_or_else(U::nan)).collect()
}

/// Exact parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub edge_dedicated: u64,
    pub edge_shared: u64,
    pub node: u64,
    pub attention: u64,
}

impl ParamCount {
    /// Count for a layout with `dedicated` dedicated pairs, without building a model.
    ///
    /// When every ordered pair is dedicated the shared edge is unreachable and
    /// is not counted.
    pub fn for_layout(config: &ModelConfig, dedicated: u64) -> Self {
        let n = config.vocab_size as u64;
        let d = config.node_dim as u64;
        let edge = d * d + d;
        Self {
            edge_dedicated: dedicated * edge,
            edge_shared: if dedicated >= n * n { 0 } else { edge },
            node: n * d,
            attention: config.max_seq_len as u64 - 1,
        }
    }

    /// Fully dense graph: every ordered pair, self-pairs included, is dedicated.
    pub fn dense(config: &ModelConfig) -> Self {
        let n = config.vocab_size as u64;
        Self::for_layout(config, n * n)
    }

    pub fn total(&self) -> u64 {
        self.edge_dedicated + self.edge_shared + self.node + self.attention
    }
}

/// All learnable state of a graph language model.
#[derive(Debug, Clone, PartialEq)]
pub struct SiFuModel<T> {
    config: ModelConfig,
    node_bias: Vec<T>,
    edges: EdgeTable<T>,
    alpha: Vec<T>,
    revision: u64,
}

impl<T: Real> SiFuModel<T> {
    /// Seeded initialization: edge weights uniform on `[-1/√d, 1/√d]`, drawn for the
    /// shared edge first and then for dedicated edges in sorted pair order; all
    /// biases and attention logits start at zero.
    pub fn init(config: ModelConfig, dedicated_pairs: &BTreeSet<(u32, u32)>) -> Result<Self> {
        let mut model = Self::zeroed(config, dedicated_pairs)?;
        let d = model.config.node_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.rng_seed);
        let edge_len = model.config.edge_len();
        let mut fill = |block: &mut [T]| {
            for w in &mut block[..d * d] {
                *w = T::lit(rng.gen_range(-bound..=bound));
            }
        };
        fill(&mut model.edges.shared);
        for block in model.edges.dedicated.chunks_mut(edge_len) {
            fill(block);
        }
        Ok(model)
    }

    /// All parameters zero.
    pub fn zeroed(config: ModelConfig, dedicated_pairs: &BTreeSet<(u32, u32)>) -> Result<Self> {
        config.validate()?;
        let keys: Vec<(u32, u32)> = dedicated_pairs.iter().copied().collect();
        validate_pairs(config.vocab_size, &keys)?;
        let n = config.vocab_size;
        let d = config.node_dim;
        Ok(Self {
            node_bias: vec![T::zero(); n * d],
            edges: EdgeTable::zeroed(n, d, keys, default_index_kind(n)),
            alpha: vec![T::zero(); config.attention_len()],
            config,
            revision: 0,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        node_bias: Vec<T>,
        edges: EdgeTable<T>,
        alpha: Vec<T>,
    ) -> Result<Self> {
        config.validate()?;
        if node_bias.len() != config.vocab_size * config.node_dim
            || alpha.len() != config.attention_len()
            || edges.node_count() != config.vocab_size
            || edges.dim() != config.node_dim
        {
            return Err(Error::Shape("model blobs do not match the header".into()));
        }
        Ok(Self { config, node_bias, edges, alpha, revision: 0 })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.config.node_dim
    }

    /// Monotone counter bumped on every mutable access; records are tied to it.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn set_prediction_mode(&mut self, mode: PredictionMode) {
        self.config.prediction_mode = mode;
        self.revision += 1;
    }

    pub fn set_reset_depth(&mut self, depth: usize) -> Result<()> {
        let mut config = self.config.clone();
        config.reset_depth = depth;
        config.validate()?;
        self.config = config;
        self.revision += 1;
        Ok(())
    }

    pub fn node_bias(&self, node: u32) -> &[T] {
        let d = self.config.node_dim;
        &self.node_bias[node as usize * d..(node as usize + 1) * d]
    }

    pub fn node_bias_mut(&mut self, node: u32) -> &mut [T] {
        self.revision += 1;
        let d = self.config.node_dim;
        &mut self.node_bias[node as usize * d..(node as usize + 1) * d]
    }

    pub fn node_biases(&self) -> &[T] {
        &self.node_bias
    }

    pub fn edges(&self) -> &EdgeTable<T> {
        &self.edges
    }

    pub fn edges_mut(&mut self) -> &mut EdgeTable<T> {
        self.revision += 1;
        &mut self.edges
    }

    /// Learnable attention logits, indexed by source position.
    pub fn alpha(&self) -> &[T] {
        &self.alpha
    }

    pub fn alpha_mut(&mut self) -> &mut [T] {
        self.revision += 1;
        &mut self.alpha
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [T], &mut EdgeTable<T>, &mut [T]) {
        self.revision += 1;
        (&mut self.node_bias, &mut self.edges, &mut self.alpha)
    }

    pub fn edge_lookup(&self, src: u32, dst: u32) -> Result<EdgeRef<'_, T>> {
        self.edges.lookup(src, dst)
    }

    pub fn count_params(&self) -> ParamCount {
        ParamCount::for_layout(&self.config, self.edges.dedicated_count() as u64)
    }

    /// Same parameters in another scalar type.
    pub fn cast<U: Real>(&self) -> SiFuModel<U> {
        SiFuModel {
            config: self.config.clone(),
            node_bias: cast_vec(&self.node_bias),
            edges: self.edges.cast(),
            alpha: cast_vec(&self.alpha),
            revision: 0,
        }
    }

    /// Parameters and layout compared bit for bit; revision and init seed are ignored.
    pub fn bit_eq(&self, other: &Self) -> bool {
        fn same<T: Real>(a: &[T], b: &[T]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
        }
        let mut theirs = other.config.clone();
        theirs.rng_seed = self.config.rng_seed;
        self.config == theirs
            && self.edges.keys == other.edges.keys
            && same(&self.node_bias, &other.node_bias)
            && same(&self.alpha, &other.alpha)
            && same(&self.edges.shared, &other.edges.shared)
            && same(&self.edges.dedicated, &other.edges.dedicated)
    }

    pub(crate) fn check_node(&self, id: u32) -> Result<()> {
        if id as usize >= self.config.vocab_size {
            Err(Error::NodeOutOfRange { id, n: self.config.vocab_size })
        } else {
            Ok(())
        }
    }
}

/// Every ordered pair over `n` nodes, self-pairs included.
pub fn all_pairs(n: usize) -> BTreeSet<(u32, u32)> {
    (0..n as u32).flat_map(|s| (0..n as u32).map(move |t| (s, t))).collect()
}
