//! Bigram statistics that decide which node pairs get dedicated edges.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamCount};

const BIGRAM_MAGIC: &str = "SIFU-BIGRAMS";

/// Occurrence counts of ordered adjacent token pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BigramStats {
    counts: BTreeMap<(u32, u32), u64>,
    total: u64,
}

impl BigramStats {
    /// Counts adjacent pairs inside each sequence; no pair spans two sequences.
    pub fn count<'a, I>(sequences: I) -> Self
    where
        I: IntoIterator<Item = &'a [u32]>,
    {
        let mut stats = Self::default();
        for seq in sequences {
            for pair in seq.windows(2) {
                *stats.counts.entry((pair[0], pair[1])).or_default() += 1;
                stats.total += 1;
            }
        }
        stats
    }

    /// Adds another shard's counts. Order-independent.
    pub fn merge(&mut self, other: &Self) {
        for (&pair, &c) in &other.counts {
            *self.counts.entry(pair).or_default() += c;
        }
        self.total += other.total;
    }

    pub fn get(&self, src: u32, dst: u32) -> u64 {
        self.counts.get(&(src, dst)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((u32, u32), u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }

    /// Text header line, then little-endian `(src u32, dst u32, count u64)` records in pair order.
    pub fn to_bytes(&self, vocab_size: usize) -> Vec<u8> {
        let mut out =
            format!("{BIGRAM_MAGIC} v1 vocab={vocab_size} entries={} total={}\n", self.counts.len(), self.total)
                .into_bytes();
        for (&(src, dst), &c) in &self.counts {
            out.extend_from_slice(&src.to_le_bytes());
            out.extend_from_slice(&dst.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    /// Parses [`Self::to_bytes`] output; returns the stats and the recorded vocabulary size.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("bigram file has no header line".into()))?;
        let header =
            std::str::from_utf8(&bytes[..newline]).map_err(|_| Error::Format("bigram header is not UTF-8".into()))?;
        let mut fields = header.split(' ');
        if fields.next() != Some(BIGRAM_MAGIC) {
            return Err(Error::BadMagic("bigram table".into()));
        }
        if fields.next() != Some("v1") {
            return Err(Error::Format(format!("unsupported bigram header {header:?}")));
        }
        let mut field = |name: &str| -> Result<u64> {
            fields
                .next()
                .and_then(|f| f.strip_prefix(name))
                .and_then(|f| f.strip_prefix('='))
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::Format(format!("bigram header lacks {name}")))
        };
        let vocab_size = field("vocab")? as usize;
        let entries = field("entries")? as usize;
        let total = field("total")?;
        let body = &bytes[newline + 1..];
        if body.len() != entries * 16 {
            return Err(Error::Truncated(format!("bigram table holds {} bytes for {entries} entries", body.len())));
        }
        let mut counts = BTreeMap::new();
        let mut sum = 0u64;
        for rec in body.chunks_exact(16) {
            let src = u32::from_le_bytes(rec[0..4].try_into().unwrap());
            let dst = u32::from_le_bytes(rec[4..8].try_into().unwrap());
            let c = u64::from_le_bytes(rec[8..16].try_into().unwrap());
            if c == 0 || src as usize >= vocab_size || dst as usize >= vocab_size {
                return Err(Error::Format(format!("invalid bigram record ({src}, {dst}, {c})")));
            }
            if counts.insert((src, dst), c).is_some() {
                return Err(Error::Format(format!("duplicate bigram ({src}, {dst})")));
            }
            sum += c;
        }
        if sum != total {
            return Err(Error::Format(format!("bigram counts sum to {sum}, header says {total}")));
        }
        Ok((Self { counts, total }, vocab_size))
    }

    pub fn save(&self, path: &Path, vocab_size: usize) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(&self.to_bytes(vocab_size))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, usize)> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgePolicy {
    /// Every pair seen at least this often.
    MinCount(u64),
    /// The `k` most frequent pairs; ties go to the lexicographically smaller pair.
    TopK(usize),
}

pub fn select_edges(stats: &BigramStats, policy: EdgePolicy) -> BTreeSet<(u32, u32)> {
    match policy {
        EdgePolicy::MinCount(min) => stats.iter().filter(|&(_, c)| c >= min).map(|(p, _)| p).collect(),
        EdgePolicy::TopK(k) => {
            let mut ranked: Vec<((u32, u32), u64)> = stats.iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.into_iter().take(k).map(|(p, _)| p).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SparsityReport {
    pub sparse_count: u64,
    pub dense_count: u64,
    pub ratio: f64,
}

impl SparsityReport {
    pub fn csv_header() -> &'static str {
        "sparse_count,dense_count,ratio"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.sparse_count, self.dense_count, self.ratio)
    }
}

/// Size of the sparse layout relative to the fully dense graph.
pub fn sparsity_report(config: &ModelConfig, dedicated: usize) -> SparsityReport {
    let sparse_count = ParamCount::for_layout(config, dedicated as u64).total();
    let dense_count = ParamCount::dense(config).total();
    SparsityReport { sparse_count, dense_count, ratio: sparse_count as f64 / dense_count as f64 }
}
