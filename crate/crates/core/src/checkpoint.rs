//! Single-file binary checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! "SIFU" | version u32 = 1
//! n u32 | d u32 | max_seq_len u32 | reset_depth u32 | mode u8 | flags u8 | E u64
//! vocab:     n × (len u32, UTF-8 bytes)
//! edges:     E × (src u32, dst u32), sorted
//! f32 blobs: node biases (n·d) | alpha (max_seq_len-1) | shared edge (d²+d) | dedicated (E·(d²+d))
//! optional optimizer section (flag bit 1):
//!            step u64 | lr, beta1, beta2, eps, weight_decay as f64
//!            f32 moments m, v for node biases, alpha, shared edge, dedicated edges
//! CRC-32 of everything above, u32
//! ```
//!
//! Flag bit 0 marks a trainable shared edge.

use std::fs;
use std::path::Path;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{EdgeTable, ModelConfig, PredictionMode, SiFuModel};
use crate::real::Real;
use crate::train::{AdamWConfig, OptimizerState};

pub const MAGIC: &[u8; 4] = b"SIFU";
pub const VERSION: u32 = 1;

const FLAG_SHARED_TRAINABLE: u8 = 1;
const FLAG_OPTIMIZER: u8 = 1 << 1;

/// Everything a checkpoint holds.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: SiFuModel<f32>,
    pub vocab: Vocabulary,
    pub optimizer: Option<OptimizerState<f32>>,
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_f32s<T: Real>(out: &mut Vec<u8>, xs: &[T]) {
    out.reserve(xs.len() * 4);
    for &x in xs {
        out.extend_from_slice(&x.to_f32_bits().to_le_bytes());
    }
}

pub fn to_bytes<T: Real>(
    model: &SiFuModel<T>,
    vocab: &Vocabulary,
    optimizer: Option<&OptimizerState<T>>,
) -> Result<Vec<u8>> {
    let c = model.config();
    if vocab.len() != c.vocab_size {
        return Err(Error::Shape(format!("vocabulary has {} entries, model has {} nodes", vocab.len(), c.vocab_size)));
    }
    if let Some(opt) = optimizer {
        if !opt.matches(model) {
            return Err(Error::Shape("optimizer state does not match the model layout".into()));
        }
    }
    let edges = model.edges();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for x in [c.vocab_size, c.node_dim, c.max_seq_len, c.reset_depth] {
        put_u32(&mut out, x as u32);
    }
    out.push(c.prediction_mode.code());
    let mut flags = 0;
    if c.shared_edge_trainable {
        flags |= FLAG_SHARED_TRAINABLE;
    }
    if optimizer.is_some() {
        flags |= FLAG_OPTIMIZER;
    }
    out.push(flags);
    out.extend_from_slice(&(edges.dedicated_count() as u64).to_le_bytes());
    for tok in vocab.tokens() {
        put_u32(&mut out, tok.len() as u32);
        out.extend_from_slice(tok.as_bytes());
    }
    for &(src, dst) in edges.dedicated_pairs() {
        put_u32(&mut out, src);
        put_u32(&mut out, dst);
    }
    put_f32s(&mut out, model.node_biases());
    put_f32s(&mut out, model.alpha());
    put_f32s(&mut out, edges.shared_block());
    put_f32s(&mut out, edges.dedicated_blob());
    if let Some(opt) = optimizer {
        out.extend_from_slice(&opt.step.to_le_bytes());
        let h = opt.config;
        for x in [h.lr, h.beta1, h.beta2, h.eps, h.weight_decay] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for blob in [
            &opt.node_m,
            &opt.node_v,
            &opt.alpha_m,
            &opt.alpha_v,
            &opt.shared_m,
            &opt.shared_v,
            &opt.dedicated_m,
            &opt.dedicated_v,
        ] {
            put_f32s(&mut out, blob);
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Truncated(format!("ends inside {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let len = count.checked_mul(4).ok_or_else(|| Error::Format(format!("{what} too large")))?;
        let raw = self.take(len, what)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::Truncated("shorter than the fixed header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic("checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    // Structure is walked before the checksum so a short file reports truncation.
    let mut rd = Reader { bytes, pos: 8 };
    let n = rd.u32("header")? as usize;
    let d = rd.u32("header")? as usize;
    let max_seq_len = rd.u32("header")? as usize;
    let reset_depth = rd.u32("header")? as usize;
    let mode_code = rd.u8("header")?;
    let flags = rd.u8("header")?;
    let edge_count = usize::try_from(rd.u64("header")?).map_err(|_| Error::Format("edge count overflows".into()))?;
    let mut tokens = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let len = rd.u32("vocabulary")? as usize;
        tokens.push(rd.take(len, "vocabulary")?);
    }
    let index_raw = rd.take(edge_count.saturating_mul(8), "edge index")?;
    let edge_len = d * d + d;
    let node_bias = rd.f32s(n * d, "node biases")?;
    let alpha = rd.f32s(max_seq_len.saturating_sub(1), "attention logits")?;
    let shared = rd.f32s(edge_len, "shared edge")?;
    let dedicated = rd.f32s(edge_count.saturating_mul(edge_len), "dedicated edges")?;
    let optimizer_raw = if flags & FLAG_OPTIMIZER != 0 {
        let step = rd.u64("optimizer")?;
        let mut h = [0.0; 5];
        for x in &mut h {
            *x = rd.f64("optimizer")?;
        }
        let mut blobs = Vec::with_capacity(8);
        for len in [n * d, n * d, alpha.len(), alpha.len(), edge_len, edge_len, dedicated.len(), dedicated.len()] {
            blobs.push(rd.f32s(len, "optimizer moments")?);
        }
        Some((step, h, blobs))
    } else {
        None
    };
    let body_end = rd.pos;
    let stored = rd.u32("checksum")?;
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if rd.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the checksum", bytes.len() - rd.pos)));
    }
    if flags & !(FLAG_SHARED_TRAINABLE | FLAG_OPTIMIZER) != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#04x}")));
    }

    let mode = PredictionMode::from_code(mode_code)
        .ok_or_else(|| Error::Format(format!("unknown prediction mode {mode_code}")))?;
    let config = ModelConfig {
        vocab_size: n,
        node_dim: d,
        max_seq_len,
        reset_depth,
        prediction_mode: mode,
        shared_edge_trainable: flags & FLAG_SHARED_TRAINABLE != 0,
        rng_seed: 0,
    };
    config.validate()?;
    let tokens = tokens
        .into_iter()
        .map(|raw| String::from_utf8(raw.to_vec()).map_err(|_| Error::Format("vocabulary entry is not UTF-8".into())))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_tokens(tokens)?;
    let keys: Vec<(u32, u32)> = index_raw
        .chunks_exact(8)
        .map(|b| (u32::from_le_bytes(b[..4].try_into().unwrap()), u32::from_le_bytes(b[4..].try_into().unwrap())))
        .collect();
    let edges = EdgeTable::from_raw(n, d, keys, shared, dedicated)?;
    let model = SiFuModel::from_parts(config, node_bias, edges, alpha)?;
    let optimizer = optimizer_raw.map(|(step, h, blobs)| {
        let mut it = blobs.into_iter();
        let mut next = || it.next().unwrap_or_default();
        OptimizerState {
            config: AdamWConfig { lr: h[0], beta1: h[1], beta2: h[2], eps: h[3], weight_decay: h[4] },
            step,
            node_m: next(),
            node_v: next(),
            alpha_m: next(),
            alpha_v: next(),
            shared_m: next(),
            shared_v: next(),
            dedicated_m: next(),
            dedicated_v: next(),
        }
    });
    Ok(Checkpoint { model, vocab, optimizer })
}

pub fn save_checkpoint<T: Real>(
    model: &SiFuModel<T>,
    vocab: &Vocabulary,
    optimizer: Option<&OptimizerState<T>>,
    path: &Path,
) -> Result<()> {
    let bytes = to_bytes(model, vocab, optimizer)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
