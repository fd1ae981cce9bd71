//! Signal lifecycle: initial activation, edge propagation, positional
//! encoding, GeLU and L2 energy, plus the reset-aware chain over a sequence.

use crate::error::{Error, Result};
use crate::model::{EdgeId, EdgeParams, SiFuModel};
use crate::real::Real;

/// Exact GeLU, `x·Φ(x)` with `Φ` the standard normal CDF.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// `d/dx gelu(x) = Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Sinusoidal encoding, interleaved: slot `2i` holds `sin(pos / 10000^(2i/d))` and
/// slot `2i+1` the matching cosine. An odd `d` ends on a sine slot.
pub fn positional_encoding<T: Real>(pos: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d];
    write_positional_encoding(pos, &mut out);
    out
}

pub(crate) fn write_positional_encoding<T: Real>(pos: usize, out: &mut [T]) {
    let d = out.len() as f64;
    for (j, slot) in out.iter_mut().enumerate() {
        let pair = (j / 2 * 2) as f64;
        let angle = pos as f64 / 10000f64.powf(pair / d);
        *slot = T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() });
    }
}

/// Euclidean norm of a signal, its energy.
#[inline]
pub fn energy<T: Real>(r: &[T]) -> T {
    r.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Signal held by a node at a sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalState<T> {
    pub r: Vec<T>,
    pub pos: usize,
    pub node: u32,
}

/// `z = W·r + b + pe`.
#[inline]
pub(crate) fn affine_into<T: Real>(edge: EdgeParams<'_, T>, r: &[T], pe: &[T], z: &mut [T]) {
    let d = r.len();
    for (i, zi) in z.iter_mut().enumerate() {
        let row = &edge.weight[i * d..(i + 1) * d];
        let mut acc = T::zero();
        for (w, x) in row.iter().zip(r) {
            acc = acc + *w * *x;
        }
        *zi = acc + edge.bias[i] + pe[i];
    }
}

/// `z = 1 + b_node + pe`, the pre-activation of an initial (or reset) signal.
#[inline]
pub(crate) fn initial_preact_into<T: Real>(bias: &[T], pe: &[T], z: &mut [T]) {
    for ((zi, b), p) in z.iter_mut().zip(bias).zip(pe) {
        *zi = T::one() + *b + *p;
    }
}

#[inline]
pub(crate) fn gelu_into<T: Real>(z: &[T], out: &mut [T]) {
    for (o, &x) in out.iter_mut().zip(z) {
        *o = gelu(x);
    }
}

pub fn initial_signal<T: Real>(model: &SiFuModel<T>, node: u32, pos: usize) -> Result<SignalState<T>> {
    model.check_node(node)?;
    let d = model.dim();
    let pe = positional_encoding::<T>(pos, d);
    let mut z = vec![T::zero(); d];
    initial_preact_into(model.node_bias(node), &pe, &mut z);
    let mut r = vec![T::zero(); d];
    gelu_into(&z, &mut r);
    Ok(SignalState { r, pos, node })
}

/// Moves a signal one step along the edge `(sig.node, dst)`, encoding the source position.
pub fn propagate<T: Real>(model: &SiFuModel<T>, sig: &SignalState<T>, dst: u32) -> Result<SignalState<T>> {
    let edge = model.edge_lookup(sig.node, dst)?;
    let d = model.dim();
    let pe = positional_encoding::<T>(sig.pos, d);
    let mut z = vec![T::zero(); d];
    affine_into(edge.params, &sig.r, &pe, &mut z);
    let mut r = vec![T::zero(); d];
    gelu_into(&z, &mut r);
    Ok(SignalState { r, pos: sig.pos + 1, node: dst })
}

/// Whether the signal at `pos` is (re)initialized instead of propagated.
#[inline]
pub fn is_reset_position(pos: usize, reset_depth: usize) -> bool {
    pos.is_multiple_of(reset_depth)
}

/// Runs the chain over `nodes`, one state per token. Positions that are a
/// multiple of the reset depth restart from the initial signal.
pub fn chain_forward<T: Real>(model: &SiFuModel<T>, nodes: &[u32]) -> Result<Vec<SignalState<T>>> {
    let max = model.config().max_seq_len;
    if nodes.is_empty() || nodes.len() > max {
        return Err(Error::SequenceLength { len: nodes.len(), min: 1, max });
    }
    for &v in nodes {
        model.check_node(v)?;
    }
    let trace = ChainTrace::run(model, nodes);
    Ok(trace.states(nodes))
}

/// Forward trace of a chain: pre-activations, signals, edges and reset marks
/// for every position. Node ids must already be validated.
#[derive(Debug, Clone)]
pub(crate) struct ChainTrace<T> {
    pub d: usize,
    /// `len × d` pre-activations.
    pub z: Vec<T>,
    /// `len × d` signals.
    pub r: Vec<T>,
    /// `len × d` positional encodings, `pe[k]` for position `k`.
    pub pe: Vec<T>,
    /// Edge used to reach each position; `None` where the signal was (re)initialized.
    pub edge: Vec<Option<EdgeId>>,
}

impl<T: Real> ChainTrace<T> {
    pub fn run(model: &SiFuModel<T>, nodes: &[u32]) -> Self {
        let d = model.dim();
        let len = nodes.len();
        let mut trace = ChainTrace {
            d,
            z: vec![T::zero(); len * d],
            r: vec![T::zero(); len * d],
            pe: vec![T::zero(); len * d],
            edge: Vec::with_capacity(len),
        };
        for k in 0..len {
            write_positional_encoding(k, &mut trace.pe[k * d..(k + 1) * d]);
        }
        let reset_depth = model.config().reset_depth;
        for i in 0..len {
            let (done, rest) = trace.r.split_at_mut(i * d);
            let z = &mut trace.z[i * d..(i + 1) * d];
            if is_reset_position(i, reset_depth) {
                initial_preact_into(model.node_bias(nodes[i]), &trace.pe[i * d..(i + 1) * d], z);
                trace.edge.push(None);
            } else {
                let id = model.edges().resolve(nodes[i - 1], nodes[i]);
                let prev = &done[(i - 1) * d..];
                affine_into(model.edges().params(id), prev, &trace.pe[(i - 1) * d..i * d], z);
                trace.edge.push(Some(id));
            }
            gelu_into(z, &mut rest[..d]);
        }
        trace
    }

    pub fn len(&self) -> usize {
        self.edge.len()
    }

    pub fn signal(&self, k: usize) -> &[T] {
        &self.r[k * self.d..(k + 1) * self.d]
    }

    pub fn pe_at(&self, k: usize) -> &[T] {
        &self.pe[k * self.d..(k + 1) * self.d]
    }

    pub fn states(&self, nodes: &[u32]) -> Vec<SignalState<T>> {
        (0..self.len()).map(|k| SignalState { r: self.signal(k).to_vec(), pos: k, node: nodes[k] }).collect()
    }
}
