//! The interchangeable long-term memory branch.
//!
//! Every branch consumes per-head queries, keys and values
//! `[L, n_heads·d]` plus two per-token, per-head control signals produced
//! from the layer input:
//!
//! * `rate`: `softplus(·) ≥ 0`, the fast-weight learning rate η_t (or the
//!   delta-rule write strength β_t),
//! * `gate`: `sigmoid(·) ∈ (0, 1)`, averaged per chunk into the momentum
//!   decay μ_j (or used per token as the linear decay α_t).

use serde::{Deserialize, Serialize};

use crate::autodiff::Ops;
use crate::error::{Error, Result};
use crate::linear::{linear_sequence_ops, LinearMemory, LinearRule};
use crate::memory::{chunk_spans, process_chunk_ops, ChunkMeta, ChunkStep, HeadWeights, InitNorms, MemoryConfig, MemoryState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    /// No memory branch: the layer is plain windowed attention.
    None,
    /// Nonlinear fast-weight memory updated per chunk.
    #[serde(rename = "allmem")]
    AllMem,
    Mamba2,
    Delta,
}

impl BranchKind {
    pub fn linear_rule(self) -> Option<LinearRule> {
        match self {
            BranchKind::Mamba2 => Some(LinearRule::GatedOuterProduct),
            BranchKind::Delta => Some(LinearRule::DeltaRule),
            _ => None,
        }
    }
}

impl std::str::FromStr for BranchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BranchKind::None),
            "allmem" => Ok(BranchKind::AllMem),
            "mamba2" => Ok(BranchKind::Mamba2),
            "delta" => Ok(BranchKind::Delta),
            other => Err(Error::Config(format!("unknown memory branch {other:?}"))),
        }
    }
}

/// Initial fast weights of one layer, shared by batch and streaming runs.
pub struct FastInit<'a, V> {
    pub config: &'a MemoryConfig,
    pub weights: &'a [HeadWeights<V>],
    pub norms: &'a [InitNorms],
}

/// Runs the fast-weight memory over a sequence with the given chunk size.
/// Each chunk reads before it writes; the last chunk may be short.
#[allow(clippy::too_many_arguments)]
pub fn allmem_sequence_ops<O: Ops>(
    o: &mut O,
    init: &FastInit<'_, O::V>,
    q: &O::V,
    k: &O::V,
    v: &O::V,
    rate: &O::V,
    gate: &O::V,
    chunk: usize,
) -> Result<O::V> {
    let cfg = init.config;
    let (n, d) = (cfg.n_heads, cfg.head_dim);
    let l = o.value(q).rows();
    if o.value(q).cols() != n * d || o.value(rate).cols() != n {
        return Err(Error::dim("memory branch", format!("width {} for {n} heads of {d}", o.value(q).cols())));
    }
    if chunk == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    let mut weights: Vec<HeadWeights<O::V>> = init.weights.to_vec();
    let mut momentum: Vec<HeadWeights<O::V>> = (0..n).map(|_| HeadWeights::zeros(cfg).map(|t| o.input(t.clone()))).collect();
    let mut rows = Vec::new();
    for (s, e) in chunk_spans(l, chunk) {
        let (qc, kc, vc) = (o.slice_rows(q, s, e)?, o.slice_rows(k, s, e)?, o.slice_rows(v, s, e)?);
        let (rc, gc) = (o.slice_rows(rate, s, e)?, o.slice_rows(gate, s, e)?);
        let mut heads = Vec::with_capacity(n);
        for h in 0..n {
            let qh = o.slice_cols(&qc, h * d, (h + 1) * d)?;
            let kh = o.slice_cols(&kc, h * d, (h + 1) * d)?;
            let vh = o.slice_cols(&vc, h * d, (h + 1) * d)?;
            let eta = o.slice_cols(&rc, h, h + 1)?;
            let g = o.slice_cols(&gc, h, h + 1)?;
            let mu = o.mean(&g)?;
            let step = ChunkStep { q: &qh, k: &kh, v: &vh, eta: &eta, mu: &mu };
            let r = process_chunk_ops(o, cfg, &init.norms[h], &weights[h], &momentum[h], step)?;
            weights[h] = r.weights;
            momentum[h] = r.momentum;
            heads.push(r.read);
        }
        rows.push(o.concat_cols(&heads)?);
    }
    o.concat_rows(&rows)
}

/// Dispatches a whole-sequence run to the configured branch.
#[allow(clippy::too_many_arguments)]
pub fn branch_sequence_ops<O: Ops>(
    o: &mut O,
    kind: BranchKind,
    init: Option<&FastInit<'_, O::V>>,
    n_heads: usize,
    q: &O::V,
    k: &O::V,
    v: &O::V,
    rate: &O::V,
    gate: &O::V,
    chunk: usize,
) -> Result<O::V> {
    match kind {
        BranchKind::AllMem => {
            let init = init.ok_or_else(|| Error::Config("fast-weight memory needs initial weights".into()))?;
            allmem_sequence_ops(o, init, q, k, v, rate, gate, chunk)
        }
        BranchKind::Mamba2 | BranchKind::Delta => {
            let rule = kind.linear_rule().expect("linear kind");
            linear_sequence_ops(o, rule, n_heads, q, k, v, gate, rate)
        }
        BranchKind::None => Err(Error::Config("no memory branch configured".into())),
    }
}

/// Token-at-a-time memory used during decoding. Implementations must agree
/// with the batch runs above given the same chunk boundaries.
pub trait StreamingMemory {
    /// Consumes one token (rows of width `n_heads·d`, one rate and gate per
    /// head) and returns its read.
    fn step(&mut self, q: &[f64], k: &[f64], v: &[f64], rate: &[f64], gate: &[f64]) -> Result<Vec<f64>>;

    /// Serialized recurrent state.
    fn state_bytes(&self) -> Vec<u8>;
}

/// Fast-weight memory that buffers writes until a chunk completes.
#[derive(Clone, Debug)]
pub struct ChunkedMemory {
    pub state: MemoryState,
    chunk: usize,
    pending: Vec<[Vec<f64>; 4]>,
}

impl ChunkedMemory {
    pub fn new(state: MemoryState, chunk: usize) -> Result<Self> {
        if chunk == 0 {
            return Err(Error::Config("chunk size must be positive".into()));
        }
        Ok(Self { state, chunk, pending: Vec::with_capacity(chunk) })
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    fn flush(&mut self) -> Result<()> {
        let n = self.state.config.n_heads;
        let rows = |i: usize| -> Result<Tensor> {
            let data: Vec<f64> = self.pending.iter().flat_map(|p| p[i].iter().copied()).collect();
            Tensor::new(vec![self.pending.len(), data.len() / self.pending.len()], data)
        };
        let (k, v, rate, gate) = (rows(0)?, rows(1)?, rows(2)?, rows(3)?);
        let metas: Vec<ChunkMeta> = (0..n)
            .map(|h| {
                let g: Vec<f64> = (0..gate.rows()).map(|t| gate.get(t, h)).collect();
                ChunkMeta {
                    eta: (0..rate.rows()).map(|t| rate.get(t, h)).collect(),
                    mu: g.iter().sum::<f64>() / g.len() as f64,
                }
            })
            .collect();
        self.state.update(&k, &v, &metas)?;
        self.pending.clear();
        Ok(())
    }
}

impl StreamingMemory for ChunkedMemory {
    fn step(&mut self, q: &[f64], k: &[f64], v: &[f64], rate: &[f64], gate: &[f64]) -> Result<Vec<f64>> {
        let read = self.state.read_all(&Tensor::new(vec![1, q.len()], q.to_vec())?)?;
        self.pending.push([k.to_vec(), v.to_vec(), rate.to_vec(), gate.to_vec()]);
        if self.pending.len() == self.chunk {
            self.flush()?;
        }
        Ok(read.into_data())
    }

    fn state_bytes(&self) -> Vec<u8> {
        self.state.to_bytes()
    }
}

impl StreamingMemory for LinearMemory {
    fn step(&mut self, q: &[f64], k: &[f64], v: &[f64], rate: &[f64], gate: &[f64]) -> Result<Vec<f64>> {
        LinearMemory::step(self, q, k, v, gate, rate)
    }

    fn state_bytes(&self) -> Vec<u8> {
        self.to_bytes()
    }
}
