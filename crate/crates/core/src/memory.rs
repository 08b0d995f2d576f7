//! Long-term fast-weight memory trained at test time.
//!
//! Each memory head owns a residual SwishGLU network
//! `f(x) = (SiLU(x·W_gateᵀ) ⊙ x·W_upᵀ)·W_downᵀ + x`. A sequence is consumed in
//! chunks; for every chunk the heads run, in this order:
//!
//! 1. **read** the chunk's queries through the current (unnormalized)
//!    weights,
//! 2. **normalize** the weights row-wise back to their initial row norms,
//! 3. **update**: take the gradient of `−Σ f(K)⊙V` on the normalized
//!    weights, with per-token learning rates scaling each token's
//!    contribution, clip it per matrix and apply one momentum step.
//!
//! Because reads precede the write, a chunk's outputs only carry
//! information from earlier chunks.
//!
//! The chunk math is written once against [`Ops`]; the `MemoryState`
//! methods run it eagerly, and the token mixer runs it on a tape so that
//! outer-loop gradients flow through every inner update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Ops};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which fast-weight matrices are rescaled by the normalization step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeSet {
    pub up: bool,
    pub gate: bool,
    pub down: bool,
}

impl Default for NormalizeSet {
    fn default() -> Self {
        // W_down starts at zero, so it has no initial row norm to restore.
        Self { up: true, gate: true, down: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub n_heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    /// Per-matrix Frobenius clip threshold Θ.
    pub clip: f64,
    pub normalize: NormalizeSet,
    /// Apply the per-token learning rates to the W_down gradient too.
    pub eta_on_down: bool,
    /// Std of the W_down initialization; zero gives an identity first read.
    pub init_down_std: f64,
}

impl MemoryConfig {
    pub fn new(n_heads: usize, head_dim: usize, hidden: usize) -> Self {
        Self {
            n_heads,
            head_dim,
            hidden,
            clip: 1.0,
            normalize: NormalizeSet::default(),
            eta_on_down: true,
            init_down_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.head_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("memory dimensions must be positive".into()));
        }
        if self.clip <= 0.0 {
            return Err(Error::Config("clip threshold must be positive".into()));
        }
        if self.normalize.down && self.init_down_std <= 0.0 {
            return Err(Error::Config(
                "normalizing W_down needs a nonzero W_down initialization (init_down_std > 0)".into(),
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

/// The three fast-weight matrices of one head (or anything shaped like
/// them: momentum, gradients).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<V = Tensor> {
    /// `[hidden, head_dim]`
    pub up: V,
    /// `[hidden, head_dim]`
    pub gate: V,
    /// `[head_dim, hidden]`
    pub down: V,
}

/// New weights and momentum returned by [`update_ops`].
pub type WeightsAndMomentum<V> = (HeadWeights<V>, HeadWeights<V>);

impl<V> HeadWeights<V> {
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> HeadWeights<U> {
        HeadWeights {
            up: f(&self.up),
            gate: f(&self.gate),
            down: f(&self.down),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&V) -> Result<U>) -> Result<HeadWeights<U>> {
        Ok(HeadWeights {
            up: f(&self.up)?,
            gate: f(&self.gate)?,
            down: f(&self.down)?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &V> {
        [&self.up, &self.gate, &self.down].into_iter()
    }
}

impl HeadWeights<Tensor> {
    pub fn zeros(cfg: &MemoryConfig) -> Self {
        Self {
            up: Tensor::zeros(&[cfg.hidden, cfg.head_dim]),
            gate: Tensor::zeros(&[cfg.hidden, cfg.head_dim]),
            down: Tensor::zeros(&[cfg.head_dim, cfg.hidden]),
        }
    }

    /// Gaussian `W_up`, `W_gate` with std `1/√head_dim`; `W_down` from
    /// `init_down_std` (zero by default).
    pub fn init<R: Rng + ?Sized>(cfg: &MemoryConfig, rng: &mut R) -> Self {
        let std = 1.0 / (cfg.head_dim as f64).sqrt();
        let up = Tensor::randn(&[cfg.hidden, cfg.head_dim], std, rng);
        let gate = Tensor::randn(&[cfg.hidden, cfg.head_dim], std, rng);
        let down = if cfg.init_down_std > 0.0 {
            Tensor::randn(&[cfg.head_dim, cfg.hidden], cfg.init_down_std, rng)
        } else {
            Tensor::zeros(&[cfg.head_dim, cfg.hidden])
        };
        Self { up, gate, down }
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// Row norms captured at initialization for the normalized matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitNorms {
    pub up: Option<Vec<f64>>,
    pub gate: Option<Vec<f64>>,
    pub down: Option<Vec<f64>>,
}

impl InitNorms {
    pub fn capture(w: &HeadWeights, set: NormalizeSet) -> Result<Self> {
        let grab = |on: bool, t: &Tensor, name: &str| -> Result<Option<Vec<f64>>> {
            if !on {
                return Ok(None);
            }
            let n = t.row_norms();
            if n.iter().any(|&v| v <= 0.0) {
                return Err(Error::Config(format!("{name} has a zero row; its norm cannot be restored")));
            }
            Ok(Some(n))
        };
        Ok(Self {
            up: grab(set.up, &w.up, "W_up")?,
            gate: grab(set.gate, &w.gate, "W_gate")?,
            down: grab(set.down, &w.down, "W_down")?,
        })
    }
}

/// Per-chunk update controls for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkMeta {
    /// Per-token learning rates η_t ≥ 0, one per chunk row.
    pub eta: Vec<f64>,
    /// Momentum decay μ_j ∈ (0, 1) (zero disables momentum).
    pub mu: f64,
}

impl ChunkMeta {
    pub fn constant(len: usize, eta: f64, mu: f64) -> Self {
        Self { eta: vec![eta; len], mu }
    }
}

/// Intermediates of a forward pass of `f` over a block of inputs.
#[derive(Clone, Debug)]
pub struct ReadTrace<V> {
    pub h_gate: V,
    pub h_in: V,
    pub a: V,
    pub out: V,
}

/// Gradient quantities of the inner loss for one chunk.
#[derive(Clone, Debug)]
pub struct InnerGradients<V> {
    pub g_out: V,
    pub g_a: V,
    pub g_in: V,
    pub g_gate: V,
    pub weights: HeadWeights<V>,
}

/// Deliberate corruption of the manual gradients, used to prove the
/// gradient check can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradFault {
    FlipGateSign,
}

/// `f(x)` over the rows of `x`: `A = SiLU(x·W_gateᵀ) ⊙ x·W_upᵀ`,
/// `out = A·W_downᵀ + x`.
pub fn forward_ops<O: Ops>(o: &mut O, w: &HeadWeights<O::V>, x: &O::V) -> Result<ReadTrace<O::V>> {
    let h_gate = o.matmul_nt(x, &w.gate)?;
    let h_in = o.matmul_nt(x, &w.up)?;
    let act = o.silu(&h_gate)?;
    let a = o.mul(&act, &h_in)?;
    let proj = o.matmul_nt(&a, &w.down)?;
    let out = o.add(&proj, x)?;
    Ok(ReadTrace { h_gate, h_in, a, out })
}

/// `−Σ f(K) ⊙ V`.
pub fn inner_loss_ops<O: Ops>(o: &mut O, w: &HeadWeights<O::V>, k: &O::V, v: &O::V) -> Result<O::V> {
    let f = forward_ops(o, w, k)?;
    let prod = o.mul(&f.out, v)?;
    let s = o.sum(&prod)?;
    o.scale(&s, -1.0)
}

/// Manual gradients of the inner loss. `eta` is a `[c, 1]` column of
/// per-token rates that scales each token's row before the weight-gradient
/// products; `None` means η = 1.
pub fn inner_gradients_ops<O: Ops>(
    o: &mut O,
    w: &HeadWeights<O::V>,
    k: &O::V,
    v: &O::V,
    eta: Option<&O::V>,
    eta_on_down: bool,
    fault: Option<GradFault>,
) -> Result<InnerGradients<O::V>> {
    let f = forward_ops(o, w, k)?;
    let g_out = o.scale(v, -1.0)?;
    let g_a = o.matmul(&g_out, &w.down)?;
    let act = o.silu(&f.h_gate)?;
    let g_in = o.mul(&g_a, &act)?;
    let dact = o.silu_prime(&f.h_gate)?;
    let t = o.mul(&g_a, &f.h_in)?;
    let mut g_gate = o.mul(&t, &dact)?;
    if fault == Some(GradFault::FlipGateSign) {
        g_gate = o.scale(&g_gate, -1.0)?;
    }
    let (k_eta, a_eta) = match eta {
        Some(e) => {
            let ke = o.mul_col(k, e)?;
            let ae = if eta_on_down { o.mul_col(&f.a, e)? } else { f.a.clone() };
            (ke, ae)
        }
        None => (k.clone(), f.a.clone()),
    };
    let gate = o.matmul_tn(&g_gate, &k_eta)?;
    let up = o.matmul_tn(&g_in, &k_eta)?;
    let down = o.matmul_tn(&g_out, &a_eta)?;
    Ok(InnerGradients {
        g_out,
        g_a,
        g_in,
        g_gate,
        weights: HeadWeights { up, gate, down },
    })
}

/// Rescales the configured matrices' rows back to their initial norms.
pub fn normalize_ops<O: Ops>(o: &mut O, w: &HeadWeights<O::V>, norms: &InitNorms) -> Result<HeadWeights<O::V>> {
    let mut one = |x: &O::V, n: &Option<Vec<f64>>| match n {
        Some(n) => o.renorm_rows(x, n),
        None => Ok(x.clone()),
    };
    Ok(HeadWeights {
        up: one(&w.up, &norms.up)?,
        gate: one(&w.gate, &norms.gate)?,
        down: one(&w.down, &norms.down)?,
    })
}

/// Everything one chunk needs for one head.
pub struct ChunkStep<'a, V> {
    pub q: &'a V,
    pub k: &'a V,
    pub v: &'a V,
    /// `[c, 1]` per-token learning rates.
    pub eta: &'a V,
    /// `[1, 1]` momentum decay.
    pub mu: &'a V,
}

/// Output of [`process_chunk_ops`].
pub struct ChunkResult<V> {
    pub read: V,
    pub weights: HeadWeights<V>,
    pub momentum: HeadWeights<V>,
}

/// Read → normalize → update for one head and one chunk.
pub fn process_chunk_ops<O: Ops>(
    o: &mut O,
    cfg: &MemoryConfig,
    norms: &InitNorms,
    w: &HeadWeights<O::V>,
    m: &HeadWeights<O::V>,
    step: ChunkStep<'_, O::V>,
) -> Result<ChunkResult<O::V>> {
    let read = forward_ops(o, w, step.q)?.out;
    let (weights, momentum) = update_ops(o, cfg, norms, w, m, step.k, step.v, step.eta, step.mu)?;
    Ok(ChunkResult { read, weights, momentum })
}

/// Normalize → gradient on the normalized weights → clip → momentum step.
/// Returns the new `(weights, momentum)`.
#[allow(clippy::too_many_arguments)]
pub fn update_ops<O: Ops>(
    o: &mut O,
    cfg: &MemoryConfig,
    norms: &InitNorms,
    w: &HeadWeights<O::V>,
    m: &HeadWeights<O::V>,
    k: &O::V,
    v: &O::V,
    eta: &O::V,
    mu: &O::V,
) -> Result<WeightsAndMomentum<O::V>> {
    let wn = normalize_ops(o, w, norms)?;
    let g = inner_gradients_ops(o, &wn, k, v, Some(eta), cfg.eta_on_down, None)?;
    let mut upd = |wv: &O::V, mv: &O::V, gv: &O::V| -> Result<(O::V, O::V)> {
        let clipped = o.norm_clip(gv, cfg.clip)?;
        let decayed = o.mul_scalar(mv, mu)?;
        let m_new = o.sub(&decayed, &clipped)?;
        let w_new = o.add(wv, &m_new)?;
        Ok((w_new, m_new))
    };
    let (up, mup) = upd(&wn.up, &m.up, &g.weights.up)?;
    let (gate, mgate) = upd(&wn.gate, &m.gate, &g.weights.gate)?;
    let (down, mdown) = upd(&wn.down, &m.down, &g.weights.down)?;
    Ok((HeadWeights { up, gate, down }, HeadWeights { up: mup, gate: mgate, down: mdown }))
}

/// Splits `[0, len)` into consecutive chunks of `size` (the last one may be
/// shorter).
pub fn chunk_spans(len: usize, size: usize) -> Vec<(usize, usize)> {
    assert!(size > 0, "chunk size must be positive");
    (0..len).step_by(size).map(|s| (s, (s + size).min(len))).collect()
}

/// Tape-free memory state for all heads of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub config: MemoryConfig,
    pub weights: Vec<HeadWeights>,
    pub momentum: Vec<HeadWeights>,
    pub init_norms: Vec<InitNorms>,
    pub chunk_index: usize,
}

const STATE_MAGIC: &[u8; 4] = b"AMMS";
const STATE_VERSION: u32 = 1;

impl MemoryState {
    pub fn new<R: Rng + ?Sized>(config: MemoryConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let weights: Vec<HeadWeights> = (0..config.n_heads).map(|_| HeadWeights::init(&config, rng)).collect();
        Self::from_weights(config, weights)
    }

    /// Starts from explicit initial weights; their row norms become the
    /// normalization targets.
    pub fn from_weights(config: MemoryConfig, weights: Vec<HeadWeights>) -> Result<Self> {
        config.validate()?;
        if weights.len() != config.n_heads {
            return Err(Error::Config(format!("{} heads of weights for {} heads", weights.len(), config.n_heads)));
        }
        let init_norms = weights
            .iter()
            .map(|w| InitNorms::capture(w, config.normalize))
            .collect::<Result<Vec<_>>>()?;
        let momentum = (0..config.n_heads).map(|_| HeadWeights::zeros(&config)).collect();
        Ok(Self {
            config,
            weights,
            momentum,
            init_norms,
            chunk_index: 0,
        })
    }

    fn head_cols(&self, x: &Tensor, h: usize) -> Result<Tensor> {
        let d = self.config.head_dim;
        if x.cols() != self.config.width() {
            return Err(Error::dim("memory", format!("width {} for {} heads of {d}", x.cols(), self.config.n_heads)));
        }
        crate::tensor::slice_cols(x, h * d, (h + 1) * d)
    }

    /// Read of head `h` for queries `[c, head_dim]` on the current weights.
    pub fn memory_read(&self, h: usize, q: &Tensor) -> Result<Tensor> {
        Ok(forward_ops(&mut Eager, &self.weights[h], q)?.out)
    }

    /// Read of all heads for queries `[c, n_heads·head_dim]`.
    pub fn read_all(&self, q: &Tensor) -> Result<Tensor> {
        let parts = (0..self.config.n_heads)
            .map(|h| self.memory_read(h, &self.head_cols(q, h)?))
            .collect::<Result<Vec<_>>>()?;
        crate::tensor::concat_cols(&parts.iter().collect::<Vec<_>>())
    }

    pub fn inner_loss(&self, h: usize, k: &Tensor, v: &Tensor) -> Result<f64> {
        Ok(inner_loss_ops(&mut Eager, &self.weights[h], k, v)?.item())
    }

    /// Manual inner gradients of head `h` with per-token rates `eta`.
    pub fn inner_gradients(&self, h: usize, k: &Tensor, v: &Tensor, eta: &[f64]) -> Result<InnerGradients<Tensor>> {
        self.inner_gradients_with(h, k, v, eta, None)
    }

    #[doc(hidden)]
    pub fn inner_gradients_with(
        &self,
        h: usize,
        k: &Tensor,
        v: &Tensor,
        eta: &[f64],
        fault: Option<GradFault>,
    ) -> Result<InnerGradients<Tensor>> {
        let e = Tensor::new(vec![eta.len(), 1], eta.to_vec())?;
        inner_gradients_ops(&mut Eager, &self.weights[h], k, v, Some(&e), self.config.eta_on_down, fault)
    }

    /// Restores the configured matrices' row norms (in place).
    pub fn normalize_weights(&mut self) -> Result<()> {
        for (w, n) in self.weights.iter_mut().zip(&self.init_norms) {
            *w = normalize_ops(&mut Eager, w, n)?;
        }
        Ok(())
    }

    /// Momentum step for head `h` with already weighted and clipped
    /// gradients. Rejects (and leaves the state untouched on) any
    /// non-finite result.
    pub fn momentum_update(&mut self, h: usize, grads: &HeadWeights, mu: f64) -> Result<()> {
        let step = |w: &Tensor, m: &Tensor, g: &Tensor| -> (Tensor, Tensor) {
            let m_new = Tensor::raw(
                m.shape().to_vec(),
                m.data().iter().zip(g.data()).map(|(m, g)| mu * m - g).collect(),
            );
            let w_new = Tensor::raw(
                w.shape().to_vec(),
                w.data().iter().zip(m_new.data()).map(|(a, b)| a + b).collect(),
            );
            (w_new, m_new)
        };
        let (w, m) = (&self.weights[h], &self.momentum[h]);
        let (up, mup) = step(&w.up, &m.up, &grads.up);
        let (gate, mgate) = step(&w.gate, &m.gate, &grads.gate);
        let (down, mdown) = step(&w.down, &m.down, &grads.down);
        let weights = HeadWeights { up, gate, down };
        let momentum = HeadWeights { up: mup, gate: mgate, down: mdown };
        if !weights.all_finite() || !momentum.all_finite() {
            return Err(Error::NonFinite("momentum_update"));
        }
        self.weights[h] = weights;
        self.momentum[h] = momentum;
        Ok(())
    }

    /// One chunk for every head: returns the reads `[c, n_heads·head_dim]`
    /// and advances the state. On error the state is unchanged.
    pub fn process_chunk(&mut self, q: &Tensor, k: &Tensor, v: &Tensor, metas: &[ChunkMeta]) -> Result<Tensor> {
        let read = self.read_all(q)?;
        if q.rows() != k.rows() {
            return Err(Error::dim("process_chunk", format!("{} queries for {} keys", q.rows(), k.rows())));
        }
        self.update(k, v, metas)?;
        Ok(read)
    }

    /// The write half of [`process_chunk`](Self::process_chunk). On error
    /// the state is unchanged.
    pub fn update(&mut self, k: &Tensor, v: &Tensor, metas: &[ChunkMeta]) -> Result<()> {
        if metas.len() != self.config.n_heads {
            return Err(Error::dim("process_chunk", format!("{} metas for {} heads", metas.len(), self.config.n_heads)));
        }
        let c = k.rows();
        let mut next = self.clone();
        for (h, meta) in metas.iter().enumerate() {
            if meta.eta.len() != c {
                return Err(Error::dim("process_chunk", format!("{} rates for {c} rows", meta.eta.len())));
            }
            let eta = Tensor::new(vec![c, 1], meta.eta.clone())?;
            let mu = Tensor::new(vec![1, 1], vec![meta.mu])?;
            let (kh, vh) = (self.head_cols(k, h)?, self.head_cols(v, h)?);
            let (w, m) = update_ops(
                &mut Eager,
                &self.config,
                &self.init_norms[h],
                &self.weights[h],
                &self.momentum[h],
                &kh,
                &vh,
                &eta,
                &mu,
            )?;
            if !w.all_finite() || !m.all_finite() {
                return Err(Error::NonFinite("process_chunk"));
            }
            next.weights[h] = w;
            next.momentum[h] = m;
        }
        next.chunk_index += 1;
        *self = next;
        Ok(())
    }

    /// Runs a whole sequence with fixed chunk size. `eta` is `[L, n_heads]`
    /// and `mu[j][h]` the decay of chunk `j`, head `h`.
    pub fn process_sequence(
        &mut self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        eta: &Tensor,
        mu: &[Vec<f64>],
        chunk: usize,
    ) -> Result<Tensor> {
        let spans = chunk_spans(q.rows(), chunk);
        if mu.len() != spans.len() {
            return Err(Error::dim("process_sequence", format!("{} decays for {} chunks", mu.len(), spans.len())));
        }
        let n = self.config.n_heads;
        let mut outs = Vec::with_capacity(spans.len());
        for (j, &(s, e)) in spans.iter().enumerate() {
            let metas: Vec<ChunkMeta> = (0..n)
                .map(|h| ChunkMeta { eta: (s..e).map(|t| eta.get(t, h)).collect(), mu: mu[j][h] })
                .collect();
            let rows = |x: &Tensor| crate::tensor::slice_rows(x, s, e);
            outs.push(self.process_chunk(&rows(q)?, &rows(k)?, &rows(v)?, &metas)?);
        }
        crate::tensor::concat_rows(&outs.iter().collect::<Vec<_>>())
    }

    /// Versioned little-endian binary encoding. Its length depends only on
    /// `(n_heads, head_dim, hidden)` and the normalization set.
    ///
    /// Layout: `b"AMMS"`, `u32` version, `u32` n_heads, `u32` head_dim,
    /// `u32` hidden, `u32` normalize flags (bit 0 up, 1 gate, 2 down),
    /// `u64` chunk_index, then per head the `f64` data of W_up, W_gate,
    /// W_down, momentum of each in the same order, and the captured norms
    /// of each flagged matrix.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let flags = c.normalize.up as u32 | (c.normalize.gate as u32) << 1 | (c.normalize.down as u32) << 2;
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        for v in [STATE_VERSION, c.n_heads as u32, c.head_dim as u32, c.hidden as u32, flags] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.chunk_index as u64).to_le_bytes());
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for h in 0..c.n_heads {
            self.weights[h].iter().for_each(|t| put(t.data()));
            self.momentum[h].iter().for_each(|t| put(t.data()));
            let n = &self.init_norms[h];
            for v in [&n.up, &n.gate, &n.down].into_iter().flatten() {
                put(v);
            }
        }
        out
    }

    /// Inverse of [`to_bytes`](Self::to_bytes). Clip threshold and η
    /// options are not part of the blob and come from `template`.
    pub fn from_bytes(bytes: &[u8], template: &MemoryConfig) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("memory state: {m}"));
        if bytes.len() < 32 || &bytes[..4] != STATE_MAGIC {
            return Err(bad("missing header"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if u32_at(4) != STATE_VERSION as usize {
            return Err(bad("unsupported version"));
        }
        let (n, d, hid, flags) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
        let chunk_index = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        let mut config = template.clone();
        config.n_heads = n;
        config.head_dim = d;
        config.hidden = hid;
        config.normalize = NormalizeSet { up: flags & 1 != 0, gate: flags & 2 != 0, down: flags & 4 != 0 };
        let mut pos = 32;
        let mut take = |len: usize| -> Result<Vec<f64>> {
            let end = pos + 8 * len;
            let chunk = bytes.get(pos..end).ok_or_else(|| bad("truncated"))?;
            pos = end;
            Ok(chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
        };
        let mut weights = Vec::with_capacity(n);
        let mut momentum = Vec::with_capacity(n);
        let mut init_norms = Vec::with_capacity(n);
        let mats = |take: &mut dyn FnMut(usize) -> Result<Vec<f64>>| -> Result<HeadWeights> {
            Ok(HeadWeights {
                up: Tensor::new(vec![hid, d], take(hid * d)?)?,
                gate: Tensor::new(vec![hid, d], take(hid * d)?)?,
                down: Tensor::new(vec![d, hid], take(d * hid)?)?,
            })
        };
        for _ in 0..n {
            weights.push(mats(&mut take)?);
            momentum.push(mats(&mut take)?);
            let ns = config.normalize;
            init_norms.push(InitNorms {
                up: if ns.up { Some(take(hid)?) } else { None },
                gate: if ns.gate { Some(take(hid)?) } else { None },
                down: if ns.down { Some(take(d)?) } else { None },
            });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { config, weights, momentum, init_norms, chunk_index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(seed: u64) -> MemoryState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MemoryState::new(MemoryConfig::new(2, 8, 16), &mut rng).unwrap()
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn empty_memory_reads_identity() {
        let s = state(1);
        let q = rand(&[4, 8], 2);
        assert_eq!(s.memory_read(0, &q).unwrap(), q);
        let z = Tensor::zeros(&[4, 8]);
        let mut s2 = state(3);
        s2.weights[0].down = rand(&[8, 16], 4);
        assert_eq!(s2.memory_read(0, &z).unwrap(), z);
    }

    #[test]
    fn zero_rates_or_values_give_zero_gradients() {
        let mut s = state(5);
        s.weights[1].down = rand(&[8, 16], 6);
        let (k, v) = (rand(&[4, 8], 7), rand(&[4, 8], 8));
        let g = s.inner_gradients(1, &k, &v, &[0.0; 4]).unwrap();
        assert!(g.weights.iter().all(|t| t.max_abs() == 0.0));
        let g = s.inner_gradients(1, &k, &Tensor::zeros(&[4, 8]), &[1.0; 4]).unwrap();
        assert!(g.weights.iter().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn loss_edge_cases() {
        let s = state(9);
        let k = rand(&[3, 8], 10);
        assert_eq!(s.inner_loss(0, &k, &Tensor::zeros(&[3, 8])).unwrap(), 0.0);
        let v = rand(&[3, 8], 11);
        let want: f64 = -k.data().iter().zip(v.data()).map(|(a, b)| a * b).sum::<f64>();
        assert!((s.inner_loss(0, &k, &v).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn fresh_weights_are_a_normalization_fixed_point() {
        let mut s = state(12);
        let before = s.weights.clone();
        s.normalize_weights().unwrap();
        for (a, b) in before.iter().zip(&s.weights) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!(x.max_abs_diff(y) < 1e-12);
            }
        }
    }

    #[test]
    fn normalization_undoes_scaling() {
        let mut s = state(13);
        let before = s.weights.clone();
        for w in &mut s.weights {
            w.up = w.up.map(|x| 3.7 * x);
            w.gate = w.gate.map(|x| 3.7 * x);
        }
        s.normalize_weights().unwrap();
        for (a, b) in before.iter().zip(&s.weights) {
            assert!(a.up.max_abs_diff(&b.up) < 1e-12);
            assert!(a.gate.max_abs_diff(&b.gate) < 1e-12);
        }
    }

    #[test]
    fn momentum_edge_cases() {
        let mut s = state(14);
        let before = s.clone();
        s.momentum_update(0, &HeadWeights::zeros(&s.config), 0.5).unwrap();
        assert_eq!(s.weights, before.weights);

        let g = HeadWeights { up: rand(&[16, 8], 15), gate: rand(&[16, 8], 16), down: rand(&[8, 16], 17) };
        let mut s = state(14);
        s.momentum_update(0, &g, 0.0).unwrap();
        let want = crate::tensor::sub(&before.weights[0].up, &g.up).unwrap();
        assert!(s.weights[0].up.max_abs_diff(&want) < 1e-15);

        // two chunks, constant g, mu = 0.5: ΔW = −g + (−0.5g − g) = −2.5g
        let mut s = state(14);
        s.momentum_update(0, &g, 0.5).unwrap();
        s.momentum_update(0, &g, 0.5).unwrap();
        let delta = crate::tensor::sub(&s.weights[0].gate, &before.weights[0].gate).unwrap();
        assert!(delta.max_abs_diff(&g.gate.map(|x| -2.5 * x)) < 1e-14);
    }

    #[test]
    fn momentum_rejects_overflow() {
        let mut s = state(18);
        let before = s.clone();
        let huge = HeadWeights {
            up: Tensor::full(&[16, 8], f64::MAX),
            gate: Tensor::zeros(&[16, 8]),
            down: Tensor::zeros(&[8, 16]),
        };
        s.momentum_update(0, &huge, 0.5).unwrap();
        assert!(matches!(s.momentum_update(0, &huge, 0.5), Err(Error::NonFinite(_))));
        assert_ne!(s, before);
        let snapshot = s.clone();
        let _ = s.momentum_update(0, &huge, 0.5);
        assert_eq!(s, snapshot);
    }

    #[test]
    fn clipping() {
        let g = rand(&[5, 3], 19);
        let n = g.frobenius_norm();
        let c = crate::tensor::norm_clip(&g, n / 2.0);
        assert!((c.frobenius_norm() - n / 2.0).abs() < 1e-12);
        let cos: f64 = g.data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>() / (n * c.frobenius_norm());
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn read_ignores_current_chunk_contents() {
        let q = rand(&[4, 16], 20);
        let metas = vec![ChunkMeta::constant(4, 0.7, 0.5); 2];
        let mut a = state(21);
        let mut b = state(21);
        // give both a history
        let warm = (rand(&[4, 16], 22), rand(&[4, 16], 23));
        a.process_chunk(&q, &warm.0, &warm.1, &metas).unwrap();
        b.process_chunk(&q, &warm.0, &warm.1, &metas).unwrap();
        let ra = a.process_chunk(&q, &rand(&[4, 16], 24), &rand(&[4, 16], 25), &metas).unwrap();
        let rb = b.process_chunk(&q, &rand(&[4, 16], 26), &rand(&[4, 16], 27), &metas).unwrap();
        assert_eq!(ra, rb);
        assert_ne!(a.weights, b.weights);
    }

    #[test]
    fn bytes_round_trip_and_fixed_size() {
        let mut s = state(28);
        let q = rand(&[4, 16], 29);
        s.process_chunk(&q, &q, &q, &vec![ChunkMeta::constant(4, 0.5, 0.5); 2]).unwrap();
        let bytes = s.to_bytes();
        let back = MemoryState::from_bytes(&bytes, &s.config).unwrap();
        assert_eq!(back, s);
        assert_eq!(bytes.len(), state(30).to_bytes().len());
        assert!(MemoryState::from_bytes(&bytes[..bytes.len() - 1], &s.config).is_err());
    }

    #[test]
    fn normalizing_zero_down_is_rejected() {
        let mut cfg = MemoryConfig::new(1, 4, 8);
        cfg.normalize.down = true;
        assert!(cfg.validate().is_err());
        cfg.init_down_std = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = MemoryState::new(cfg, &mut rng).unwrap();
        assert!(s.init_norms[0].down.as_ref().unwrap().iter().all(|&n| n > 0.0));
    }
}
