//! Decoder model: token mixer (windowed attention plus an optional memory
//! branch), SwiGLU channel mixer, and the teacher-to-student conversion.
//!
//! Parameters live in a flat named store so one set of layer functions,
//! generic over [`Ops`], serves eager inference, taped training and the
//! checkpoint format.

use std::collections::{HashMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttnConfig, HeadLayout, Visibility, WindowKVCache};
use crate::autodiff::{Eager, Ops};
use crate::branch::{branch_sequence_ops, BranchKind, ChunkedMemory, FastInit, StreamingMemory};
use crate::error::{Error, Result};
use crate::linear::LinearMemory;
use crate::memory::{HeadWeights, InitNorms, MemoryConfig, MemoryState, NormalizeSet};
use crate::tensor::{self, Tensor};

/// Architecture hyperparameters. Window, sinks and chunk size are runtime
/// choices and live in [`Runtime`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub branch: BranchKind,
    /// Width of one memory head; there is one memory head per KV head.
    pub mem_head_dim: usize,
    pub mem_hidden: usize,
    pub conv_kernel: usize,
    pub clip: f64,
    pub eta_on_down: bool,
    pub normalize: NormalizeSet,
    pub mem_init_down_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            ffn_hidden: 128,
            rope_theta: 10_000.0,
            norm_eps: 1e-6,
            branch: BranchKind::None,
            mem_head_dim: 16,
            mem_hidden: 32,
            conv_kernel: 4,
            clip: 1.0,
            eta_on_down: true,
            normalize: NormalizeSet::default(),
            mem_init_down_std: 0.0,
        }
    }
}

/// L2 normalization epsilon for memory queries and keys.
pub const L2_EPS: f64 = 1e-12;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.attn_config(1, 0).validate()?;
        if self.vocab == 0 || self.d_model == 0 || self.n_layers == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.branch != BranchKind::None {
            if self.conv_kernel == 0 {
                return Err(Error::Config("conv_kernel must be at least 1".into()));
            }
            self.memory_config().validate()?;
        }
        Ok(())
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
        }
    }

    pub fn attn_config(&self, window: usize, sinks: usize) -> AttnConfig {
        AttnConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            window,
            sinks,
            rope_theta: self.rope_theta,
        }
    }

    pub fn memory_config(&self) -> MemoryConfig {
        MemoryConfig {
            n_heads: self.n_kv_heads,
            head_dim: self.mem_head_dim,
            hidden: self.mem_hidden,
            clip: self.clip,
            normalize: self.normalize,
            eta_on_down: self.eta_on_down,
            init_down_std: self.mem_init_down_std,
        }
    }

    /// `n_kv_heads · mem_head_dim`.
    pub fn mem_width(&self) -> usize {
        self.n_kv_heads * self.mem_head_dim
    }

    /// Trainable parameters added by conversion, per layer: memory Q/K/V
    /// projections and conv kernels, Q/K norm gains, rate and decay
    /// projections with biases, output gate with bias, output projection
    /// and the channel gate α.
    pub fn trainable_per_layer(&self) -> usize {
        let (d, mw, n) = (self.d_model, self.mem_width(), self.n_kv_heads);
        3 * d * mw + 3 * self.conv_kernel * mw + 2 * self.mem_head_dim + 2 * (d * n + n) + (d * mw + mw) + mw * d + d
    }
}

/// Per-call attention and memory settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Runtime {
    /// `None` means full causal attention.
    pub window: Option<usize>,
    pub sinks: usize,
    pub chunk: usize,
}

impl Runtime {
    pub fn full(chunk: usize) -> Self {
        Self { window: None, sinks: 0, chunk }
    }

    pub fn sliding(window: usize, sinks: usize, chunk: usize) -> Self {
        Self { window: Some(window), sinks, chunk }
    }

    pub fn visibility(&self) -> Visibility {
        match self.window {
            None => Visibility::FULL,
            Some(w) => Visibility::sliding(w, self.sinks),
        }
    }
}

/// Ordered named parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<V = Tensor> {
    names: Vec<String>,
    values: Vec<V>,
    index: HashMap<String, usize>,
}

impl<V> Default for Params<V> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }
}

impl<V> Params<V> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: V) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&V> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut V> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.values[i]),
            None => Err(Error::Config(format!("missing parameter {name}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &V)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &V) -> U) -> Params<U> {
        Params {
            names: self.names.clone(),
            values: self.iter().map(|(n, v)| f(n, v)).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters updated by distillation: everything in a layer's memory
/// branch, including the channel gate α.
pub fn is_trainable(name: &str) -> bool {
    name.contains(".mem.")
}

fn lp(i: usize, name: &str) -> String {
    format!("l{i}.{name}")
}

/// RMSNorm applied to each head's slice with a shared `[head_dim]` gain.
fn head_rmsnorm<O: Ops>(o: &mut O, x: &O::V, heads: usize, gain: &O::V, eps: f64) -> Result<O::V> {
    let (l, w) = (o.value(x).rows(), o.value(x).cols());
    let flat = o.reshape(x, &[l * heads, w / heads])?;
    let normed = o.rmsnorm(&flat, gain, eps)?;
    o.reshape(&normed, &[l, w])
}

fn head_l2<O: Ops>(o: &mut O, x: &O::V, heads: usize) -> Result<O::V> {
    let (l, w) = (o.value(x).rows(), o.value(x).cols());
    let flat = o.reshape(x, &[l * heads, w / heads])?;
    let normed = o.l2_normalize_rows(&flat, L2_EPS)?;
    o.reshape(&normed, &[l, w])
}

/// Attention Q/K/V from the normed input: projections, per-head RMSNorm on
/// Q and K, rotary embedding at `positions`.
pub fn attention_qkv_ops<O: Ops>(
    o: &mut O,
    cfg: &ModelConfig,
    p: &Params<O::V>,
    i: usize,
    h: &O::V,
    positions: &[usize],
) -> Result<(O::V, O::V, O::V)> {
    let q = o.matmul(h, p.get(&lp(i, "attn.wq"))?)?;
    let k = o.matmul(h, p.get(&lp(i, "attn.wk"))?)?;
    let v = o.matmul(h, p.get(&lp(i, "attn.wv"))?)?;
    let q = head_rmsnorm(o, &q, cfg.n_heads, p.get(&lp(i, "attn.q_norm"))?, cfg.norm_eps)?;
    let k = head_rmsnorm(o, &k, cfg.n_kv_heads, p.get(&lp(i, "attn.k_norm"))?, cfg.norm_eps)?;
    let q = o.rope(&q, cfg.n_heads, positions, cfg.rope_theta)?;
    let k = o.rope(&k, cfg.n_kv_heads, positions, cfg.rope_theta)?;
    Ok((q, k, v))
}

/// Windowed-attention branch including its output projection.
pub fn swa_branch_ops<O: Ops>(o: &mut O, cfg: &ModelConfig, p: &Params<O::V>, i: usize, h: &O::V, rt: &Runtime) -> Result<O::V> {
    let positions: Vec<usize> = (0..o.value(h).rows()).collect();
    let (q, k, v) = attention_qkv_ops(o, cfg, p, i, h, &positions)?;
    let a = o.attention(&q, &k, &v, cfg.layout(), rt.visibility())?;
    o.matmul(&a, p.get(&lp(i, "attn.wo"))?)
}

/// Memory-branch Q/K/V: projections → causal depthwise conv → per-head
/// RMSNorm (Q, K) → per-head L2 normalization (Q, K). No positional
/// encoding.
pub fn produce_qkv_ops<O: Ops>(o: &mut O, cfg: &ModelConfig, p: &Params<O::V>, i: usize, h: &O::V) -> Result<(O::V, O::V, O::V)> {
    let n = cfg.n_kv_heads;
    let mut out = Vec::with_capacity(3);
    for s in ["q", "k", "v"] {
        let raw = o.matmul(h, p.get(&lp(i, &format!("mem.w{s}")))?)?;
        let conv = o.conv1d(&raw, p.get(&lp(i, &format!("mem.conv_{s}")))?)?;
        out.push(if s == "v" {
            conv
        } else {
            let normed = head_rmsnorm(o, &conv, n, p.get(&lp(i, &format!("mem.{s}_norm")))?, cfg.norm_eps)?;
            head_l2(o, &normed, n)?
        });
    }
    let v = out.pop().unwrap();
    let k = out.pop().unwrap();
    let q = out.pop().unwrap();
    Ok((q, k, v))
}

/// Per-token control signals `[L, n_mem]`: `rate = softplus(h·W_lr + b)`
/// and `gate = sigmoid(h·W_μ + b)`.
pub fn meta_signals_ops<O: Ops>(o: &mut O, p: &Params<O::V>, i: usize, h: &O::V) -> Result<(O::V, O::V)> {
    let lr = o.matmul(h, p.get(&lp(i, "mem.lr_w"))?)?;
    let lr = o.add_row(&lr, p.get(&lp(i, "mem.lr_b"))?)?;
    let mu = o.matmul(h, p.get(&lp(i, "mem.mu_w"))?)?;
    let mu = o.add_row(&mu, p.get(&lp(i, "mem.mu_b"))?)?;
    Ok((o.softplus(&lr)?, o.sigmoid(&mu)?))
}

/// Learning rates `η [L, n_mem]` and per-chunk decays `μ[j][head]` for an
/// eager input.
pub fn meta_params(model: &Model, i: usize, h: &Tensor, spans: &[(usize, usize)]) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let (rate, gate) = meta_signals_ops(&mut Eager, &model.params, i, h)?;
    let mu = spans
        .iter()
        .map(|&(s, e)| {
            (0..gate.cols())
                .map(|c| (s..e).map(|t| gate.get(t, c)).sum::<f64>() / (e - s) as f64)
                .collect()
        })
        .collect();
    Ok((rate, mu))
}

#[allow(clippy::type_complexity)]
fn fast_init_weights<O: Ops>(o: &mut O, cfg: &ModelConfig, p: &Params<O::V>, i: usize) -> Result<(Vec<HeadWeights<O::V>>, Vec<InitNorms>)> {
    let mut weights = Vec::with_capacity(cfg.n_kv_heads);
    let mut norms = Vec::with_capacity(cfg.n_kv_heads);
    for j in 0..cfg.n_kv_heads {
        let w = HeadWeights {
            up: p.get(&lp(i, &format!("fast.h{j}.up")))?.clone(),
            gate: p.get(&lp(i, &format!("fast.h{j}.gate")))?.clone(),
            down: p.get(&lp(i, &format!("fast.h{j}.down")))?.clone(),
        };
        let values = w.map(|v| o.value(v).clone());
        norms.push(InitNorms::capture(&values, cfg.normalize)?);
        weights.push(w);
    }
    Ok((weights, norms))
}

/// Memory branch output in model space, before the channel gate α.
/// `x` is the pre-norm layer input (feeds the output gate), `h` the normed
/// input.
pub fn memory_branch_ops<O: Ops>(
    o: &mut O,
    cfg: &ModelConfig,
    p: &Params<O::V>,
    i: usize,
    x: &O::V,
    h: &O::V,
    rt: &Runtime,
) -> Result<O::V> {
    let (q, k, v) = produce_qkv_ops(o, cfg, p, i, h)?;
    let (rate, gate) = meta_signals_ops(o, p, i, h)?;
    let mcfg = cfg.memory_config();
    let reads = if cfg.branch == BranchKind::AllMem {
        let (weights, norms) = fast_init_weights(o, cfg, p, i)?;
        let init = FastInit { config: &mcfg, weights: &weights, norms: &norms };
        branch_sequence_ops(o, cfg.branch, Some(&init), cfg.n_kv_heads, &q, &k, &v, &rate, &gate, rt.chunk)?
    } else {
        branch_sequence_ops(o, cfg.branch, None, cfg.n_kv_heads, &q, &k, &v, &rate, &gate, rt.chunk)?
    };
    let g = o.matmul(x, p.get(&lp(i, "mem.gate_w"))?)?;
    let g = o.add_row(&g, p.get(&lp(i, "mem.gate_b"))?)?;
    let g = o.sigmoid(&g)?;
    let gated = o.mul(&reads, &g)?;
    o.matmul(&gated, p.get(&lp(i, "mem.wo"))?)
}

/// Token mixer: `SWA(RMSNorm(x)) + α ⊙ Memory(RMSNorm(x))`, sharing one
/// RMSNorm.
pub fn mix_tokens_ops<O: Ops>(o: &mut O, cfg: &ModelConfig, p: &Params<O::V>, i: usize, x: &O::V, rt: &Runtime) -> Result<O::V> {
    let h = o.rmsnorm(x, p.get(&lp(i, "attn_norm"))?, cfg.norm_eps)?;
    let swa = swa_branch_ops(o, cfg, p, i, &h, rt)?;
    if cfg.branch == BranchKind::None {
        return Ok(swa);
    }
    let mem = memory_branch_ops(o, cfg, p, i, x, &h, rt)?;
    let scaled = o.mul_row(&mem, p.get(&lp(i, "mem.alpha"))?)?;
    o.add(&swa, &scaled)
}

/// SwiGLU MLP on the normed input.
pub fn channel_mixer_ops<O: Ops>(o: &mut O, p: &Params<O::V>, i: usize, h: &O::V) -> Result<O::V> {
    let g = o.matmul(h, p.get(&lp(i, "mlp.w_gate"))?)?;
    let u = o.matmul(h, p.get(&lp(i, "mlp.w_up"))?)?;
    let g = o.silu(&g)?;
    let a = o.mul(&g, &u)?;
    o.matmul(&a, p.get(&lp(i, "mlp.w_down"))?)
}

/// `x + TokenMixer(x)` followed by `x + ChannelMixer(RMSNorm(x))`.
pub fn layer_ops<O: Ops>(o: &mut O, cfg: &ModelConfig, p: &Params<O::V>, i: usize, x: &O::V, rt: &Runtime) -> Result<O::V> {
    let mixed = mix_tokens_ops(o, cfg, p, i, x, rt)?;
    let x = o.add(x, &mixed)?;
    let h = o.rmsnorm(&x, p.get(&lp(i, "mlp_norm"))?, cfg.norm_eps)?;
    let mlp = channel_mixer_ops(o, p, i, &h)?;
    o.add(&x, &mlp)
}

/// Logits `[L, vocab]` for a token sequence.
pub fn forward_ops<O: Ops>(o: &mut O, cfg: &ModelConfig, p: &Params<O::V>, tokens: &[usize], rt: &Runtime) -> Result<O::V> {
    let mut x = o.embedding(p.get("embed")?, tokens)?;
    for i in 0..cfg.n_layers {
        x = layer_ops(o, cfg, p, i, &x, rt)?;
    }
    let h = o.rmsnorm(&x, p.get("final_norm")?, cfg.norm_eps)?;
    o.matmul(&h, p.get("unembed")?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    /// Randomly initialized full-attention model (no memory branch).
    pub fn init_teacher<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut config = config;
        config.branch = BranchKind::None;
        config.validate()?;
        let c = &config;
        let (d, qw, kw) = (c.d_model, c.n_heads * c.head_dim, c.n_kv_heads * c.head_dim);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let resid = 1.0 / (2.0 * c.n_layers as f64).sqrt();
        let mut p = Params::new();
        p.insert("embed", Tensor::randn(&[c.vocab, d], 1.0, rng));
        for i in 0..c.n_layers {
            p.insert(lp(i, "attn_norm"), Tensor::full(&[d], 1.0));
            p.insert(lp(i, "attn.wq"), Tensor::randn(&[d, qw], fan(d), rng));
            p.insert(lp(i, "attn.wk"), Tensor::randn(&[d, kw], fan(d), rng));
            p.insert(lp(i, "attn.wv"), Tensor::randn(&[d, kw], fan(d), rng));
            p.insert(lp(i, "attn.wo"), Tensor::randn(&[qw, d], fan(qw) * resid, rng));
            p.insert(lp(i, "attn.q_norm"), Tensor::full(&[c.head_dim], 1.0));
            p.insert(lp(i, "attn.k_norm"), Tensor::full(&[c.head_dim], 1.0));
            p.insert(lp(i, "mlp_norm"), Tensor::full(&[d], 1.0));
            p.insert(lp(i, "mlp.w_gate"), Tensor::randn(&[d, c.ffn_hidden], fan(d), rng));
            p.insert(lp(i, "mlp.w_up"), Tensor::randn(&[d, c.ffn_hidden], fan(d), rng));
            p.insert(lp(i, "mlp.w_down"), Tensor::randn(&[c.ffn_hidden, d], fan(c.ffn_hidden) * resid, rng));
        }
        p.insert("final_norm", Tensor::full(&[d], 1.0));
        p.insert("unembed", Tensor::randn(&[d, c.vocab], fan(d), rng));
        Ok(Self { config, params: p })
    }

    /// Eager logits.
    pub fn logits(&self, tokens: &[usize], rt: &Runtime) -> Result<Tensor> {
        forward_ops(&mut Eager, &self.config, &self.params, tokens, rt)
    }

    /// Same parameters with the memory branch switched off: the plain
    /// windowed-attention model.
    pub fn without_memory(&self) -> Self {
        let mut m = self.clone();
        m.config.branch = BranchKind::None;
        m
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|(n, _)| is_trainable(n)).map(|(_, t)| t.len()).sum()
    }

    /// Starts token-by-token decoding. `max_len` bounds the cache when the
    /// runtime uses full attention.
    pub fn stream(&self, rt: Runtime, max_len: usize) -> Result<Stream<'_>> {
        Stream::new(self, rt, max_len)
    }
}

/// Converts a full-attention teacher into a student with a memory branch.
///
/// Attention, MLP, embeddings and norms are copied verbatim. The memory
/// branch gets its own Q/K/V projections initialized from the teacher's
/// (memory head `j` takes the first query head of KV group `j` and KV head
/// `j`), identity conv kernels, unit norm gains, zero rate/decay/gate
/// projections, an output projection copied from the matching rows of the
/// teacher's `W_o`, and α = 0.
pub fn convert_teacher<R: Rng + ?Sized>(teacher: &Model, branch: BranchKind, rng: &mut R) -> Result<Model> {
    let tc = &teacher.config;
    if tc.branch != BranchKind::None {
        return Err(Error::Conversion("teacher already has a memory branch".into()));
    }
    if branch == BranchKind::None {
        return Err(Error::Conversion("target branch must not be none".into()));
    }
    if tc.mem_head_dim != tc.head_dim {
        return Err(Error::Conversion(format!(
            "memory head width {} must equal attention head width {} to reuse teacher projections",
            tc.mem_head_dim, tc.head_dim
        )));
    }
    let mut config = tc.clone();
    config.branch = branch;
    config.validate()?;
    let (d, hd, n, mw, kk) = (tc.d_model, tc.head_dim, tc.n_kv_heads, config.mem_width(), tc.conv_kernel);
    let group = tc.n_heads / tc.n_kv_heads;
    let mut p = teacher.params.clone();
    for i in 0..tc.n_layers {
        let wq = p.get(&lp(i, "attn.wq"))?.clone();
        let q_cols: Vec<Tensor> = (0..n)
            .map(|j| tensor::slice_cols(&wq, j * group * hd, (j * group + 1) * hd))
            .collect::<Result<_>>()?;
        p.insert(lp(i, "mem.wq"), tensor::concat_cols(&q_cols.iter().collect::<Vec<_>>())?);
        p.insert(lp(i, "mem.wk"), p.get(&lp(i, "attn.wk"))?.clone());
        p.insert(lp(i, "mem.wv"), p.get(&lp(i, "attn.wv"))?.clone());
        let mut identity = vec![0.0; kk * mw];
        identity[(kk - 1) * mw..].iter_mut().for_each(|v| *v = 1.0);
        for s in ["q", "k", "v"] {
            p.insert(lp(i, &format!("mem.conv_{s}")), Tensor::new(vec![kk, mw], identity.clone())?);
        }
        p.insert(lp(i, "mem.q_norm"), Tensor::full(&[hd], 1.0));
        p.insert(lp(i, "mem.k_norm"), Tensor::full(&[hd], 1.0));
        p.insert(lp(i, "mem.lr_w"), Tensor::zeros(&[d, n]));
        p.insert(lp(i, "mem.lr_b"), Tensor::zeros(&[n]));
        p.insert(lp(i, "mem.mu_w"), Tensor::zeros(&[d, n]));
        p.insert(lp(i, "mem.mu_b"), Tensor::zeros(&[n]));
        p.insert(lp(i, "mem.gate_w"), Tensor::zeros(&[d, mw]));
        p.insert(lp(i, "mem.gate_b"), Tensor::zeros(&[mw]));
        let wo = p.get(&lp(i, "attn.wo"))?.clone();
        let o_rows: Vec<Tensor> = (0..n)
            .map(|j| tensor::slice_rows(&wo, j * group * hd, (j * group + 1) * hd))
            .collect::<Result<_>>()?;
        p.insert(lp(i, "mem.wo"), tensor::concat_rows(&o_rows.iter().collect::<Vec<_>>())?);
        p.insert(lp(i, "mem.alpha"), Tensor::zeros(&[d]));
        if branch == BranchKind::AllMem {
            let mcfg = config.memory_config();
            for j in 0..n {
                let w = HeadWeights::init(&mcfg, rng);
                p.insert(lp(i, &format!("fast.h{j}.up")), w.up);
                p.insert(lp(i, &format!("fast.h{j}.gate")), w.gate);
                p.insert(lp(i, &format!("fast.h{j}.down")), w.down);
            }
        }
    }
    Ok(Model { config, params: p })
}

struct LayerStream {
    cache: WindowKVCache,
    history: [VecDeque<Vec<f64>>; 3],
    memory: Option<Box<dyn StreamingMemory>>,
}

/// Token-by-token decoder state: one windowed KV cache, conv history and
/// recurrent memory per layer. Everything it holds is bounded by the
/// window, sink count, conv width and memory size.
pub struct Stream<'m> {
    model: &'m Model,
    rt: Runtime,
    pos: usize,
    layers: Vec<LayerStream>,
}

impl<'m> Stream<'m> {
    fn new(model: &'m Model, rt: Runtime, max_len: usize) -> Result<Self> {
        let cfg = &model.config;
        let (window, sinks) = match rt.window {
            Some(w) => (w, rt.sinks),
            None => (max_len.max(1), 0),
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let memory: Option<Box<dyn StreamingMemory>> = match cfg.branch {
                BranchKind::None => None,
                BranchKind::AllMem => {
                    let (weights, _) = fast_init_weights(&mut Eager, cfg, &model.params, i)?;
                    let state = MemoryState::from_weights(cfg.memory_config(), weights)?;
                    Some(Box::new(ChunkedMemory::new(state, rt.chunk)?))
                }
                kind => {
                    let rule = kind.linear_rule().expect("linear kind");
                    Some(Box::new(LinearMemory::new(rule, cfg.n_kv_heads, cfg.mem_head_dim)))
                }
            };
            layers.push(LayerStream {
                cache: WindowKVCache::new(&cfg.attn_config(window, sinks))?,
                history: Default::default(),
                memory,
            });
        }
        Ok(Self { model, rt, pos: 0, layers })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn runtime(&self) -> Runtime {
        self.rt
    }

    /// Number of cached attention entries in each layer.
    pub fn cache_lens(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.cache.len()).collect()
    }

    /// Serialized recurrent memory of each layer (empty without a branch).
    pub fn memory_bytes(&self) -> Vec<Vec<u8>> {
        self.layers
            .iter()
            .map(|l| l.memory.as_ref().map(|m| m.state_bytes()).unwrap_or_default())
            .collect()
    }

    /// Feeds one token and returns its logits row.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let (cfg, p, o) = (&self.model.config, &self.model.params, &mut Eager);
        let pos = self.pos;
        let mut x = o.embedding(p.get("embed")?, &[token])?;
        for (i, ls) in self.layers.iter_mut().enumerate() {
            let h = o.rmsnorm(&x, p.get(&lp(i, "attn_norm"))?, cfg.norm_eps)?;
            let (q, k, v) = attention_qkv_ops(o, cfg, p, i, &h, &[pos])?;
            let a = ls.cache.decode_step(pos, q.data(), k.data(), v.data())?;
            let a = Tensor::new(vec![1, a.len()], a)?;
            let mut mixed = o.matmul(&a, p.get(&lp(i, "attn.wo"))?)?;
            if let Some(mem) = ls.memory.as_mut() {
                let n = cfg.n_kv_heads;
                let mut streams = Vec::with_capacity(3);
                for (si, s) in ["q", "k", "v"].iter().enumerate() {
                    let raw = o.matmul(&h, p.get(&lp(i, &format!("mem.w{s}")))?)?;
                    let hist = &mut ls.history[si];
                    hist.push_back(raw.into_data());
                    if hist.len() > cfg.conv_kernel {
                        hist.pop_front();
                    }
                    let rows: Vec<&[f64]> = hist.iter().map(Vec::as_slice).collect();
                    let window = Tensor::from_rows(&rows)?;
                    let conv = o.conv1d(&window, p.get(&lp(i, &format!("mem.conv_{s}")))?)?;
                    let last = tensor::slice_rows(&conv, conv.rows() - 1, conv.rows())?;
                    streams.push(if *s == "v" {
                        last
                    } else {
                        let normed = head_rmsnorm(o, &last, n, p.get(&lp(i, &format!("mem.{s}_norm")))?, cfg.norm_eps)?;
                        head_l2(o, &normed, n)?
                    });
                }
                let (rate, gate) = meta_signals_ops(o, p, i, &h)?;
                let read = mem.step(streams[0].data(), streams[1].data(), streams[2].data(), rate.data(), gate.data())?;
                let read = Tensor::new(vec![1, read.len()], read)?;
                let g = o.matmul(&x, p.get(&lp(i, "mem.gate_w"))?)?;
                let g = o.add_row(&g, p.get(&lp(i, "mem.gate_b"))?)?;
                let g = o.sigmoid(&g)?;
                let gated = o.mul(&read, &g)?;
                let out = o.matmul(&gated, p.get(&lp(i, "mem.wo"))?)?;
                let scaled = o.mul_row(&out, p.get(&lp(i, "mem.alpha"))?)?;
                mixed = o.add(&mixed, &scaled)?;
            }
            let x1 = o.add(&x, &mixed)?;
            let h2 = o.rmsnorm(&x1, p.get(&lp(i, "mlp_norm"))?, cfg.norm_eps)?;
            let mlp = channel_mixer_ops(o, p, i, &h2)?;
            x = o.add(&x1, &mlp)?;
        }
        let h = o.rmsnorm(&x, p.get("final_norm")?, cfg.norm_eps)?;
        let logits = o.matmul(&h, p.get("unembed")?)?;
        self.pos += 1;
        Ok(logits.into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(l: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..l).map(|_| rng.gen_range(0..64)).collect()
    }

    #[test]
    fn zero_rates_give_documented_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let teacher = Model::init_teacher(ModelConfig::default(), &mut rng).unwrap();
        let student = convert_teacher(&teacher, BranchKind::AllMem, &mut rng).unwrap();
        let h = Tensor::randn(&[12, 64], 1.0, &mut rng);
        let (eta, mu) = meta_params(&student, 0, &h, &[(0, 8), (8, 12)]).unwrap();
        assert!(eta.data().iter().all(|&e| (e - 2f64.ln()).abs() < 1e-15));
        assert!(mu.iter().flatten().all(|&m| m == 0.5));
    }

    #[test]
    fn trainable_count_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let teacher = Model::init_teacher(ModelConfig::default(), &mut rng).unwrap();
        for kind in [BranchKind::AllMem, BranchKind::Mamba2] {
            let s = convert_teacher(&teacher, kind, &mut rng).unwrap();
            assert_eq!(s.trainable_count(), s.config.trainable_per_layer() * s.config.n_layers);
        }
    }

    #[test]
    fn conversion_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let teacher = Model::init_teacher(ModelConfig::default(), &mut rng).unwrap();
        assert!(convert_teacher(&teacher, BranchKind::None, &mut rng).is_err());
        let student = convert_teacher(&teacher, BranchKind::AllMem, &mut rng).unwrap();
        assert!(matches!(convert_teacher(&student, BranchKind::AllMem, &mut rng), Err(Error::Conversion(_))));
        let mut odd = teacher.clone();
        odd.config.mem_head_dim = 8;
        assert!(matches!(convert_teacher(&odd, BranchKind::AllMem, &mut rng), Err(Error::Conversion(_))));
    }

    #[test]
    fn stream_matches_batch_for_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let teacher = Model::init_teacher(ModelConfig::default(), &mut rng).unwrap();
        let toks = tokens(20, 5);
        let rt = Runtime::sliding(6, 1, 4);
        let batch = teacher.logits(&toks, &rt).unwrap();
        let mut s = teacher.stream(rt, 20).unwrap();
        for (t, &tok) in toks.iter().enumerate() {
            let row = s.step(tok).unwrap();
            for (a, b) in row.iter().zip(batch.row(t)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
