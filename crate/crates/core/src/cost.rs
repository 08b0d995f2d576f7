//! Closed-form FLOP and cache accounting for the token mixers and the
//! channel mixer.
//!
//! One multiply-accumulate is two FLOPs under [`Convention::Flops`] and one
//! under [`Convention::Macs`]; elementwise operations count one each under
//! both. All counts cover every layer of the model.
//!
//! Coefficients, per layer, with `P(L)` the number of visible
//! (query, key) pairs:
//!
//! | term | MACs |
//! |---|---|
//! | attention projections (Q, K, V, O) | `L·d·(2·q_w + 2·kv_w)` |
//! | attention scores + weighted sum | `2·n_heads·head_dim·P(L)` |
//! | memory projections (Q, K, V, output gate, output, rate, decay) | `L·d·(5·m_w + 2·n_mem)` |
//! | memory conv | `L·3·m_w·kernel` |
//! | memory read, per token and head | `3·d_h·hidden` |
//! | memory update forward, per token and head | `3·d_h·hidden` |
//! | memory gradients (`G_A` and three weight gradients), per token and head | `4·d_h·hidden` |
//! | channel mixer | `L·3·d·ffn` |
//!
//! Memory elementwise FLOPs per chunk of `c` tokens and head: activations
//! and residuals of both forward passes `2·(2·c·hidden + c·d_h)`, `G_in`
//! and `G_gate` `3·c·hidden`, rate scaling `2·c·d_h + c·hidden`, plus per
//! chunk normalization `2·(normalized rows·row width)`, clipping
//! `2·S` and momentum `3·S` with `S = 3·d_h·hidden` fast-weight entries.
//!
//! `P(L)` is `L(L+1)/2` for causal full attention and `Σ_t min(t+1, W+s)`
//! for the windowed branch under [`PairCounting::Causal`]; under
//! [`PairCounting::Dense`] it is `L²` and `L·min(L, W+s)`.
//!
//! Cache bytes: full attention keeps `2·L·n_kv·head_dim` values per layer,
//! the windowed branch `2·min(L, W+s)·n_kv·head_dim`, the memory its fast
//! weights, momentum and captured row norms, all as 8-byte floats.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::memory::NormalizeSet;

pub const CSV_HEADER: &str = "component,L,prefill_flops,decode_flops,cache_bytes";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    Flops,
    Macs,
}

impl Convention {
    fn mac(self) -> u128 {
        match self {
            Convention::Flops => 2,
            Convention::Macs => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairCounting {
    Causal,
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    FullAttention,
    SwaSinks,
    AllmemMemory,
    ChannelMixer,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::FullAttention,
        Component::SwaSinks,
        Component::AllmemMemory,
        Component::ChannelMixer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::FullAttention => "full_attention",
            Component::SwaSinks => "swa_sinks",
            Component::AllmemMemory => "allmem_memory",
            Component::ChannelMixer => "channel_mixer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// Memory width `d`; split into one head per KV head.
    pub mem_dim: usize,
    pub mem_hidden: usize,
    pub conv_kernel: usize,
    pub ffn_hidden: usize,
    pub window: usize,
    pub sinks: usize,
    pub chunk: usize,
    pub normalize: NormalizeSet,
    pub convention: Convention,
    pub pairs: PairCounting,
}

impl CostConfig {
    /// Dimensions of the 0.6B-class base model with a 512-wide memory,
    /// window 4096, 128 sinks and chunk 2048.
    pub fn reference_0_6b() -> Self {
        Self {
            d_model: 1024,
            n_layers: 28,
            n_heads: 16,
            n_kv_heads: 8,
            head_dim: 128,
            mem_dim: 512,
            mem_hidden: 128,
            conv_kernel: 4,
            ffn_hidden: 3072,
            window: 4096,
            sinks: 128,
            chunk: 2048,
            normalize: NormalizeSet::default(),
            convention: Convention::Flops,
            pairs: PairCounting::Causal,
        }
    }

    /// The desk-scale model.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            mem_dim: 32,
            mem_hidden: 32,
            conv_kernel: 4,
            ffn_hidden: 128,
            window: 16,
            sinks: 2,
            chunk: 8,
            normalize: NormalizeSet::default(),
            convention: Convention::Flops,
            pairs: PairCounting::Causal,
        }
    }

    fn mem_head_dim(&self) -> usize {
        self.mem_dim / self.n_kv_heads
    }
}

/// Cost of one component at one sequence length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub prefill_flops: u128,
    /// Cost of the token at position `L − 1` given `L − 1` predecessors.
    pub decode_flops: u128,
    pub cache_bytes: u128,
}

impl std::ops::Add for Cost {
    type Output = Cost;

    fn add(self, o: Cost) -> Cost {
        Cost {
            prefill_flops: self.prefill_flops + o.prefill_flops,
            decode_flops: self.decode_flops + o.decode_flops,
            cache_bytes: self.cache_bytes + o.cache_bytes,
        }
    }
}

const F64_BYTES: u128 = 8;

fn u(x: usize) -> u128 {
    x as u128
}

/// Visible (query, key) pairs over a causal prefix of length `l`.
pub fn full_pairs(l: usize, pairs: PairCounting) -> u128 {
    match pairs {
        PairCounting::Causal => u(l) * (u(l) + 1) / 2,
        PairCounting::Dense => u(l) * u(l),
    }
}

/// `Σ_{t<l} min(t+1, span)` in closed form, or `l·min(l, span)` when dense.
pub fn window_pairs(l: usize, span: usize, pairs: PairCounting) -> u128 {
    match pairs {
        PairCounting::Dense => u(l) * u(l.min(span)),
        PairCounting::Causal => {
            let k = l.min(span);
            u(k) * (u(k) + 1) / 2 + u(l - k) * u(span)
        }
    }
}

fn attention_projection_macs(cfg: &CostConfig, l: usize) -> u128 {
    let qw = cfg.n_heads * cfg.head_dim;
    let kw = cfg.n_kv_heads * cfg.head_dim;
    u(l) * u(cfg.d_model) * u(2 * qw + 2 * kw)
}

fn attention_pair_macs(cfg: &CostConfig, pairs: u128) -> u128 {
    2 * u(cfg.n_heads * cfg.head_dim) * pairs
}

fn kv_bytes(cfg: &CostConfig, tokens: usize) -> u128 {
    2 * u(tokens) * u(cfg.n_kv_heads * cfg.head_dim) * F64_BYTES
}

pub fn flops_full_attention(l: usize, cfg: &CostConfig) -> Cost {
    let m = cfg.convention.mac();
    let layers = u(cfg.n_layers);
    let prefill = attention_projection_macs(cfg, l) + attention_pair_macs(cfg, full_pairs(l, cfg.pairs));
    let decode = attention_projection_macs(cfg, 1) + attention_pair_macs(cfg, u(l));
    Cost {
        prefill_flops: layers * m * prefill,
        decode_flops: layers * m * decode,
        cache_bytes: layers * kv_bytes(cfg, l),
    }
}

pub fn flops_swa_sinks(l: usize, cfg: &CostConfig) -> Cost {
    let m = cfg.convention.mac();
    let layers = u(cfg.n_layers);
    let span = cfg.window + cfg.sinks;
    let prefill = attention_projection_macs(cfg, l) + attention_pair_macs(cfg, window_pairs(l, span, cfg.pairs));
    let decode = attention_projection_macs(cfg, 1) + attention_pair_macs(cfg, u(l.min(span)));
    Cost {
        prefill_flops: layers * m * prefill,
        decode_flops: layers * m * decode,
        cache_bytes: layers * kv_bytes(cfg, l.min(span)),
    }
}

/// Per-layer memory FLOPs for one chunk of `c` tokens, all heads.
fn memory_chunk_flops(cfg: &CostConfig, c: usize) -> u128 {
    let m = cfg.convention.mac();
    let (dh, hid) = (u(cfg.mem_head_dim()), u(cfg.mem_hidden));
    let c = u(c);
    let s = 3 * dh * hid;
    let matmuls = m * (3 + 3 + 4) * c * dh * hid;
    let elementwise = 2 * (2 * c * hid + c * dh) + 3 * c * hid + 2 * c * dh + c * hid;
    let norm_rows = u(cfg.normalize.up as usize + cfg.normalize.gate as usize) * hid * dh + u(cfg.normalize.down as usize) * dh * hid;
    let per_chunk = 2 * norm_rows + 2 * s + 3 * s;
    u(cfg.n_kv_heads) * (matmuls + elementwise + per_chunk)
}

fn memory_token_macs(cfg: &CostConfig, l: usize) -> u128 {
    let (d, mw, n) = (u(cfg.d_model), u(cfg.mem_dim), u(cfg.n_kv_heads));
    u(l) * (d * (5 * mw + 2 * n) + 3 * mw * u(cfg.conv_kernel))
}

/// Bytes of one layer's memory state: fast weights, momentum and the
/// captured row norms.
pub fn memory_state_bytes(cfg: &CostConfig) -> u128 {
    let (dh, hid) = (u(cfg.mem_head_dim()), u(cfg.mem_hidden));
    let s = 3 * dh * hid;
    let ns = cfg.normalize;
    let norms = u(ns.up as usize) * hid + u(ns.gate as usize) * hid + u(ns.down as usize) * dh;
    u(cfg.n_kv_heads) * (2 * s + norms) * F64_BYTES
}

pub fn flops_allmem_memory(l: usize, cfg: &CostConfig) -> Cost {
    let m = cfg.convention.mac();
    let layers = u(cfg.n_layers);
    let c = cfg.chunk;
    let (full, rest) = (l / c, l % c);
    let mut prefill = u(full) * memory_chunk_flops(cfg, c) + m * memory_token_macs(cfg, l);
    if rest > 0 {
        prefill += memory_chunk_flops(cfg, rest);
    }
    // one token's projections plus its share of a full chunk (read included)
    let decode = m * memory_token_macs(cfg, 1) + memory_chunk_flops(cfg, c).div_ceil(u(c));
    Cost {
        prefill_flops: layers * prefill,
        decode_flops: layers * decode,
        cache_bytes: layers * memory_state_bytes(cfg),
    }
}

pub fn flops_channel_mixer(l: usize, cfg: &CostConfig) -> Cost {
    let m = cfg.convention.mac();
    let per = 3 * u(cfg.d_model) * u(cfg.ffn_hidden);
    Cost {
        prefill_flops: u(cfg.n_layers) * m * u(l) * per,
        decode_flops: u(cfg.n_layers) * m * per,
        cache_bytes: 0,
    }
}

pub fn component_cost(c: Component, l: usize, cfg: &CostConfig) -> Cost {
    match c {
        Component::FullAttention => flops_full_attention(l, cfg),
        Component::SwaSinks => flops_swa_sinks(l, cfg),
        Component::AllmemMemory => flops_allmem_memory(l, cfg),
        Component::ChannelMixer => flops_channel_mixer(l, cfg),
    }
}

/// One row per `(component, L)` under [`CSV_HEADER`].
pub fn emit_cost_csv<W: Write>(out: &mut W, lengths: &[usize], cfg: &CostConfig) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for c in Component::ALL {
        for &l in lengths {
            let r = component_cost(c, l, cfg);
            writeln!(out, "{},{l},{},{},{}", c.name(), r.prefill_flops, r.decode_flops, r.cache_bytes)?;
        }
    }
    Ok(())
}

pub const DEFAULT_LENGTHS: [usize; 5] = [1 << 10, 1 << 12, 1 << 14, 1 << 16, 1 << 17];

/// Full-attention versus windowed-plus-memory token mixer at one length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerRatio {
    pub l: usize,
    pub convention: Convention,
    /// `(FLOPs + cache bytes)` of full attention over the same sum for
    /// windowed attention plus memory.
    pub combined: f64,
    pub flops: f64,
    pub cache: f64,
}

pub fn mixer_ratio(l: usize, cfg: &CostConfig) -> MixerRatio {
    let full = flops_full_attention(l, cfg);
    let ours = flops_swa_sinks(l, cfg) + flops_allmem_memory(l, cfg);
    let f = |c: Cost| (c.prefill_flops + c.cache_bytes) as f64;
    MixerRatio {
        l,
        convention: cfg.convention,
        combined: f(full) / f(ours),
        flops: full.prefill_flops as f64 / ours.prefill_flops as f64,
        cache: full.cache_bytes as f64 / ours.cache_bytes as f64,
    }
}

/// Accepted range for the combined full-versus-ours ratio at the reference
/// configuration.
pub const REFERENCE_BAND: (f64, f64) = (7.0, 12.0);

/// The combined ratio under both FLOP conventions against [`REFERENCE_BAND`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandCheck {
    pub l: usize,
    pub window: usize,
    pub sinks: usize,
    pub chunk: usize,
    pub band: (f64, f64),
    pub ratios: Vec<MixerRatio>,
    pub passed: bool,
}

pub fn band_check(l: usize, cfg: &CostConfig) -> BandCheck {
    let ratios: Vec<MixerRatio> = [Convention::Flops, Convention::Macs]
        .into_iter()
        .map(|convention| mixer_ratio(l, &CostConfig { convention, ..cfg.clone() }))
        .collect();
    let (lo, hi) = REFERENCE_BAND;
    let passed = ratios.iter().all(|r| (lo..=hi).contains(&r.combined));
    BandCheck { l, window: cfg.window, sinks: cfg.sinks, chunk: cfg.chunk, band: REFERENCE_BAND, ratios, passed }
}

/// Smallest `L` at which full-attention prefill FLOPs exceed windowed
/// attention plus memory, searched up to `limit`.
pub fn crossover(cfg: &CostConfig, limit: usize) -> Option<usize> {
    let wins = |l: usize| {
        flops_full_attention(l, cfg).prefill_flops > (flops_swa_sinks(l, cfg) + flops_allmem_memory(l, cfg)).prefill_flops
    };
    // up to W+s both attentions coincide and the memory only adds cost;
    // past it the advantage of the window grows monotonically
    let start = cfg.window + cfg.sinks;
    if !wins(limit) {
        return None;
    }
    let (mut lo, mut hi) = (start, limit);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if wins(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_pair_enumeration() {
        assert_eq!(window_pairs(4, 1, PairCounting::Causal), 4);
        for l in 1..40 {
            for span in 1..12 {
                let brute: u128 = (0..l).map(|t| u((t + 1).min(span))).sum();
                assert_eq!(window_pairs(l, span, PairCounting::Causal), brute);
            }
        }
    }

    #[test]
    fn single_token_attention() {
        let cfg = CostConfig::desk();
        let attn = attention_pair_macs(&cfg, full_pairs(1, PairCounting::Causal)) * 2;
        assert_eq!(attn, 2 * 4 * 16 * 2);
    }

    #[test]
    fn csv_shape() {
        let mut buf = Vec::new();
        emit_cost_csv(&mut buf, &DEFAULT_LENGTHS, &CostConfig::reference_0_6b()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 4 * 5);
    }
}
