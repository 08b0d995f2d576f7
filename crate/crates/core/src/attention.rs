//! Causal softmax attention: the full-context teacher kernel, the sliding
//! window with sink tokens, rotary position embeddings and a streaming
//! KV cache whose size does not grow with the sequence.
//!
//! Kernels take Q/K already rotated. Query tensors are `[L, n_heads, head_dim]`
//! and key/value tensors `[L, n_kv_heads, head_dim]` (the 2-D view
//! `[L, heads·head_dim]` is accepted too). Query head `h` reads KV head
//! `h / (n_heads / n_kv_heads)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{add_macs, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub window: usize,
    pub sinks: usize,
    pub rope_theta: f64,
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_heads {} must be a positive multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("head_dim {} must be even", self.head_dim)));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if self.rope_theta <= 0.0 {
            return Err(Error::Config("rope_theta must be positive".into()));
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

    pub fn visibility(&self) -> Visibility {
        Visibility::sliding(self.window, self.sinks)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn group(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
}

/// Which keys a query may attend to. `window = None` is full causal
/// attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visibility {
    pub window: Option<usize>,
    pub sinks: usize,
}

impl Visibility {
    pub const FULL: Visibility = Visibility { window: None, sinks: 0 };

    pub fn sliding(window: usize, sinks: usize) -> Self {
        Self {
            window: Some(window),
            sinks,
        }
    }

    /// Key position `i` is visible from query position `t` when it is not
    /// in the future and is either a sink or among the last `window`
    /// positions, the query included.
    #[inline]
    pub fn visible(&self, t: usize, i: usize) -> bool {
        i <= t
            && match self.window {
                None => true,
                Some(w) => i < self.sinks || i + w > t,
            }
    }

    /// Number of keys visible from position `t`.
    pub fn count(&self, t: usize) -> usize {
        match self.window {
            None => t + 1,
            Some(w) => {
                let recent = w.min(t + 1);
                let first_recent = t + 1 - recent;
                recent + self.sinks.min(first_recent)
            }
        }
    }

    fn keys(&self, t: usize) -> impl Iterator<Item = usize> + Clone + '_ {
        let start = match self.window {
            None => 0,
            Some(w) => (t + 1).saturating_sub(w),
        };
        let sinks = match self.window {
            None => 0,
            Some(_) => self.sinks.min(start),
        };
        (0..sinks).chain(start..=t)
    }
}

fn layout_of(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, HeadLayout)> {
    let (l, h, d) = match q.shape() {
        [l, h, d] => (*l, *h, *d),
        s => return Err(Error::dim("attention", format!("Q must be [L, heads, head_dim], got {s:?}"))),
    };
    let (lk, hk, dk) = match k.shape() {
        [l, h, d] => (*l, *h, *d),
        s => return Err(Error::dim("attention", format!("K must be [L, heads, head_dim], got {s:?}"))),
    };
    if v.shape() != k.shape() || lk != l || dk != d || h % hk != 0 {
        return Err(Error::dim(
            "attention",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok((l, HeadLayout { n_heads: h, n_kv_heads: hk, head_dim: d }))
}

/// Full causal attention, `out_t = Σ_{i≤t} softmax_i(q_t·k_i/√d)·v_i` per
/// head.
pub fn full_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.shape().first() == Some(&0) {
        return Err(Error::EmptyInput("full_attention"));
    }
    let (_, layout) = layout_of(q, k, v)?;
    let out = attend(q, k, v, layout, Visibility::FULL)?;
    out.reshape(q.shape())
}

/// Attention restricted to the first `cfg.sinks` positions plus the last
/// `cfg.window` positions (current token included).
pub fn swa_sinks_attention(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttnConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (_, layout) = layout_of(q, k, v)?;
    if layout != cfg.layout() {
        return Err(Error::dim("swa_sinks_attention", format!("{layout:?} vs config {:?}", cfg.layout())));
    }
    let out = attend(q, k, v, layout, cfg.visibility())?;
    out.reshape(q.shape())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax attention of a single query over `(key, value)` rows, in the
/// order given. The returned weights align with the input order.
fn attend_one<'a>(
    q: &[f64],
    keys: impl Iterator<Item = (&'a [f64], &'a [f64])> + Clone,
    out: &mut [f64],
    weights: &mut Vec<f64>,
) {
    let scale = 1.0 / (q.len() as f64).sqrt();
    weights.clear();
    weights.extend(keys.clone().map(|(k, _)| dot(q, k) * scale));
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        z += *w;
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    for (w, (_, v)) in weights.iter_mut().zip(keys) {
        *w /= z;
        for (o, x) in out.iter_mut().zip(v) {
            *o += *w * x;
        }
    }
    add_macs(2 * (weights.len() * q.len()) as u64);
}

/// Batched masked attention over 2-D views `q: [L, n_heads·d]`,
/// `k, v: [L, n_kv_heads·d]`. Returns `[L, n_heads·d]`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, layout: HeadLayout, vis: Visibility) -> Result<Tensor> {
    let l = q.len() / layout.q_width();
    if l == 0 {
        return Err(Error::EmptyInput("attention"));
    }
    if q.len() != l * layout.q_width() || k.len() != l * layout.kv_width() || v.len() != k.len() {
        return Err(Error::dim("attention", format!("{:?} {:?} {:?} for {layout:?}", q.shape(), k.shape(), v.shape())));
    }
    let (d, qw, kw, g) = (layout.head_dim, layout.q_width(), layout.kv_width(), layout.group());
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; l * qw];
    let mut weights = Vec::new();
    for t in 0..l {
        for h in 0..layout.n_heads {
            let kvh = h / g;
            let keys = vis.keys(t).map(|i| {
                let off = i * kw + kvh * d;
                (&kd[off..off + d], &vd[off..off + d])
            });
            let qo = t * qw + h * d;
            attend_one(&qd[qo..qo + d], keys, &mut out[qo..qo + d], &mut weights);
        }
    }
    Tensor::raw(vec![l, qw], out).checked("attention")
}

/// Vector-Jacobian product of [`attend`]. Returns `(dq, dk, dv)`.
pub(crate) fn attend_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dout: &Tensor,
    layout: HeadLayout,
    vis: Visibility,
) -> (Tensor, Tensor, Tensor) {
    let (d, qw, kw, g) = (layout.head_dim, layout.q_width(), layout.kv_width(), layout.group());
    let l = q.len() / qw;
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), dout.data());
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut idx = Vec::new();
    let mut p = Vec::new();
    let mut dp = Vec::new();
    for t in 0..l {
        for h in 0..layout.n_heads {
            let kvh = h / g;
            let qo = t * qw + h * d;
            let qr = &qd[qo..qo + d];
            let go = &gd[qo..qo + d];
            idx.clear();
            idx.extend(vis.keys(t));
            p.clear();
            p.extend(idx.iter().map(|&i| dot(qr, &kd[i * kw + kvh * d..i * kw + kvh * d + d]) * scale));
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for w in p.iter_mut() {
                *w = (*w - max).exp();
                z += *w;
            }
            p.iter_mut().for_each(|w| *w /= z);
            dp.clear();
            dp.extend(idx.iter().map(|&i| dot(go, &vd[i * kw + kvh * d..i * kw + kvh * d + d])));
            let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for (j, &i) in idx.iter().enumerate() {
                let off = i * kw + kvh * d;
                let ds = p[j] * (dp[j] - mean) * scale;
                for c in 0..d {
                    dv[off + c] += p[j] * go[c];
                    dq[qo + c] += ds * kd[off + c];
                    dk[off + c] += ds * qr[c];
                }
            }
        }
    }
    (
        Tensor::raw(q.shape().to_vec(), dq),
        Tensor::raw(k.shape().to_vec(), dk),
        Tensor::raw(v.shape().to_vec(), dv),
    )
}

/// Rotary embedding of `[L, heads, head_dim]` (or its 2-D view with
/// `heads` given by the caller through [`rope_2d`]). Dimension `i` pairs
/// with `i + head_dim/2` and rotates by `pos·theta^(−2i/head_dim)`.
pub fn rope_rotate(x: &Tensor, positions: &[usize], theta: f64) -> Result<Tensor> {
    let heads = match x.shape() {
        [_, h, _] => *h,
        s => return Err(Error::dim("rope_rotate", format!("expected [L, heads, head_dim], got {s:?}"))),
    };
    rope_2d(x, heads, positions, theta, false)?.reshape(x.shape())
}

/// Rotary embedding on a `[L, heads·head_dim]` view. `inverse` rotates by
/// the negated angles, which is also the transpose used in backprop.
pub fn rope_2d(x: &Tensor, heads: usize, positions: &[usize], theta: f64, inverse: bool) -> Result<Tensor> {
    let l = positions.len();
    if l == 0 || !x.len().is_multiple_of(l * heads) {
        return Err(Error::dim("rope", format!("{:?} with {l} positions and {heads} heads", x.shape())));
    }
    let d = x.len() / (l * heads);
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("rotary embedding needs an even head_dim, got {d}")));
    }
    let half = d / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    let freqs: Vec<f64> = (0..half).map(|i| theta.powf(-2.0 * i as f64 / d as f64)).collect();
    let mut out = x.data().to_vec();
    for (t, &pos) in positions.iter().enumerate() {
        for h in 0..heads {
            let base = (t * heads + h) * d;
            for (i, f) in freqs.iter().enumerate() {
                let (s, c) = (sign * pos as f64 * f).sin_cos();
                let (a, b) = (out[base + i], out[base + i + half]);
                out[base + i] = a * c - b * s;
                out[base + i + half] = a * s + b * c;
            }
        }
    }
    Ok(Tensor::raw(vec![l, heads * d], out))
}

/// Streaming KV cache for sliding-window attention with sinks: the first
/// `sinks` tokens are kept forever, the rest live in a ring of `window`
/// slots. Keys are stored already rotated.
#[derive(Clone, Debug)]
pub struct WindowKVCache {
    layout: HeadLayout,
    sinks: usize,
    window: usize,
    sink_k: Vec<f64>,
    sink_v: Vec<f64>,
    sink_pos: Vec<usize>,
    ring_k: Vec<f64>,
    ring_v: Vec<f64>,
    ring_pos: Vec<usize>,
    write_pos: usize,
    filled: usize,
    last: Option<usize>,
}

impl WindowKVCache {
    pub fn new(cfg: &AttnConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        let kw = layout.kv_width();
        Ok(Self {
            layout,
            sinks: cfg.sinks,
            window: cfg.window,
            sink_k: Vec::with_capacity(cfg.sinks * kw),
            sink_v: Vec::with_capacity(cfg.sinks * kw),
            sink_pos: Vec::with_capacity(cfg.sinks),
            ring_k: vec![0.0; cfg.window * kw],
            ring_v: vec![0.0; cfg.window * kw],
            ring_pos: vec![0; cfg.window],
            write_pos: 0,
            filled: 0,
            last: None,
        })
    }

    /// Number of cached tokens, never more than `sinks + window`.
    pub fn len(&self) -> usize {
        self.sink_pos.len() + self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.sinks + self.window
    }

    /// Absolute positions of the cached tokens in ascending order.
    pub fn positions(&self) -> Vec<usize> {
        self.slots().map(|(p, _, _)| p).collect()
    }

    /// Bytes held by the cache buffers, independent of how many tokens
    /// have streamed through.
    pub fn footprint_bytes(&self) -> usize {
        8 * (2 * (self.sinks + self.window) * self.layout.kv_width())
    }

    /// Appends one token's rotated key and value rows (`[n_kv_heads·head_dim]`).
    pub fn push(&mut self, pos: usize, k: &[f64], v: &[f64]) -> Result<()> {
        let kw = self.layout.kv_width();
        if k.len() != kw || v.len() != kw {
            return Err(Error::dim("WindowKVCache::push", format!("rows of {} / {} for width {kw}", k.len(), v.len())));
        }
        if let Some(last) = self.last {
            if pos <= last {
                return Err(Error::Ordering { last, got: pos });
            }
        }
        self.last = Some(pos);
        if self.sink_pos.len() < self.sinks {
            self.sink_k.extend_from_slice(k);
            self.sink_v.extend_from_slice(v);
            self.sink_pos.push(pos);
            return Ok(());
        }
        let slot = self.write_pos;
        self.ring_k[slot * kw..(slot + 1) * kw].copy_from_slice(k);
        self.ring_v[slot * kw..(slot + 1) * kw].copy_from_slice(v);
        self.ring_pos[slot] = pos;
        self.write_pos = (slot + 1) % self.window;
        self.filled = (self.filled + 1).min(self.window);
        Ok(())
    }

    /// Cached `(position, key row, value row)` in ascending position order.
    fn slots(&self) -> impl Iterator<Item = (usize, &[f64], &[f64])> + Clone + '_ {
        let kw = self.layout.kv_width();
        let sinks = self
            .sink_pos
            .iter()
            .enumerate()
            .map(move |(j, &p)| (p, &self.sink_k[j * kw..(j + 1) * kw], &self.sink_v[j * kw..(j + 1) * kw]));
        let oldest = if self.filled == self.window { self.write_pos } else { 0 };
        let ring = (0..self.filled).map(move |j| {
            let s = (oldest + j) % self.window;
            (self.ring_pos[s], &self.ring_k[s * kw..(s + 1) * kw], &self.ring_v[s * kw..(s + 1) * kw])
        });
        sinks.chain(ring)
    }

    /// Attends a rotated query row (`[n_heads·head_dim]`) over the cache.
    pub fn attend(&self, q: &[f64]) -> Result<Vec<f64>> {
        let HeadLayout { n_heads, head_dim: d, .. } = self.layout;
        if q.len() != self.layout.q_width() {
            return Err(Error::dim("WindowKVCache::attend", format!("query of {}", q.len())));
        }
        if self.is_empty() {
            return Err(Error::EmptyInput("WindowKVCache::attend"));
        }
        let g = self.layout.group();
        let mut out = vec![0.0; q.len()];
        let mut weights = Vec::new();
        for h in 0..n_heads {
            let kvh = h / g;
            let keys = self
                .slots()
                .map(move |(_, k, v)| (&k[kvh * d..(kvh + 1) * d], &v[kvh * d..(kvh + 1) * d]));
            attend_one(&q[h * d..(h + 1) * d], keys, &mut out[h * d..(h + 1) * d], &mut weights);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("WindowKVCache::attend"));
        }
        Ok(out)
    }

    /// One decode step: caches the token then attends its query over the
    /// visible set.
    pub fn decode_step(&mut self, pos: usize, q: &[f64], k: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.push(pos, k, v)?;
        self.attend(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(window: usize, sinks: usize) -> AttnConfig {
        AttnConfig {
            d_model: 16,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 4,
            window,
            sinks,
            rope_theta: 10_000.0,
        }
    }

    fn qkv(l: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn(&[l, 4, 4], 1.0, &mut rng),
            Tensor::randn(&[l, 2, 4], 1.0, &mut rng),
            Tensor::randn(&[l, 2, 4], 1.0, &mut rng),
        )
    }

    #[test]
    fn visibility_enumeration() {
        let vis = Visibility::sliding(3, 1);
        let seen: Vec<usize> = (0..8).filter(|&i| vis.visible(6, i)).collect();
        assert_eq!(seen, vec![0, 4, 5, 6]);
        assert_eq!(vis.keys(6).collect::<Vec<_>>(), seen);
        for t in 0..12 {
            assert_eq!(vis.count(t), (0..=t).filter(|&i| vis.visible(t, i)).count());
            assert_eq!(vis.keys(t).count(), vis.count(t));
        }
    }

    #[test]
    fn single_token_returns_value() {
        let (q, k, v) = qkv(1, 1);
        let out = full_attention(&q, &k, &v).unwrap();
        for h in 0..4 {
            assert_eq!(&out.data()[h * 4..h * 4 + 4], &v.data()[(h / 2) * 4..(h / 2) * 4 + 4]);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let (q, _, v) = qkv(5, 2);
        let k = Tensor::full(&[5, 2, 4], 0.3);
        let out = full_attention(&q, &k, &v).unwrap();
        for t in 0..5 {
            for c in 0..4 {
                let mean: f64 = (0..=t).map(|i| v.data()[i * 8 + c]).sum::<f64>() / (t + 1) as f64;
                assert!((out.data()[t * 16 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_one_copies_value() {
        let (q, k, v) = qkv(6, 3);
        let out = swa_sinks_attention(&q, &k, &v, &cfg(1, 0)).unwrap();
        for t in 0..6 {
            for h in 0..4 {
                let o = &out.data()[t * 16 + h * 4..t * 16 + h * 4 + 4];
                let want = &v.data()[t * 8 + (h / 2) * 4..t * 8 + (h / 2) * 4 + 4];
                for (a, b) in o.iter().zip(want) {
                    assert!((a - b).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn wide_window_is_bitwise_full() {
        let (q, k, v) = qkv(7, 4);
        let full = full_attention(&q, &k, &v).unwrap();
        let swa = swa_sinks_attention(&q, &k, &v, &cfg(7, 0)).unwrap();
        assert_eq!(full, swa);
        let swa = swa_sinks_attention(&q, &k, &v, &cfg(100, 0)).unwrap();
        assert_eq!(full, swa);
    }

    #[test]
    fn rope_rejects_odd_dim() {
        let x = Tensor::full(&[2, 1, 3], 1.0);
        assert!(matches!(rope_rotate(&x, &[0, 1], 10_000.0), Err(Error::Config(_))));
    }

    #[test]
    fn cache_rejects_position_regression() {
        let mut cache = WindowKVCache::new(&cfg(2, 1)).unwrap();
        let row = [0.0; 8];
        cache.push(0, &row, &row).unwrap();
        cache.push(1, &row, &row).unwrap();
        assert!(matches!(cache.push(1, &row, &row), Err(Error::Ordering { last: 1, got: 1 })));
    }

    #[test]
    fn cache_keeps_sinks_and_recent() {
        let mut cache = WindowKVCache::new(&cfg(3, 2)).unwrap();
        let row = [0.0; 8];
        for p in 0..10 {
            cache.push(p, &row, &row).unwrap();
        }
        assert_eq!(cache.positions(), vec![0, 1, 7, 8, 9]);
        assert_eq!(cache.len(), 5);
    }
}
