//! Linear matrix-state memories used as drop-in replacements for the
//! fast-weight branch: a gated outer-product recurrence (Mamba-2 style) and
//! the delta rule.
//!
//! Both keep one `[d_v, d_k]` matrix per head, update it once per token and
//! read it with `v̂ = M·q` after the token's own write.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Ops};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearRule {
    /// `M' = α·M + v·kᵀ`
    GatedOuterProduct,
    /// `M' = M·(α·I − β·k·kᵀ) + β·v·kᵀ`
    DeltaRule,
}

/// `M' = α·M + v·kᵀ` for `m: [d_v, d_k]`, `k: [d_k]`, `v: [d_v]`.
pub fn mamba2_step(m: &Tensor, k: &[f64], v: &[f64], alpha: f64) -> Result<Tensor> {
    let (dv, dk) = check_state(m, k, v)?;
    let mut out = Vec::with_capacity(dv * dk);
    for (i, vi) in v.iter().enumerate() {
        out.extend((0..dk).map(|j| alpha * m.get(i, j) + vi * k[j]));
    }
    Tensor::new(vec![dv, dk], out)
}

/// `M' = M·(α·I − β·k·kᵀ) + β·v·kᵀ`.
pub fn delta_step(m: &Tensor, k: &[f64], v: &[f64], alpha: f64, beta: f64) -> Result<Tensor> {
    let (dv, dk) = check_state(m, k, v)?;
    let mk: Vec<f64> = (0..dv).map(|i| m.row(i).iter().zip(k).map(|(a, b)| a * b).sum()).collect();
    let mut out = Vec::with_capacity(dv * dk);
    for i in 0..dv {
        out.extend((0..dk).map(|j| alpha * m.get(i, j) - beta * mk[i] * k[j] + beta * v[i] * k[j]));
    }
    Tensor::new(vec![dv, dk], out)
}

/// `v̂ = M·q`.
pub fn linear_read(m: &Tensor, q: &[f64]) -> Result<Vec<f64>> {
    if m.shape().len() != 2 || m.cols() != q.len() {
        return Err(Error::dim("linear_read", format!("state {:?} with query of {}", m.shape(), q.len())));
    }
    Ok((0..m.rows()).map(|i| m.row(i).iter().zip(q).map(|(a, b)| a * b).sum()).collect())
}

fn check_state(m: &Tensor, k: &[f64], v: &[f64]) -> Result<(usize, usize)> {
    if m.shape().len() != 2 || m.rows() != v.len() || m.cols() != k.len() {
        return Err(Error::dim(
            "linear step",
            format!("state {:?} with key {} and value {}", m.shape(), k.len(), v.len()),
        ));
    }
    Ok((v.len(), k.len()))
}

/// Loss whose single unit-rate gradient step is the gated outer-product
/// recurrence: `ℓ = −vᵀ·M·k + ((1−α)/2)·‖M‖²_F`.
pub fn mamba_loss_ops<O: Ops>(o: &mut O, m: &O::V, k: &O::V, v: &O::V, alpha: f64) -> Result<O::V> {
    // k, v are [1, d] rows; M·k as a row is k·Mᵀ
    let mk = o.matmul_nt(k, m)?;
    let fit = o.mul(&mk, v)?;
    let fit = o.sum(&fit)?;
    let sq = o.mul(m, m)?;
    let sq = o.sum(&sq)?;
    let reg = o.scale(&sq, (1.0 - alpha) / 2.0)?;
    let neg_fit = o.scale(&fit, -1.0)?;
    o.add(&neg_fit, &reg)
}

/// Runs a linear memory over a whole sequence on any executor.
///
/// `q, k, v` are `[L, n_heads·d]`; `alpha` and `beta` are `[L, n_heads]`
/// per-token decay and write strength (`beta` is ignored by the gated
/// outer-product rule). Returns the reads `[L, n_heads·d]`.
#[allow(clippy::too_many_arguments)]
pub fn linear_sequence_ops<O: Ops>(
    o: &mut O,
    rule: LinearRule,
    n_heads: usize,
    q: &O::V,
    k: &O::V,
    v: &O::V,
    alpha: &O::V,
    beta: &O::V,
) -> Result<O::V> {
    let (l, width) = (o.value(q).rows(), o.value(q).cols());
    if width % n_heads != 0 {
        return Err(Error::dim("linear memory", format!("width {width} for {n_heads} heads")));
    }
    let d = width / n_heads;
    let mut states: Vec<O::V> = (0..n_heads).map(|_| o.input(Tensor::zeros(&[d, d]))).collect();
    let mut rows = Vec::with_capacity(l);
    for t in 0..l {
        let (qt, kt, vt) = (o.slice_rows(q, t, t + 1)?, o.slice_rows(k, t, t + 1)?, o.slice_rows(v, t, t + 1)?);
        let (at, bt) = (o.slice_rows(alpha, t, t + 1)?, o.slice_rows(beta, t, t + 1)?);
        let mut heads = Vec::with_capacity(n_heads);
        for (h, m) in states.iter_mut().enumerate() {
            let qh = o.slice_cols(&qt, h * d, (h + 1) * d)?;
            let kh = o.slice_cols(&kt, h * d, (h + 1) * d)?;
            let vh = o.slice_cols(&vt, h * d, (h + 1) * d)?;
            let a = o.slice_cols(&at, h, h + 1)?;
            let decayed = o.mul_scalar(m, &a)?;
            *m = match rule {
                LinearRule::GatedOuterProduct => {
                    let write = o.matmul_tn(&vh, &kh)?;
                    o.add(&decayed, &write)?
                }
                LinearRule::DeltaRule => {
                    let b = o.slice_cols(&bt, h, h + 1)?;
                    let mk = o.matmul_nt(&kh, m)?;
                    let err = o.sub(&vh, &mk)?;
                    let write = o.matmul_tn(&err, &kh)?;
                    let write = o.mul_scalar(&write, &b)?;
                    o.add(&decayed, &write)?
                }
            };
            heads.push(o.matmul_nt(&qh, m)?);
        }
        rows.push(o.concat_cols(&heads)?);
    }
    o.concat_rows(&rows)
}

/// Token-recurrent linear memory state for all heads of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMemory {
    pub rule: LinearRule,
    pub n_heads: usize,
    pub head_dim: usize,
    /// One `[head_dim, head_dim]` matrix per head.
    pub states: Vec<Tensor>,
}

impl LinearMemory {
    pub fn new(rule: LinearRule, n_heads: usize, head_dim: usize) -> Self {
        Self {
            rule,
            n_heads,
            head_dim,
            states: (0..n_heads).map(|_| Tensor::zeros(&[head_dim, head_dim])).collect(),
        }
    }

    /// Writes token `(k, v)` into every head and reads with `q`. Inputs are
    /// `[n_heads·d]` rows, `alpha`/`beta` one value per head.
    pub fn step(&mut self, q: &[f64], k: &[f64], v: &[f64], alpha: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
        let d = self.head_dim;
        let w = self.n_heads * d;
        if q.len() != w || k.len() != w || v.len() != w || alpha.len() != self.n_heads || beta.len() != self.n_heads {
            return Err(Error::dim("linear memory step", format!("expected width {w} and {} heads", self.n_heads)));
        }
        let mut next = Vec::with_capacity(self.n_heads);
        let mut out = Vec::with_capacity(w);
        for h in 0..self.n_heads {
            let r = h * d..(h + 1) * d;
            let m = match self.rule {
                LinearRule::GatedOuterProduct => mamba2_step(&self.states[h], &k[r.clone()], &v[r.clone()], alpha[h])?,
                LinearRule::DeltaRule => delta_step(&self.states[h], &k[r.clone()], &v[r.clone()], alpha[h], beta[h])?,
            };
            out.extend(linear_read(&m, &q[r])?);
            next.push(m);
        }
        self.states = next;
        Ok(out)
    }

    /// Eager batch run; same arithmetic as [`linear_sequence_ops`].
    pub fn run(&self, q: &Tensor, k: &Tensor, v: &Tensor, alpha: &Tensor, beta: &Tensor) -> Result<Tensor> {
        linear_sequence_ops(&mut Eager, self.rule, self.n_heads, q, k, v, alpha, beta)
    }

    /// Little-endian dump of the state matrices; its length depends only on
    /// the head layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.states.iter().flat_map(|m| m.data().iter().flat_map(|x| x.to_le_bytes())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outer_product_write() {
        let m = mamba2_step(&Tensor::zeros(&[3, 3]), &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 1.0).unwrap();
        let mut want = [0.0; 9];
        want[3] = 1.0;
        assert_eq!(m.data(), &want[..]);
    }

    #[test]
    fn full_forget() {
        let old = Tensor::full(&[2, 2], 5.0);
        let m = mamba2_step(&old, &[1.0, 2.0], &[3.0, 4.0], 0.0).unwrap();
        assert_eq!(m.data(), &[3.0, 6.0, 4.0, 8.0]);
    }

    #[test]
    fn delta_edge_cases() {
        let old = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let m = delta_step(&old, &[0.3, 0.4], &[1.0, 1.0], 0.5, 0.0).unwrap();
        assert_eq!(m, old.map(|x| 0.5 * x));
        let m = delta_step(&Tensor::zeros(&[2, 2]), &[0.3, 0.4], &[1.0, 2.0], 0.7, 2.0).unwrap();
        assert_eq!(m.data(), &[0.6, 0.8, 1.2, 1.6]);
    }

    #[test]
    fn delta_replaces_stored_value() {
        // two orthogonal unit keys; overwrite the value behind the first
        let (k1, k2) = ([1.0, 0.0], [0.0, 1.0]);
        let mut m = Tensor::zeros(&[2, 2]);
        m = delta_step(&m, &k1, &[5.0, 6.0], 1.0, 1.0).unwrap();
        m = delta_step(&m, &k2, &[7.0, 8.0], 1.0, 1.0).unwrap();
        m = delta_step(&m, &k1, &[-1.0, 2.0], 1.0, 1.0).unwrap();
        assert_eq!(linear_read(&m, &k1).unwrap(), vec![-1.0, 2.0]);
        assert_eq!(linear_read(&m, &k2).unwrap(), vec![7.0, 8.0]);
    }

    #[test]
    fn reads() {
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(linear_read(&eye, &[0.25, -3.0]).unwrap(), vec![0.25, -3.0]);
        assert_eq!(linear_read(&eye, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let s = 0.5f64.sqrt();
        let m = mamba2_step(&Tensor::zeros(&[3, 2]), &[s, s], &[1.0, 2.0, 3.0], 1.0).unwrap();
        let got = linear_read(&m, &[s, s]).unwrap();
        for (g, w) in got.iter().zip([1.0, 2.0, 3.0]) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn streaming_matches_batch() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for rule in [LinearRule::GatedOuterProduct, LinearRule::DeltaRule] {
            let (q, k, v) = (
                Tensor::uniform(&[6, 8], -1.0, 1.0, &mut rng),
                Tensor::uniform(&[6, 8], -1.0, 1.0, &mut rng),
                Tensor::uniform(&[6, 8], -1.0, 1.0, &mut rng),
            );
            let a = Tensor::uniform(&[6, 2], 0.1, 1.0, &mut rng);
            let b = Tensor::uniform(&[6, 2], 0.0, 1.0, &mut rng);
            let mut mem = LinearMemory::new(rule, 2, 4);
            let batch = mem.run(&q, &k, &v, &a, &b).unwrap();
            for t in 0..6 {
                let out = mem.step(q.row(t), k.row(t), v.row(t), a.row(t), b.row(t)).unwrap();
                for (x, y) in out.iter().zip(batch.row(t)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
