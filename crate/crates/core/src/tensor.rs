//! Dense row-major `f64` tensors and the tape-free math every other module
//! is written against.
//!
//! Most operations treat a tensor as a 2-D view `[rows, last_dim]`, where
//! `rows` is the product of every leading axis. Broadcasting is limited to
//! the trailing-axis vector cases (`add_row`, `mul_row`) and per-row scalars
//! (`mul_col`).

use std::cell::Cell;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulate operations performed on this thread since the last
/// [`reset_mac_count`]. Only matrix products and attention kernels count.
pub fn mac_count() -> u64 {
    MACS.with(|c| c.get())
}

pub fn reset_mac_count() {
    MACS.with(|c| c.set(0));
}

pub(crate) fn add_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized axes, a length mismatch or any
    /// non-finite element.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim("Tensor::new", format!("shape {shape:?} has an empty axis")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for results that are finite and shaped by
    /// construction.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub(crate) fn checked(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && !shape.contains(&0), "empty shape {shape:?}");
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(vec![1, 1], vec![value])
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("Tensor::from_rows", "ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::raw(shape.to_vec(), data)
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::raw(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Product of every axis but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Self::raw(shape.to_vec(), self.data.clone()))
    }

    /// Same data viewed as `[rows, cols]`.
    pub fn as_2d(&self) -> Self {
        Self::raw(vec![self.rows(), self.cols()], self.data.clone())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::raw(self.shape.clone(), data).checked(op)
    }

    /// Per-row L2 norms of the 2-D view.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|i| self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn require_2d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// `c = a·b` with arbitrary strides. Row/column strides let the transposed
/// variants share one kernel.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    add_macs((m * k * n) as u64);
    // SAFETY: the strides describe in-bounds views of `a` ([m,k]) and `b`
    // ([k,n]); `c` is a fresh contiguous [m,n] buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d(a, "matmul")?;
    let (k2, n) = require_2d(b, "matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("[{m},{k}] x [{k2},{n}]")));
    }
    let c = gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1);
    Tensor::raw(vec![m, n], c).checked("matmul")
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d(a, "matmul_nt")?;
    let (n, k2) = require_2d(b, "matmul_nt")?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
    }
    let c = gemm(m, k, n, a.data(), k as isize, 1, b.data(), 1, k as isize);
    Tensor::raw(vec![m, n], c).checked("matmul_nt")
}

/// `a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = require_2d(a, "matmul_tn")?;
    let (k2, n) = require_2d(b, "matmul_tn")?;
    if k != k2 {
        return Err(Error::dim("matmul_tn", format!("[{k},{m}]^T x [{k2},{n}]")));
    }
    let c = gemm(m, k, n, a.data(), 1, m as isize, b.data(), n as isize, 1);
    Tensor::raw(vec![m, n], c).checked("matmul_tn")
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = require_2d(a, "transpose")?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(Tensor::raw(vec![c, r], out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "sub", |x, y| x - y)
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    a.map(|v| v * s).checked("scale")
}

fn row_broadcast(
    a: &Tensor,
    v: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let c = a.cols();
    if v.len() != c {
        return Err(Error::dim(op, format!("{:?} with vector of {}", a.shape(), v.len())));
    }
    let data = a
        .data
        .chunks_exact(c)
        .flat_map(|row| row.iter().zip(&v.data).map(|(&x, &y)| f(x, y)))
        .collect();
    Tensor::raw(a.shape.clone(), data).checked(op)
}

/// Adds a `[cols]` vector to every row.
pub fn add_row(a: &Tensor, v: &Tensor) -> Result<Tensor> {
    row_broadcast(a, v, "add_row", |x, y| x + y)
}

/// Multiplies every row elementwise by a `[cols]` vector.
pub fn mul_row(a: &Tensor, v: &Tensor) -> Result<Tensor> {
    row_broadcast(a, v, "mul_row", |x, y| x * y)
}

/// Scales row `i` by `s[i]`.
pub fn mul_col(a: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (r, c) = (a.rows(), a.cols());
    if s.len() != r {
        return Err(Error::dim("mul_col", format!("{:?} with {} row scales", a.shape(), s.len())));
    }
    let mut data = a.data.clone();
    for (row, &k) in data.chunks_exact_mut(c).zip(&s.data) {
        row.iter_mut().for_each(|v| *v *= k);
    }
    Tensor::raw(a.shape.clone(), data).checked("mul_col")
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

pub(crate) fn silu_prime_scalar(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn silu_second_scalar(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

/// `x·σ(x)` elementwise.
pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

/// `σ(x)·(1 + x·(1−σ(x)))` elementwise.
pub fn silu_prime(x: &Tensor) -> Tensor {
    x.map(silu_prime_scalar)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

/// Row-wise softmax over the entries where `mask` is nonzero. Masked entries
/// come out as exactly zero.
pub fn softmax_rows(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if let Some(m) = mask {
        if m.shape() != x.shape() {
            return Err(Error::dim("softmax_rows", format!("mask {:?} vs {:?}", m.shape(), x.shape())));
        }
    }
    let c = x.cols();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.rows() {
        let row = x.row(i);
        let keep = |j: usize| mask.is_none_or(|m| m.data[i * c + j] != 0.0);
        let max = (0..c)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let o = &mut out[i * c..(i + 1) * c];
        let mut z = 0.0;
        for j in (0..c).filter(|&j| keep(j)) {
            o[j] = (row[j] - max).exp();
            z += o[j];
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    Ok(Tensor::raw(x.shape.clone(), out))
}

/// `x / sqrt(mean(x²) + eps) · gain` along the last axis.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.cols();
    if gain.len() != c {
        return Err(Error::dim("rmsnorm", format!("gain of {} for width {c}", gain.len())));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.data.chunks_exact(c) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        if !inv.is_finite() {
            // all-zero row with eps = 0
            out.extend(std::iter::repeat_n(0.0, c));
            continue;
        }
        out.extend(row.iter().zip(&gain.data).map(|(v, g)| v * inv * g));
    }
    Tensor::raw(x.shape.clone(), out).checked("rmsnorm")
}

/// Rescales each row to unit L2 norm, `x / sqrt(‖x‖² + eps)`.
pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data.chunks_exact(c) {
        let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        if n == 0.0 {
            out.extend_from_slice(row);
        } else {
            out.extend(row.iter().map(|v| v / n));
        }
    }
    Tensor::raw(x.shape.clone(), out).checked("l2_normalize_rows")
}

/// Depthwise causal convolution: `y[t,c] = Σ_i kernel[i,c]·x[t−k+1+i, c]`,
/// with positions before the start treated as zero.
pub fn causal_conv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (l, d) = require_2d(x, "causal_conv1d")?;
    let (k, d2) = require_2d(kernel, "causal_conv1d")?;
    if d != d2 {
        return Err(Error::dim("causal_conv1d", format!("x width {d}, kernel width {d2}")));
    }
    let mut out = vec![0.0; l * d];
    for t in 0..l {
        for i in 0..k {
            let Some(src) = (t + i + 1).checked_sub(k) else { continue };
            let (xs, ks) = (&x.data[src * d..(src + 1) * d], &kernel.data[i * d..(i + 1) * d]);
            for ((o, xv), kv) in out[t * d..(t + 1) * d].iter_mut().zip(xs).zip(ks) {
                *o += kv * xv;
            }
        }
    }
    Tensor::raw(vec![l, d], out).checked("causal_conv1d")
}

pub fn slice_rows(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (r, c) = require_2d(x, "slice_rows")?;
    if start >= end || end > r {
        return Err(Error::dim("slice_rows", format!("{start}..{end} of {r} rows")));
    }
    Ok(Tensor::raw(vec![end - start, c], x.data[start * c..end * c].to_vec()))
}

pub fn slice_cols(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (r, c) = require_2d(x, "slice_cols")?;
    if start >= end || end > c {
        return Err(Error::dim("slice_cols", format!("{start}..{end} of {c} cols")));
    }
    let w = end - start;
    let mut out = Vec::with_capacity(r * w);
    for i in 0..r {
        out.extend_from_slice(&x.data[i * c + start..i * c + end]);
    }
    Ok(Tensor::raw(vec![r, w], out))
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::EmptyInput("concat_rows"))?;
    let c = first.cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        require_2d(p, "concat_rows")?;
        if p.cols() != c {
            return Err(Error::dim("concat_rows", format!("widths {c} and {}", p.cols())));
        }
        data.extend_from_slice(&p.data);
        rows += p.rows();
    }
    Ok(Tensor::raw(vec![rows, c], data))
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::EmptyInput("concat_cols"))?;
    let r = first.rows();
    for p in parts {
        require_2d(p, "concat_cols")?;
        if p.rows() != r {
            return Err(Error::dim("concat_cols", format!("heights {r} and {}", p.rows())));
        }
    }
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(r * width);
    for i in 0..r {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::raw(vec![r, width], data))
}

/// Rescales row `i` to L2 norm `targets[i]`. Rows whose current norm is
/// below `1e-12` are left as they are.
pub fn renorm_rows(w: &Tensor, targets: &[f64]) -> Result<Tensor> {
    if targets.len() != w.rows() {
        return Err(Error::dim("renorm_rows", format!("{} targets for {} rows", targets.len(), w.rows())));
    }
    let c = w.cols();
    let mut data = w.data.clone();
    for (row, &target) in data.chunks_exact_mut(c).zip(targets) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n >= RENORM_FLOOR {
            let k = target / n;
            row.iter_mut().for_each(|v| *v *= k);
        }
    }
    Tensor::raw(w.shape.clone(), data).checked("renorm_rows")
}

pub(crate) const RENORM_FLOOR: f64 = 1e-12;

/// Scales `g` down to Frobenius norm `threshold` when it exceeds it.
pub fn norm_clip(g: &Tensor, threshold: f64) -> Tensor {
    let n = g.frobenius_norm();
    if n > threshold {
        g.map(|v| v * (threshold / n))
    } else {
        g.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let id = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = t(&[&[2.0, 3.0], &[4.0, 5.0]]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let c = matmul(&t(&[&[2.0]]), &t(&[&[3.0]])).unwrap();
        assert_eq!(c.data(), &[6.0]);
        assert!(matmul(&id, &t(&[&[1.0, 2.0, 3.0]])).is_err());
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = t(&[&[0.5, -1.0, 2.0], &[1.5, 0.0, -2.0]]);
        let nt = matmul_nt(&a, &b).unwrap();
        assert_eq!(nt, matmul(&a, &transpose(&b).unwrap()).unwrap());
        let tn = matmul_tn(&a, &b).unwrap();
        assert_eq!(tn, matmul(&transpose(&a).unwrap(), &b).unwrap());
    }

    #[test]
    fn silu_values() {
        let x = Tensor::vector(&[0.0, 40.0, -40.0]).unwrap();
        let y = silu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 40.0).abs() < 1e-12);
        assert!(y.data()[2].abs() < 1e-12);
        assert_eq!(silu_prime(&x).data()[0], 0.5);
    }

    #[test]
    fn silu_prime_matches_central_difference() {
        let h = 1e-6;
        for x in [-3.0, -1.0, 0.0, 1.0, 3.0] {
            let fd = (silu_scalar(x + h) - silu_scalar(x - h)) / (2.0 * h);
            assert!((silu_prime_scalar(x) - fd).abs() < 1e-8, "x={x}");
            let fd2 = (silu_prime_scalar(x + h) - silu_prime_scalar(x - h)) / (2.0 * h);
            assert!((silu_second_scalar(x) - fd2).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_rows_cases() {
        let y = softmax_rows(&t(&[&[0.0, 0.0, 0.0]]), None).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_rows(&t(&[&[7.5, 100.0]]), Some(&t(&[&[1.0, 0.0]]))).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);

        // direct evaluation of exp(x_i)/Σexp(x_j)
        let x = [1.0f64, 2.0, 3.0];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let want: Vec<f64> = x.iter().map(|v| v.exp() / z).collect();
        let y = softmax_rows(&t(&[&x]), None).unwrap();
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in y.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((a - b).abs() < 5e-9);
        }

        let err = softmax_rows(&t(&[&[1.0, 2.0]]), Some(&t(&[&[0.0, 0.0]])));
        assert!(matches!(err, Err(Error::DegenerateRow { row: 0 })));
    }

    #[test]
    fn rmsnorm_cases() {
        let ones = Tensor::full(&[4], 1.0);
        let y = rmsnorm(&Tensor::full(&[1, 4], 2.0), &ones, 0.0).unwrap();
        assert_eq!(y.data(), &[1.0; 4]);
        let y = rmsnorm(&Tensor::zeros(&[1, 4]), &ones, 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
        let y = rmsnorm(&Tensor::zeros(&[1, 4]), &ones, 0.0).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);

        let x = t(&[&[0.3, -1.7, 2.2, 0.01, -0.4]]);
        let y = rmsnorm(&x, &Tensor::full(&[5], 1.0), 0.0).unwrap();
        let rms = (y.data().iter().map(|v| v * v).sum::<f64>() / 5.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-14);
    }

    #[test]
    fn conv_cases() {
        let x = t(&[&[1.0], &[2.0], &[3.0]]);
        let y = causal_conv1d(&x, &t(&[&[1.0], &[1.0]])).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 5.0]);

        let x = t(&[&[1.0, -2.0], &[0.5, 4.0], &[3.0, 3.0]]);
        let id = t(&[&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]]);
        assert_eq!(causal_conv1d(&x, &id).unwrap(), x);

        let k = t(&[&[0.3, 0.1], &[-0.2, 0.5], &[1.0, 2.0]]);
        let y = causal_conv1d(&x, &k).unwrap();
        let mut x2 = x.clone();
        x2.data_mut()[4] = 99.0;
        let y2 = causal_conv1d(&x2, &k).unwrap();
        assert_eq!(&y.data()[..4], &y2.data()[..4]);
    }

    #[test]
    fn renorm_and_clip() {
        let w = t(&[&[3.0, 4.0], &[0.0, 0.0]]);
        let r = renorm_rows(&w, &[1.0, 2.0]).unwrap();
        assert!((r.row_norms()[0] - 1.0).abs() < 1e-15);
        assert_eq!(r.row(1), &[0.0, 0.0]);

        let g = t(&[&[3.0, 4.0]]);
        let c = norm_clip(&g, 2.5);
        assert!((c.frobenius_norm() - 2.5).abs() < 1e-15);
        assert_eq!(norm_clip(&g, 5.0), g);
        assert_eq!(norm_clip(&Tensor::zeros(&[2, 2]), 1.0), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn mac_counter_counts_products() {
        reset_mac_count();
        let a = Tensor::full(&[3, 4], 1.0);
        let b = Tensor::full(&[4, 5], 1.0);
        matmul(&a, &b).unwrap();
        assert_eq!(mac_count(), 60);
    }
}
