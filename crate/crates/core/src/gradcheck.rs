//! Fidelity suite for the hand-derived inner-loss gradients.
//!
//! Every instance draws random memory weights and a chunk of keys and
//! values, then compares the manual quantities (`G_out`, `G_A`, `G_in`,
//! `G_gate` and the gradients of the three weight matrices) against central
//! finite differences of `−Σ f(K) ⊙ V` and against the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{max_relative_error, numerical_gradient, Eager, Ops, Tape};
use crate::error::Result;
use crate::memory::{forward_ops, inner_gradients_ops, GradFault, HeadWeights, MemoryConfig};
use crate::tensor::{self as t, Tensor};

pub const FD_TOLERANCE: f64 = 1e-5;
pub const TAPE_TOLERANCE: f64 = 1e-10;
/// Denominator floor for relative errors against finite differences.
const FD_FLOOR: f64 = 1e-3;
const TAPE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub instances: usize,
    /// Chunk lengths are drawn from `1..=max_chunk`.
    pub max_chunk: usize,
    pub head_dim: usize,
    pub hidden: usize,
    /// Std of the random `W_down`; nonzero so every path carries signal.
    pub down_std: f64,
    pub fd_step: f64,
    /// Test hook that corrupts the manual gradients.
    pub fault: Option<GradFault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { instances: 20, max_chunk: 8, head_dim: 16, hidden: 32, down_std: 0.3, fd_step: 1e-6, fault: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub instance: usize,
    pub quantity: String,
    pub shape: Vec<usize>,
    pub fd_rel_err: f64,
    pub tape_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub seed: u64,
    pub config: GradcheckConfig,
    pub entries: Vec<GradEntry>,
    pub max_fd_rel_err: f64,
    pub max_tape_rel_err: f64,
    pub fd_tolerance: f64,
    pub tape_tolerance: f64,
    pub passed: bool,
}

/// `−Σ (A·W_downᵀ + K) ⊙ V` as a function of `A`.
fn loss_from_a(a: &Tensor, w: &HeadWeights, k: &Tensor, v: &Tensor) -> Result<f64> {
    let out = t::add(&t::matmul_nt(a, &w.down)?, k)?;
    Ok(-t::mul(&out, v)?.sum())
}

fn loss_from_pre(h_gate: &Tensor, h_in: &Tensor, w: &HeadWeights, k: &Tensor, v: &Tensor) -> Result<f64> {
    loss_from_a(&t::mul(&t::silu(h_gate), h_in)?, w, k, v)
}

/// Runs `cfg.instances` random instances seeded from `seed`.
pub fn run(cfg: &GradcheckConfig, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mcfg = MemoryConfig::new(1, cfg.head_dim, cfg.hidden);
    let mut entries = Vec::new();
    for instance in 0..cfg.instances {
        let c = rng.gen_range(1..=cfg.max_chunk.max(1));
        let mut w = HeadWeights::init(&mcfg, &mut rng);
        w.down = Tensor::randn(&[cfg.head_dim, cfg.hidden], cfg.down_std, &mut rng);
        let k = Tensor::uniform(&[c, cfg.head_dim], -1.0, 1.0, &mut rng);
        let v = Tensor::uniform(&[c, cfg.head_dim], -1.0, 1.0, &mut rng);

        let manual = inner_gradients_ops(&mut Eager, &w, &k, &v, None, true, cfg.fault)?;
        let trace = forward_ops(&mut Eager, &w, &k)?;

        let mut tape = Tape::new();
        let wv = w.map(|x| tape.input(x.clone()));
        let (kv, vv) = (tape.input(k.clone()), tape.input(v.clone()));
        let tr = forward_ops(&mut tape, &wv, &kv)?;
        let prod = tape.mul(&tr.out, &vv)?;
        let s = tape.sum(&prod)?;
        let loss = tape.scale(&s, -1.0)?;
        let grads = tape.backward(loss)?;

        let h = cfg.fd_step;
        let fd_out = numerical_gradient(&trace.out, h, |o| Ok(-t::mul(o, &v)?.sum()))?;
        let fd_a = numerical_gradient(&trace.a, h, |a| loss_from_a(a, &w, &k, &v))?;
        let fd_in = numerical_gradient(&trace.h_in, h, |x| loss_from_pre(&trace.h_gate, x, &w, &k, &v))?;
        let fd_gate = numerical_gradient(&trace.h_gate, h, |x| loss_from_pre(x, &trace.h_in, &w, &k, &v))?;
        let loss_with = |which: usize, probe: &Tensor| {
            let mut p = w.clone();
            *[&mut p.up, &mut p.gate, &mut p.down][which] = probe.clone();
            Ok(-t::mul(&forward_ops(&mut Eager, &p, &k)?.out, &v)?.sum())
        };
        let fd_up = numerical_gradient(&w.up, h, |x| loss_with(0, x))?;
        let fd_wgate = numerical_gradient(&w.gate, h, |x| loss_with(1, x))?;
        let fd_down = numerical_gradient(&w.down, h, |x| loss_with(2, x))?;

        let rows = [
            ("G_out", &manual.g_out, fd_out, tr.out),
            ("G_A", &manual.g_a, fd_a, tr.a),
            ("G_in", &manual.g_in, fd_in, tr.h_in),
            ("G_gate", &manual.g_gate, fd_gate, tr.h_gate),
            ("W_up", &manual.weights.up, fd_up, wv.up),
            ("W_gate", &manual.weights.gate, fd_wgate, wv.gate),
            ("W_down", &manual.weights.down, fd_down, wv.down),
        ];
        for (name, m, fd, var) in rows {
            let taped = grads.get_or_zeros(var, m);
            entries.push(GradEntry {
                instance,
                quantity: name.into(),
                shape: m.shape().to_vec(),
                fd_rel_err: max_relative_error(m, &fd, FD_FLOOR),
                tape_rel_err: max_relative_error(m, &taped, TAPE_FLOOR),
            });
        }
    }
    let max_fd = entries.iter().map(|e| e.fd_rel_err).fold(0.0, f64::max);
    let max_tape = entries.iter().map(|e| e.tape_rel_err).fold(0.0, f64::max);
    Ok(GradReport {
        seed,
        config: cfg.clone(),
        entries,
        max_fd_rel_err: max_fd,
        max_tape_rel_err: max_tape,
        fd_tolerance: FD_TOLERANCE,
        tape_tolerance: TAPE_TOLERANCE,
        passed: max_fd < FD_TOLERANCE && max_tape < TAPE_TOLERANCE,
    })
}
