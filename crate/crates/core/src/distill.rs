//! Toy conversion pipeline: synthetic long-range recall tasks, a small
//! full-attention teacher, and distillation of a converted student whose
//! only trainable parameters live in the memory branch.
//!
//! Token layout of the synthetic vocabulary:
//!
//! ```text
//! 0            BOS
//! 1            needle marker
//! 2..18        keys
//! 18..34       values
//! 34..vocab    filler
//! ```

use std::io::Write;
use std::path::PathBuf;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{distill_objective, DistillWeights, LossTargets, Ops, Tape};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{forward_ops, is_trainable, Model, ModelConfig, Params, Runtime};
use crate::tensor::Tensor;

pub const BOS: usize = 0;
pub const MARKER: usize = 1;
const SPECIALS: usize = 2;
/// Size of the key pool and of the value pool.
pub const POOL: usize = 16;
/// Free positions [`TaskParams::fitted`] keeps around the stored block.
const PLACEMENT_SLACK: usize = 16;
/// Chunks the far placement region of a fitted task spans at least.
const FAR_CHUNKS: usize = 4;

pub const METRICS_HEADER: &str = "step,loss_kl,loss_ce,far_recall,near_recall";

pub fn key_token(i: usize) -> usize {
    SPECIALS + i
}

pub fn value_token(i: usize) -> usize {
    SPECIALS + POOL + i
}

fn first_filler() -> usize {
    SPECIALS + 2 * POOL
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `k v` pairs in the context; the tail asks `k` and expects `v`.
    AssociativeRecall,
    /// A marker followed by a needle in the context; the tail repeats the
    /// marker and expects the needle copied token by token.
    NeedleCopy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// The stored block sits inside the window of the first query. Later
    /// recall queries may reach slightly past it.
    Near,
    /// Everything the queries need sits outside the window and the sinks.
    Far,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskParams {
    pub kind: TaskKind,
    pub split: Split,
    pub vocab: usize,
    pub seq_len: usize,
    /// Stored pairs, or needle length for [`TaskKind::NeedleCopy`].
    pub n_pairs: usize,
    /// Queries asked at the end (associative recall only).
    pub n_queries: usize,
    /// Window and sink count the placement is made against.
    pub window: usize,
    pub sinks: usize,
    /// Memory chunk size; far blocks end before the chunk holding the first
    /// query. 0 ignores chunking.
    pub chunk: usize,
}

impl TaskParams {
    pub fn desk(kind: TaskKind, split: Split) -> Self {
        Self { kind, split, vocab: 64, seq_len: 64, n_pairs: 6, n_queries: 4, window: 16, sinks: 2, chunk: 8 }
    }

    /// Associative recall on both splits: what the student is distilled on.
    pub fn recall_mix() -> Vec<Self> {
        vec![Self::desk(TaskKind::AssociativeRecall, Split::Near), Self::desk(TaskKind::AssociativeRecall, Split::Far)]
    }

    /// Recall plus 12-token needle copies, interleaved. The copies give the
    /// teacher a dense retrieval signal early in training.
    pub fn teacher_mix() -> Vec<Self> {
        let needle = |split| Self { n_pairs: 12, ..Self::desk(TaskKind::NeedleCopy, split) };
        let [near, far] = <[Self; 2]>::try_from(Self::recall_mix()).expect("two splits");
        vec![near, needle(Split::Near), far, needle(Split::Far)]
    }

    fn query_len(&self) -> usize {
        match self.kind {
            TaskKind::AssociativeRecall => 2 * self.n_queries,
            TaskKind::NeedleCopy => self.n_pairs + 1,
        }
    }

    fn block_len(&self) -> usize {
        match self.kind {
            TaskKind::AssociativeRecall => 2 * self.n_pairs,
            TaskKind::NeedleCopy => self.n_pairs + 1,
        }
    }

    fn check(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        if self.vocab <= first_filler() {
            return fail(format!("vocab {} leaves no filler tokens (need > {})", self.vocab, first_filler()));
        }
        if self.n_pairs == 0 || self.n_pairs > POOL {
            return fail(format!("n_pairs {} outside 1..={POOL}", self.n_pairs));
        }
        if self.kind == TaskKind::AssociativeRecall && (self.n_queries == 0 || self.n_queries > self.n_pairs) {
            return fail(format!("n_queries {} outside 1..={}", self.n_queries, self.n_pairs));
        }
        if self.window == 0 {
            return fail("window must be positive".into());
        }
        if self.query_len() >= self.seq_len {
            return fail(format!("queries need {} of {} positions", self.query_len(), self.seq_len));
        }
        Ok(())
    }

    /// The same task placed against `cfg`'s window, sinks and chunk. Far tasks
    /// are lengthened until the placement region holds the block with some
    /// slack and spans several memory chunks; near tasks widen their
    /// placement window to at least the block length.
    pub fn fitted(&self, cfg: &WindowConfig) -> Self {
        let mut p = Self { window: cfg.window, sinks: cfg.sinks, chunk: cfg.chunk, ..self.clone() };
        if self.check().is_err() {
            return p;
        }
        match p.split {
            Split::Near => p.window = p.window.max(p.block_len() + 1),
            Split::Far => {
                let want = (p.block_len() + PLACEMENT_SLACK).max(FAR_CHUNKS * p.chunk);
                while p.room() < want {
                    p.seq_len += 1;
                }
            }
        }
        p
    }

    fn room(&self) -> usize {
        if self.query_len() >= self.seq_len {
            return 0;
        }
        let (lo, hi) = self.region();
        hi.saturating_sub(lo)
    }

    /// Half-open range of positions where the stored block may go.
    fn region(&self) -> (usize, usize) {
        let q0 = self.seq_len - self.query_len();
        match self.split {
            Split::Near => ((q0 + 1).saturating_sub(self.window).max(1), q0),
            Split::Far => {
                let mut hi = self.seq_len.saturating_sub(self.window + self.sinks).min((q0 + 1).saturating_sub(self.window));
                if let Some(n) = q0.checked_div(self.chunk) {
                    hi = hi.min(n * self.chunk);
                }
                (self.sinks.max(1), hi)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub split: Split,
    pub vocab: usize,
    pub n_pairs: usize,
    pub tokens: Vec<usize>,
    /// Positions whose next token is an answer.
    pub query_positions: Vec<usize>,
    /// 1.0 at the query positions, 0.0 elsewhere.
    pub mask: Vec<f64>,
}

impl SyntheticTask {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn answers(&self) -> Vec<usize> {
        self.query_positions.iter().map(|&q| self.tokens[q + 1]).collect()
    }

    /// Next-token labels with the answer mask.
    pub fn targets(&self) -> LossTargets {
        let mut labels = self.tokens[1..].to_vec();
        labels.push(BOS);
        LossTargets { labels, mask: self.mask.clone() }
    }
}

/// One task. Fails when the stored block cannot be placed under the
/// requested split.
pub fn gen_task<R: Rng + ?Sized>(p: &TaskParams, rng: &mut R) -> Result<SyntheticTask> {
    p.check()?;
    let (l, n) = (p.seq_len, p.n_pairs);
    let (lo, hi) = p.region();
    let room = p.room();
    if room < p.block_len() {
        return Err(Error::Generation(format!(
            "{:?} split needs {} positions in [{lo}, {hi}) for L={l}, W={}, s={}",
            p.split,
            p.block_len(),
            p.window,
            p.sinks
        )));
    }
    let filler = first_filler()..p.vocab;
    let mut tokens: Vec<usize> = (0..l).map(|_| rng.gen_range(filler.clone())).collect();
    tokens[0] = BOS;
    let q0 = l - p.query_len();
    let mut query_positions = Vec::new();
    match p.kind {
        TaskKind::AssociativeRecall => {
            let keys = sample(rng, POOL, n).into_vec();
            let values = sample(rng, POOL, n).into_vec();
            // n slots of width 2 scattered over the region
            let mut slots = sample(rng, room - n, n).into_vec();
            slots.sort_unstable();
            for (i, s) in slots.iter().enumerate() {
                let at = lo + s + i;
                tokens[at] = key_token(keys[i]);
                tokens[at + 1] = value_token(values[i]);
            }
            for (j, i) in sample(rng, n, p.n_queries).into_iter().enumerate() {
                let at = q0 + 2 * j;
                tokens[at] = key_token(keys[i]);
                tokens[at + 1] = value_token(values[i]);
                query_positions.push(at);
            }
        }
        TaskKind::NeedleCopy => {
            let needle = sample(rng, POOL, n).into_vec();
            let at = lo + rng.gen_range(0..=room - p.block_len());
            tokens[at] = MARKER;
            tokens[q0] = MARKER;
            for (i, v) in needle.iter().enumerate() {
                tokens[at + 1 + i] = value_token(*v);
                tokens[q0 + 1 + i] = value_token(*v);
            }
            query_positions.extend(q0..q0 + n);
        }
    }
    let mut mask = vec![0.0; l];
    for &q in &query_positions {
        mask[q] = 1.0;
    }
    Ok(SyntheticTask { kind: p.kind, split: p.split, vocab: p.vocab, n_pairs: n, tokens, query_positions, mask })
}

fn item_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n` tasks; item `i` depends only on `(seed, i)`.
pub fn gen_batch(p: &TaskParams, seed: u64, n: usize) -> Result<Vec<SyntheticTask>> {
    (0..n).map(|i| gen_task(p, &mut item_rng(seed, i as u64))).collect()
}

/// Writes one JSON object per line.
pub fn write_jsonl(out: &mut dyn Write, tasks: &[SyntheticTask]) -> Result<()> {
    for t in tasks {
        serde_json::to_writer(&mut *out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Inclusive ranges for the per-step window configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigRanges {
    pub sinks: (usize, usize),
    pub window: (usize, usize),
    pub chunk: (usize, usize),
}

impl ConfigRanges {
    pub const DESK: Self = Self { sinks: (0, 4), window: (8, 64), chunk: (4, 32) };
    pub const FULL_SCALE: Self = Self { sinks: (0, 256), window: (512, 8192), chunk: (512, 4096) };

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("sinks", self.sinks), ("window", self.window), ("chunk", self.chunk)] {
            if lo > hi {
                return Err(Error::Config(format!("{name} range {lo}..={hi} is empty")));
            }
        }
        if self.window.0 == 0 || self.chunk.0 == 0 {
            return Err(Error::Config("window and chunk ranges must start at 1 or above".into()));
        }
        Ok(())
    }
}

/// Sinks, window and chunk size for one run of the student.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub sinks: usize,
    pub window: usize,
    pub chunk: usize,
}

impl WindowConfig {
    pub const EVAL: Self = Self { sinks: 2, window: 16, chunk: 8 };

    pub fn runtime(&self) -> Runtime {
        Runtime::sliding(self.window, self.sinks, self.chunk)
    }
}

/// Independent uniform draws of sinks, window and chunk.
pub fn randomized_config_sample<R: Rng + ?Sized>(ranges: &ConfigRanges, rng: &mut R) -> WindowConfig {
    WindowConfig {
        sinks: rng.gen_range(ranges.sinks.0..=ranges.sinks.1),
        window: rng.gen_range(ranges.window.0..=ranges.window.1),
        chunk: rng.gen_range(ranges.chunk.0..=ranges.chunk.1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSpec {
    pub kl_weight: f64,
    pub ce_weight: f64,
    pub temperature: f64,
    pub ranges: ConfigRanges,
    /// Name fragments selecting which memory-branch parameters train.
    pub trainable: Vec<String>,
    pub optimizer: Optimizer,
    pub lr: f64,
    /// Momentum coefficient, or Adam's first-moment decay.
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip: f64,
    pub batch: usize,
    pub eval: WindowConfig,
    /// Recall is measured every this many steps (and on the last one).
    pub eval_every: usize,
    /// Leading steps that use `eval` instead of a sampled configuration.
    pub warmup: usize,
}

impl Default for DistillSpec {
    fn default() -> Self {
        Self {
            kl_weight: 1.0,
            ce_weight: 0.0,
            temperature: 1.0,
            ranges: ConfigRanges::DESK,
            trainable: vec![".mem.".into()],
            optimizer: Optimizer::Adam,
            lr: 3e-3,
            momentum: 0.9,
            clip: 1.0,
            batch: 8,
            eval: WindowConfig::EVAL,
            eval_every: 50,
            warmup: 400,
        }
    }
}

impl DistillSpec {
    pub fn weights(&self) -> DistillWeights {
        DistillWeights { kl_weight: self.kl_weight, ce_weight: self.ce_weight, temperature: self.temperature }
    }

    pub fn trains(&self, name: &str) -> bool {
        is_trainable(name) && self.trainable.iter().any(|f| name.contains(f.as_str()))
    }

    pub fn validate(&self) -> Result<()> {
        self.ranges.validate()?;
        if self.batch == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch and eval_every must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// `kl_weight·KL(teacher‖student) + ce_weight·CE(student, labels)` averaged
/// over the masked positions.
pub fn distill_loss(student: &Tensor, teacher: &Tensor, targets: &LossTargets, spec: &DistillSpec) -> Result<f64> {
    Ok(distill_objective(student, teacher, targets, spec.weights())?.0)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Fraction of query positions where the greedy prediction is the answer.
pub fn recall(model: &Model, tasks: &[SyntheticTask], rt: &Runtime) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for t in tasks {
        let logits = model.logits(&t.tokens, rt)?;
        for &q in &t.query_positions {
            hit += usize::from(argmax(logits.row(q)) == t.tokens[q + 1]);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("recall"));
    }
    Ok(hit as f64 / total as f64)
}

/// Held-out near and far tasks for progress reporting.
#[derive(Clone, Debug, Default)]
pub struct EvalSets {
    pub far: Vec<SyntheticTask>,
    pub near: Vec<SyntheticTask>,
}

impl EvalSets {
    pub fn generate(kind: TaskKind, cfg: WindowConfig, n: usize, seed: u64) -> Result<Self> {
        let params = |split| TaskParams { window: cfg.window, sinks: cfg.sinks, chunk: cfg.chunk, ..TaskParams::desk(kind, split) };
        Ok(Self { far: gen_batch(&params(Split::Far), seed, n)?, near: gen_batch(&params(Split::Near), seed ^ 1, n)? })
    }
}

/// Where training sequences come from.
#[derive(Clone, Debug)]
pub enum TrainData {
    /// Fresh tasks every step, cycling through the generators, each fitted
    /// to the step's sampled window configuration.
    Synthetic(Vec<TaskParams>),
    /// A fixed pool, cycled in order (e.g. pre-generated student outputs).
    Fixed(Vec<SyntheticTask>),
}

impl TrainData {
    fn batch(&self, step: usize, size: usize, seed: u64, cfg: &WindowConfig) -> Result<Vec<SyntheticTask>> {
        (0..size)
            .map(|b| {
                let i = step * size + b;
                match self {
                    TrainData::Synthetic(ps) if !ps.is_empty() => {
                        gen_task(&ps[i % ps.len()].fitted(cfg), &mut item_rng(seed, i as u64))
                    }
                    TrainData::Fixed(pool) if !pool.is_empty() => Ok(pool[i % pool.len()].clone()),
                    _ => Err(Error::EmptyInput("training data")),
                }
            })
            .collect()
    }
}

/// Greedy decoding that counts every token it produces.
#[derive(Debug, Default)]
pub struct Generator {
    calls: usize,
}

impl Generator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    /// Replaces every answer token with `model`'s greedy choice given the
    /// prefix so far, decoding token by token. Masks are kept.
    pub fn on_policy(&mut self, model: &Model, tasks: &[SyntheticTask], rt: Runtime) -> Result<Vec<SyntheticTask>> {
        tasks
            .iter()
            .map(|t| {
                let mut out = t.clone();
                let mut stream = model.stream(rt, t.seq_len())?;
                for pos in 0..t.seq_len() - 1 {
                    let logits = stream.step(out.tokens[pos])?;
                    if t.mask[pos] != 0.0 {
                        out.tokens[pos + 1] = argmax(&logits);
                        self.calls += 1;
                    }
                }
                Ok(out)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub steps: usize,
    pub seed: u64,
    /// Directory for the state dump written on divergence.
    pub dump: Option<PathBuf>,
}

/// Outer-loop state after a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub seed: u64,
    /// First-moment buffers, one per trained parameter.
    pub velocity: Vec<(String, Tensor)>,
    pub trained: Vec<String>,
    pub frozen: Vec<String>,
    pub frozen_digest: String,
}

fn global_clip(grads: &mut [Tensor], max: f64) {
    if max <= 0.0 {
        return;
    }
    let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max {
        for g in grads.iter_mut() {
            *g = g.map(|x| x * max / norm);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// `v ← βv + g`, `θ ← θ − lr·v`.
    Momentum,
    /// Bias-corrected Adam.
    Adam,
}

#[derive(Clone, Copy, Debug)]
struct Hyper {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

/// Optimizer state for a fixed, ordered list of parameters.
struct Stepper {
    kind: Optimizer,
    names: Vec<String>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    t: i32,
}

impl Stepper {
    fn new(kind: Optimizer, params: &Params, names: Vec<String>) -> Result<Self> {
        let zeros = names.iter().map(|n| params.get(n).map(|t| Tensor::zeros(t.shape()))).collect::<Result<Vec<_>>>()?;
        let second = if kind == Optimizer::Adam { zeros.clone() } else { Vec::new() };
        Ok(Self { kind, names, first: zeros, second, t: 0 })
    }

    fn step(&mut self, params: &mut Params, grads: &[Tensor], h: Hyper) -> Result<()> {
        self.t += 1;
        let (c1, c2) = (1.0 - h.beta1.powi(self.t), 1.0 - h.beta2.powi(self.t));
        for (i, (name, g)) in self.names.iter().zip(grads).enumerate() {
            let p = params.get_mut(name)?;
            let m = &mut self.first[i];
            let out: Vec<f64> = match self.kind {
                Optimizer::Momentum => {
                    *m = Tensor::new(m.shape().to_vec(), m.data().iter().zip(g.data()).map(|(m, g)| h.beta1 * m + g).collect())?;
                    p.data().iter().zip(m.data()).map(|(p, m)| p - h.lr * m).collect()
                }
                Optimizer::Adam => {
                    let v = &mut self.second[i];
                    *m = Tensor::new(m.shape().to_vec(), m.data().iter().zip(g.data()).map(|(m, g)| h.beta1 * m + (1.0 - h.beta1) * g).collect())?;
                    *v = Tensor::new(v.shape().to_vec(), v.data().iter().zip(g.data()).map(|(v, g)| h.beta2 * v + (1.0 - h.beta2) * g * g).collect())?;
                    let step = m.data().iter().zip(v.data()).map(|(m, v)| h.lr * (m / c1) / ((v / c2).sqrt() + h.eps));
                    p.data().iter().zip(step).map(|(p, s)| p - s).collect()
                }
            };
            *p = Tensor::new(p.shape().to_vec(), out)?;
        }
        Ok(())
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Teacher logits, batch-averaged loss values and gradients of the trained
/// parameters for one batch.
fn batch_gradients(
    student: &Model,
    teacher: &Model,
    tasks: &[SyntheticTask],
    trained: &[String],
    spec: &DistillSpec,
    rt: &Runtime,
) -> Result<(f64, f64, f64, Vec<Tensor>)> {
    let mut sums: Vec<Tensor> = Vec::new();
    let (mut total, mut kl, mut ce) = (0.0, 0.0, 0.0);
    let scale = 1.0 / tasks.len() as f64;
    for task in tasks {
        let t_logits = teacher.logits(&task.tokens, &Runtime::full(rt.chunk))?;
        let targets = task.targets();
        let mut tape = Tape::new();
        let vars = student.params.map(|n, t| if trained.iter().any(|x| x == n) { tape.input(t.clone()) } else { tape.constant(t.clone()) });
        let logits = forward_ops(&mut tape, &student.config, &vars, &task.tokens, rt)?;
        let (t, k, c) = distill_objective(tape.value(&logits), &t_logits, &targets, spec.weights())?;
        let loss = tape.distill_loss(&logits, &t_logits, &targets, spec.weights())?;
        let grads = tape.backward(loss)?;
        for (i, name) in trained.iter().enumerate() {
            let v = *vars.get(name)?;
            let g = grads.get_or_zeros(v, tape.value(&v)).map(|x| x * scale);
            match sums.get_mut(i) {
                Some(s) => *s = crate::tensor::add(s, &g)?,
                None => sums.push(g),
            }
        }
        total += t * scale;
        kl += k * scale;
        ce += c * scale;
    }
    Ok((total, kl, ce, sums))
}

/// Distills `teacher` into `student`, updating only the trained subset. Each step samples a window configuration, builds a batch, and
/// backpropagates the loss through the whole inner memory loop. Writes one
/// metrics row per step to `metrics` (header included).
pub fn train(
    student: &mut Model,
    teacher: &Model,
    data: &TrainData,
    eval: &EvalSets,
    spec: &DistillSpec,
    run: &RunOptions,
    metrics: &mut dyn Write,
) -> Result<TrainState> {
    spec.validate()?;
    let (trained, frozen): (Vec<String>, Vec<String>) = student.params.names().iter().cloned().partition(|n| spec.trains(n));
    let frozen_digest = checkpoint::frozen_digest(&student.params);
    let mut opt = Stepper::new(spec.optimizer, &student.params, trained.clone())?;
    let hyper = Hyper { lr: spec.lr, beta1: spec.momentum, beta2: 0.999, eps: 1e-8 };
    let mut cfg_rng = item_rng(run.seed, u64::MAX);
    writeln!(metrics, "{METRICS_HEADER}")?;
    let eval_rt = spec.eval.runtime();
    for step in 0..run.steps {
        let sampled = randomized_config_sample(&spec.ranges, &mut cfg_rng);
        let cfg = if step < spec.warmup { spec.eval } else { sampled };
        let batch = data.batch(step, spec.batch, run.seed, &cfg)?;
        let (total, kl, ce, mut grads) = match batch_gradients(student, teacher, &batch, &trained, spec, &cfg.runtime()) {
            Err(Error::NonFinite(_)) => (f64::NAN, f64::NAN, f64::NAN, Vec::new()),
            other => other?,
        };
        if !total.is_finite() || grads.iter().any(|g| g.data().iter().any(|x| !x.is_finite())) {
            if let Some(dir) = &run.dump {
                checkpoint::save(student, &dir.join(format!("diverged_step{step}")))?;
            }
            return Err(Error::Diverged { step });
        }
        let (far, near) = if step % spec.eval_every == 0 || step + 1 == run.steps {
            let far = if eval.far.is_empty() { None } else { Some(recall(student, &eval.far, &eval_rt)?) };
            let near = if eval.near.is_empty() { None } else { Some(recall(student, &eval.near, &eval_rt)?) };
            (far, near)
        } else {
            (None, None)
        };
        writeln!(metrics, "{step},{kl},{ce},{},{}", fmt_opt(far), fmt_opt(near))?;
        global_clip(&mut grads, spec.clip);
        opt.step(&mut student.params, &grads, hyper)?;
    }
    debug_assert_eq!(frozen_digest, checkpoint::frozen_digest(&student.params));
    Ok(TrainState {
        step: run.steps,
        seed: run.seed,
        velocity: trained.iter().cloned().zip(opt.first).collect(),
        trained,
        frozen,
        frozen_digest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSpec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub batch: usize,
    pub steps: usize,
    /// Window configurations the training tasks are placed against (the
    /// teacher itself always attends to everything).
    pub ranges: ConfigRanges,
    /// Leading steps whose tasks are placed against [`WindowConfig::EVAL`]
    /// instead of a sampled configuration.
    pub warmup: usize,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self { lr: 3e-3, beta1: 0.9, beta2: 0.99, eps: 1e-8, clip: 1.0, batch: 16, steps: 3500, ranges: ConfigRanges::DESK, warmup: 2000 }
    }
}

/// Trains a full-attention model with Adam on the masked cross-entropy of
/// tasks drawn from `tasks`. Writes `step,loss_ce` rows to `metrics`.
pub fn train_teacher(
    config: ModelConfig,
    tasks: &[TaskParams],
    spec: &TeacherSpec,
    seed: u64,
    metrics: &mut dyn Write,
) -> Result<Model> {
    let mut model = Model::init_teacher(config, &mut item_rng(seed, 0))?;
    let names = model.params.names().to_vec();
    let mut opt = Stepper::new(Optimizer::Adam, &model.params, names.clone())?;
    let hyper = Hyper { lr: spec.lr, beta1: spec.beta1, beta2: spec.beta2, eps: spec.eps };
    let data = TrainData::Synthetic(tasks.to_vec());
    let mut cfg_rng = item_rng(seed, u64::MAX);
    let rt = Runtime::full(1);
    writeln!(metrics, "step,loss_ce")?;
    for step in 0..spec.steps {
        let cfg = if step < spec.warmup { WindowConfig::EVAL } else { randomized_config_sample(&spec.ranges, &mut cfg_rng) };
        let batch = data.batch(step, spec.batch, seed.wrapping_add(1), &cfg)?;
        let scale = 1.0 / batch.len() as f64;
        let mut sums: Vec<Tensor> = model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut loss_sum = 0.0;
        for task in &batch {
            let mut tape = Tape::new();
            let vars = model.params.map(|_, t| tape.input(t.clone()));
            let logits = forward_ops(&mut tape, &model.config, &vars, &task.tokens, &rt)?;
            let loss = tape.cross_entropy(&logits, &task.targets())?;
            loss_sum += tape.value(&loss).item() * scale;
            let grads = tape.backward(loss)?;
            for (s, name) in sums.iter_mut().zip(&names) {
                let v = *vars.get(name)?;
                if let Some(g) = grads.get(v) {
                    *s = crate::tensor::add(s, &g.map(|x| x * scale))?;
                }
            }
        }
        if !loss_sum.is_finite() {
            return Err(Error::Diverged { step });
        }
        writeln!(metrics, "{step},{loss_sum}")?;
        global_clip(&mut sums, spec.clip);
        opt.step(&mut model.params, &sums, hyper)?;
    }
    Ok(model)
}
