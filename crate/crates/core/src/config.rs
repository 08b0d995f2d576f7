//! Flat key-value run configuration for the command-line tool.
//!
//! A run is described by one TOML file of top-level keys plus `key=value`
//! overrides. Unknown keys are rejected. Every key has a default, so an
//! empty file (or none) is a valid configuration.
//!
//! ```
//! use allmem::config::RunConfig;
//!
//! let cfg = RunConfig::parse("steps = 10\nwindow_max = 32", &["lr=0.001".to_string()]).unwrap();
//! assert_eq!((cfg.steps, cfg.window_max, cfg.lr), (10, 32, 0.001));
//! assert!(RunConfig::parse("windw = 3", &[]).is_err());
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::branch::BranchKind;
use crate::cost::{CostConfig, DEFAULT_LENGTHS};
use crate::distill::{ConfigRanges, DistillSpec, Optimizer, TaskKind, TeacherSpec, WindowConfig};
use crate::error::{Error, Result};
use crate::gradcheck::GradcheckConfig;
use crate::memory::{GradFault, NormalizeSet};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostPreset {
    /// 0.6B-class dimensions, window 4096, 128 sinks, chunk 2048.
    Reference,
    /// The desk-scale model.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // model
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub mem_hidden: usize,
    pub conv_kernel: usize,
    pub mem_clip: f64,
    pub eta_on_down: bool,
    pub normalize_down: bool,
    pub mem_init_down_std: f64,
    /// Memory branch the distilled student gets.
    pub branch: BranchKind,

    // tasks and evaluation
    pub task: TaskKind,
    pub eval_tasks: usize,
    pub eval_sinks: usize,
    pub eval_window: usize,
    pub eval_chunk: usize,

    // teacher
    pub teacher_steps: usize,
    pub teacher_lr: f64,
    pub teacher_batch: usize,
    pub teacher_warmup: usize,
    /// Checkpoint stem; defaults to `<out>/teacher`.
    pub teacher: Option<PathBuf>,

    // distillation
    pub steps: usize,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub warmup: usize,
    pub clip_norm: f64,
    pub kl_weight: f64,
    pub ce_weight: f64,
    pub temperature: f64,
    pub sinks_min: usize,
    pub sinks_max: usize,
    pub window_min: usize,
    pub window_max: usize,
    pub chunk_min: usize,
    pub chunk_max: usize,
    pub eval_every: usize,
    /// Train on a pool of greedy student outputs generated before training.
    pub offline_on_policy: bool,
    pub pool_size: usize,
    /// Checkpoint stem evaluated by `eval`; defaults to `<out>/student`.
    pub checkpoint: Option<PathBuf>,

    // cost model
    pub cost_preset: CostPreset,
    pub cost_lengths: Vec<usize>,
    pub cost_window: Option<usize>,
    pub cost_sinks: Option<usize>,
    pub cost_chunk: Option<usize>,
    /// Length at which the full-versus-ours ratio is checked.
    pub ratio_length: usize,

    // gradient check
    pub grad_instances: usize,
    pub grad_fault: Option<GradFault>,

    // benchmark
    pub bench_lengths: Vec<usize>,
    pub bench_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let d = DistillSpec::default();
        let t = TeacherSpec::default();
        let e = WindowConfig::EVAL;
        Self {
            vocab: m.vocab,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            n_kv_heads: m.n_kv_heads,
            head_dim: m.head_dim,
            ffn_hidden: m.ffn_hidden,
            mem_hidden: m.mem_hidden,
            conv_kernel: m.conv_kernel,
            mem_clip: m.clip,
            eta_on_down: m.eta_on_down,
            normalize_down: m.normalize.down,
            mem_init_down_std: m.mem_init_down_std,
            branch: BranchKind::AllMem,
            task: TaskKind::AssociativeRecall,
            eval_tasks: 64,
            eval_sinks: e.sinks,
            eval_window: e.window,
            eval_chunk: e.chunk,
            teacher_steps: t.steps,
            teacher_lr: t.lr,
            teacher_batch: t.batch,
            teacher_warmup: t.warmup,
            teacher: None,
            steps: 1500,
            optimizer: d.optimizer,
            lr: d.lr,
            momentum: d.momentum,
            batch: d.batch,
            warmup: d.warmup,
            clip_norm: d.clip,
            kl_weight: d.kl_weight,
            ce_weight: d.ce_weight,
            temperature: d.temperature,
            sinks_min: d.ranges.sinks.0,
            sinks_max: d.ranges.sinks.1,
            window_min: d.ranges.window.0,
            window_max: d.ranges.window.1,
            chunk_min: d.ranges.chunk.0,
            chunk_max: d.ranges.chunk.1,
            eval_every: d.eval_every,
            offline_on_policy: false,
            pool_size: 256,
            checkpoint: None,
            cost_preset: CostPreset::Reference,
            cost_lengths: DEFAULT_LENGTHS.to_vec(),
            cost_window: None,
            cost_sinks: None,
            cost_chunk: None,
            ratio_length: 1 << 17,
            grad_instances: 20,
            grad_fault: None,
            bench_lengths: vec![64, 256, 1024],
            bench_repeats: 3,
        }
    }
}

/// `value` as a TOML value, or as a bare string when it does not parse.
fn override_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl RunConfig {
    /// Parses TOML `text` and applies `key=value` overrides on top.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .filter(|(k, _)| !k.trim().is_empty())
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            table.insert(key.trim().to_string(), override_value(value.trim()));
        }
        let cfg = Self::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if any) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.distill_spec().validate()?;
        if self.eval_tasks == 0 || self.eval_window == 0 {
            return Err(Error::Config("eval_tasks and eval_window must be positive".into()));
        }
        if self.cost_lengths.is_empty() || self.bench_lengths.is_empty() || self.bench_repeats == 0 {
            return Err(Error::Config("cost_lengths, bench_lengths and bench_repeats must be non-empty".into()));
        }
        Ok(())
    }

    /// Teacher architecture; the memory fields are used at conversion.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.vocab,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            ffn_hidden: self.ffn_hidden,
            mem_head_dim: self.head_dim,
            mem_hidden: self.mem_hidden,
            conv_kernel: self.conv_kernel,
            clip: self.mem_clip,
            eta_on_down: self.eta_on_down,
            normalize: NormalizeSet { down: self.normalize_down, ..NormalizeSet::default() },
            mem_init_down_std: self.mem_init_down_std,
            ..ModelConfig::default()
        }
    }

    pub fn ranges(&self) -> ConfigRanges {
        ConfigRanges {
            sinks: (self.sinks_min, self.sinks_max),
            window: (self.window_min, self.window_max),
            chunk: (self.chunk_min, self.chunk_max),
        }
    }

    pub fn eval_config(&self) -> WindowConfig {
        WindowConfig { sinks: self.eval_sinks, window: self.eval_window, chunk: self.eval_chunk }
    }

    pub fn distill_spec(&self) -> DistillSpec {
        DistillSpec {
            kl_weight: self.kl_weight,
            ce_weight: self.ce_weight,
            temperature: self.temperature,
            ranges: self.ranges(),
            optimizer: self.optimizer,
            lr: self.lr,
            momentum: self.momentum,
            clip: self.clip_norm,
            batch: self.batch,
            eval: self.eval_config(),
            eval_every: self.eval_every,
            warmup: self.warmup,
            ..DistillSpec::default()
        }
    }

    pub fn teacher_spec(&self) -> TeacherSpec {
        TeacherSpec {
            lr: self.teacher_lr,
            batch: self.teacher_batch,
            steps: self.teacher_steps,
            warmup: self.teacher_warmup,
            ranges: self.ranges(),
            ..TeacherSpec::default()
        }
    }

    pub fn cost_config(&self) -> CostConfig {
        let mut c = match self.cost_preset {
            CostPreset::Reference => CostConfig::reference_0_6b(),
            CostPreset::Desk => CostConfig::desk(),
        };
        c.window = self.cost_window.unwrap_or(c.window);
        c.sinks = self.cost_sinks.unwrap_or(c.sinks);
        c.chunk = self.cost_chunk.unwrap_or(c.chunk);
        c
    }

    pub fn gradcheck_config(&self) -> GradcheckConfig {
        GradcheckConfig { instances: self.grad_instances, fault: self.grad_fault, ..GradcheckConfig::default() }
    }
}
