//! Batch command-line entry point.
//!
//! Every command reads one [`RunConfig`], writes its artifacts under
//! `--out` together with `<command>.run.json` (seed plus the resolved
//! configuration) and maps its outcome onto a stable exit code: 0 success,
//! 1 failed check, 2 usage or configuration error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::branch::BranchKind;
use crate::checkpoint;
use crate::config::{CostPreset, RunConfig};
use crate::cost;
use crate::distill::{self, EvalSets, Generator, RunOptions, Split, TaskKind, TaskParams, TrainData, WindowConfig};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::model::{convert_teacher, Model, Runtime};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "allmem", version, about = "Windowed attention with a test-time-trained memory: checks, costs and toy distillation")]
pub struct Cli {
    /// TOML file of top-level keys; see `RunConfig` for the schema.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory all artifacts are written to.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare the manual memory gradients with finite differences and the tape.
    Gradcheck,
    /// Emit the analytic cost grid and the full-versus-ours ratio check.
    Cost,
    /// Train the full-attention teacher on synthetic recall.
    TrainTeacher,
    /// Convert the teacher and train its memory branch.
    Distill {
        /// Overrides the `steps` key.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Near and far recall of a checkpoint under any window configuration.
    Eval {
        #[arg(long)]
        sinks: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        chunk: Option<usize>,
        /// Attend to everything instead of the window and sinks.
        #[arg(long)]
        full: bool,
        /// Evaluate the teacher checkpoint instead of the student.
        #[arg(long)]
        teacher: bool,
    },
    /// Time token-by-token decoding for full attention, the window alone and the fused mixer.
    Bench,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gradcheck => "gradcheck",
            Command::Cost => "cost",
            Command::TrainTeacher => "train-teacher",
            Command::Distill { .. } => "distill",
            Command::Eval { .. } => "eval",
            Command::Bench => "bench",
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stdout and errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) => EXIT_USAGE,
        _ => EXIT_FAILED,
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    seed: u64,
    version: &'a str,
    config: &'a RunConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Runs the parsed command; `Ok(false)` means a check ran and failed.
pub fn execute(cli: &Cli) -> Result<bool> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Command::Distill { steps: Some(s) } = cli.command {
        cfg.steps = s;
    }
    fs::create_dir_all(&cli.out)?;
    let name = cli.command.name();
    write_json(
        &cli.out.join(format!("{name}.run.json")),
        &RunRecord { command: name, seed: cli.seed, version: env!("CARGO_PKG_VERSION"), config: &cfg },
    )?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Gradcheck => cmd_gradcheck(&cfg, cli.seed, out),
        Command::Cost => cmd_cost(&cfg, out),
        Command::TrainTeacher => cmd_train_teacher(&cfg, cli.seed, out),
        Command::Distill { .. } => cmd_distill(&cfg, cli.seed, out),
        Command::Eval { sinks, window, chunk, full, teacher } => {
            let base = cfg.eval_config();
            let wc = WindowConfig {
                sinks: sinks.unwrap_or(base.sinks),
                window: window.unwrap_or(base.window),
                chunk: chunk.unwrap_or(base.chunk),
            };
            let stem = if *teacher { teacher_stem(&cfg, out) } else { student_stem(&cfg, out) };
            cmd_eval(&cfg, cli.seed, out, &stem, wc, *full)
        }
        Command::Bench => cmd_bench(&cfg, cli.seed, out),
    }
}

fn teacher_stem(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.teacher.clone().unwrap_or_else(|| out.join("teacher"))
}

fn student_stem(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| out.join("student"))
}

fn load_checkpoint(stem: &Path) -> Result<Model> {
    if !stem.with_extension("json").exists() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", stem.display())));
    }
    checkpoint::load(stem)
}

/// Tasks the student is distilled on for the configured kind.
fn distill_tasks(kind: TaskKind) -> Vec<TaskParams> {
    match kind {
        TaskKind::AssociativeRecall => TaskParams::recall_mix(),
        TaskKind::NeedleCopy => [Split::Near, Split::Far].map(|s| TaskParams::desk(kind, s)).to_vec(),
    }
}

/// Held-out sets come from a seed stream disjoint from training.
fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_e7a1
}

fn cmd_gradcheck(cfg: &RunConfig, seed: u64, out: &Path) -> Result<bool> {
    let report = gradcheck::run(&cfg.gradcheck_config(), seed)?;
    write_json(&out.join("gradcheck.json"), &report)?;
    println!(
        "gradcheck: {} entries, max fd rel err {:.3e} (tol {:.0e}), max tape rel err {:.3e} (tol {:.0e}): {}",
        report.entries.len(),
        report.max_fd_rel_err,
        report.fd_tolerance,
        report.max_tape_rel_err,
        report.tape_tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    Ok(report.passed)
}

fn cmd_cost(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let cc = cfg.cost_config();
    let mut csv = create(&out.join("cost.csv"))?;
    cost::emit_cost_csv(&mut csv, &cfg.cost_lengths, &cc)?;
    csv.flush()?;
    let band = cost::band_check(cfg.ratio_length, &cc);
    write_json(&out.join("cost_ratio.json"), &band)?;
    for r in &band.ratios {
        println!(
            "L={} {:?}: full/ours combined {:.3} (flops {:.3}, cache {:.3}), band {:?}",
            r.l, r.convention, r.combined, r.flops, r.cache, band.band
        );
    }
    // the band only describes the reference dimensions
    let enforced = cfg.cost_preset == CostPreset::Reference;
    println!("band check: {}{}", if band.passed { "PASS" } else { "FAIL" }, if enforced { "" } else { " (not enforced)" });
    Ok(band.passed || !enforced)
}

#[derive(Serialize)]
struct RecallReport {
    checkpoint: String,
    runtime: Runtime,
    task: TaskKind,
    tasks_per_split: usize,
    /// Absent when the window is too small to hold a near block.
    near: Option<f64>,
    far: f64,
    /// Same checkpoint with the memory branch off; absent for teachers.
    without_memory: Option<(Option<f64>, f64)>,
}

fn recall_pair(model: &Model, sets: &EvalSets, rt: &Runtime) -> Result<(f64, f64)> {
    Ok((distill::recall(model, &sets.near, rt)?, distill::recall(model, &sets.far, rt)?))
}

fn recall_optional(model: &Model, sets: &EvalSets, rt: &Runtime) -> Result<(Option<f64>, f64)> {
    let near = if sets.near.is_empty() { None } else { Some(distill::recall(model, &sets.near, rt)?) };
    Ok((near, distill::recall(model, &sets.far, rt)?))
}

fn fmt_recall(x: Option<f64>) -> String {
    x.map_or("n/a".into(), |v| format!("{v:.3}"))
}

fn cmd_train_teacher(cfg: &RunConfig, seed: u64, out: &Path) -> Result<bool> {
    let mut metrics = create(&out.join("teacher_metrics.csv"))?;
    let teacher = distill::train_teacher(cfg.model_config(), &TaskParams::teacher_mix(), &cfg.teacher_spec(), seed, &mut metrics)?;
    metrics.flush()?;
    let stem = teacher_stem(cfg, out);
    checkpoint::save(&teacher, &stem)?;
    let sets = EvalSets::generate(cfg.task, cfg.eval_config(), cfg.eval_tasks, eval_seed(seed))?;
    let (near, far) = recall_pair(&teacher, &sets, &Runtime::full(cfg.eval_chunk))?;
    println!("teacher saved to {}: near recall {near:.3}, far recall {far:.3}", stem.display());
    Ok(true)
}

fn cmd_distill(cfg: &RunConfig, seed: u64, out: &Path) -> Result<bool> {
    let teacher = load_checkpoint(&teacher_stem(cfg, out))?;
    let mut student = convert_teacher(&teacher, cfg.branch, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let spec = cfg.distill_spec();
    let tasks = distill_tasks(cfg.task);
    let data = if cfg.offline_on_policy {
        let prompts = (0..cfg.pool_size)
            .map(|i| {
                let p = tasks[i % tasks.len()].fitted(&spec.eval);
                distill::gen_task(&p, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64)))
            })
            .collect::<Result<Vec<_>>>()?;
        TrainData::Fixed(Generator::new().on_policy(&student, &prompts, spec.eval.runtime())?)
    } else {
        TrainData::Synthetic(tasks)
    };
    let sets = EvalSets::generate(cfg.task, spec.eval, cfg.eval_tasks, eval_seed(seed))?;
    let mut metrics = create(&out.join("distill_metrics.csv"))?;
    let run = RunOptions { steps: cfg.steps, seed, dump: Some(out.to_path_buf()) };
    let state = distill::train(&mut student, &teacher, &data, &sets, &spec, &run, &mut metrics)?;
    metrics.flush()?;
    let stem = student_stem(cfg, out);
    checkpoint::save(&student, &stem)?;
    let (near, far) = recall_pair(&student, &sets, &spec.eval.runtime())?;
    println!(
        "student saved to {} after {} steps ({} trained tensors): near recall {near:.3}, far recall {far:.3}",
        stem.display(),
        state.step,
        state.trained.len()
    );
    Ok(true)
}

fn cmd_eval(cfg: &RunConfig, seed: u64, out: &Path, stem: &Path, wc: WindowConfig, full: bool) -> Result<bool> {
    let model = load_checkpoint(stem)?;
    let rt = if full { Runtime::full(wc.chunk) } else { wc.runtime() };
    let sets = match EvalSets::generate(cfg.task, wc, cfg.eval_tasks, eval_seed(seed)) {
        Err(Error::Generation(_)) => {
            let far = TaskParams { window: wc.window, sinks: wc.sinks, chunk: wc.chunk, ..TaskParams::desk(cfg.task, Split::Far) };
            EvalSets { far: distill::gen_batch(&far, eval_seed(seed), cfg.eval_tasks)?, near: Vec::new() }
        }
        other => other?,
    };
    let (near, far) = recall_optional(&model, &sets, &rt)?;
    let without_memory = match model.config.branch {
        BranchKind::None => None,
        _ => Some(recall_optional(&model.without_memory(), &sets, &rt)?),
    };
    let report = RecallReport {
        checkpoint: stem.display().to_string(),
        runtime: rt,
        task: cfg.task,
        tasks_per_split: cfg.eval_tasks,
        near,
        far,
        without_memory,
    };
    write_json(&out.join("eval.json"), &report)?;
    println!("{}: near recall {}, far recall {far:.3}", stem.display(), fmt_recall(near));
    if let Some((n, f)) = without_memory {
        println!("without memory: near recall {}, far recall {f:.3}", fmt_recall(n));
    }
    Ok(true)
}

fn cmd_bench(cfg: &RunConfig, seed: u64, out: &Path) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = Model::init_teacher(cfg.model_config(), &mut rng)?;
    let fused = convert_teacher(&teacher, cfg.branch, &mut rng)?;
    let wc = cfg.eval_config();
    let mixers = [
        ("full", &teacher, Runtime::full(wc.chunk)),
        ("window", &teacher, wc.runtime()),
        ("fused", &fused, wc.runtime()),
    ];
    let mut csv = create(&out.join("bench.csv"))?;
    writeln!(csv, "mixer,L,us_per_token,cache_entries,memory_state_bytes")?;
    for &l in &cfg.bench_lengths {
        for (name, model, rt) in &mixers {
            let mut times = Vec::with_capacity(cfg.bench_repeats);
            let (mut cache, mut mem) = (0, 0);
            for _ in 0..cfg.bench_repeats {
                let mut s = model.stream(*rt, l)?;
                let start = Instant::now();
                for i in 0..l {
                    s.step(i % cfg.vocab)?;
                }
                times.push(start.elapsed().as_secs_f64() * 1e6 / l as f64);
                cache = s.cache_lens().iter().sum::<usize>();
                mem = s.memory_bytes().iter().map(Vec::len).sum::<usize>();
            }
            times.sort_by(f64::total_cmp);
            let median = times[times.len() / 2];
            writeln!(csv, "{name},{l},{median:.3},{cache},{mem}")?;
            println!("{name:>6} L={l:<6} {median:>10.1} us/token  cache {cache:>6}  memory {mem} B");
        }
    }
    csv.flush()?;
    Ok(true)
}
