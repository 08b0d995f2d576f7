use allmem::autodiff::{LossTargets, Ops, Tape};
use allmem::branch::BranchKind;
use allmem::checkpoint::{frozen_digest, trainable_digest};
use allmem::distill::*;
use allmem::model::{convert_teacher, forward_ops, is_trainable, Model, ModelConfig, Runtime};
use allmem::tensor::Tensor;
use allmem::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_config() -> ModelConfig {
    ModelConfig { d_model: 32, n_layers: 1, n_heads: 2, n_kv_heads: 1, ffn_hidden: 64, mem_hidden: 16, ..ModelConfig::default() }
}

fn pair(config: ModelConfig, seed: u64) -> (Model, Model) {
    let teacher = Model::init_teacher(config, &mut rng(seed)).unwrap();
    let student = convert_teacher(&teacher, BranchKind::AllMem, &mut rng(seed + 1)).unwrap();
    (teacher, student)
}

fn quick_spec() -> DistillSpec {
    DistillSpec { batch: 2, eval_every: 5, warmup: 2, ..Default::default() }
}

fn run(student: &mut Model, teacher: &Model, steps: usize, seed: u64) -> (TrainState, String) {
    let eval = EvalSets::generate(TaskKind::AssociativeRecall, WindowConfig::EVAL, 4, 5).unwrap();
    let mut csv = Vec::new();
    let data = TrainData::Synthetic(TaskParams::recall_mix());
    let state = train(student, teacher, &data, &eval, &quick_spec(), &RunOptions { steps, seed, dump: None }, &mut csv).unwrap();
    (state, String::from_utf8(csv).unwrap())
}

// ---- generator ----

#[test]
fn batches_are_reproducible() {
    for kind in [TaskKind::AssociativeRecall, TaskKind::NeedleCopy] {
        let p = TaskParams::desk(kind, Split::Far);
        assert_eq!(gen_batch(&p, 3, 8).unwrap(), gen_batch(&p, 3, 8).unwrap());
        assert_ne!(gen_batch(&p, 3, 8).unwrap(), gen_batch(&p, 4, 8).unwrap());
    }
}

#[test]
fn loss_mask_marks_answers_only() {
    for kind in [TaskKind::AssociativeRecall, TaskKind::NeedleCopy] {
        for t in gen_batch(&TaskParams::desk(kind, Split::Near), 0, 16).unwrap() {
            let marked: Vec<usize> = (0..t.seq_len()).filter(|&i| t.mask[i] == 1.0).collect();
            assert_eq!(marked, t.query_positions);
            assert!(t.mask.iter().all(|&m| m == 0.0 || m == 1.0));
            let targets = t.targets();
            for &q in &t.query_positions {
                assert_eq!(targets.labels[q], t.tokens[q + 1]);
            }
        }
    }
}

/// Positions a windowed model can see from `q`: the sinks plus the last
/// `window` tokens.
fn visible(q: usize, window: usize, sinks: usize) -> impl Iterator<Item = usize> {
    (0..sinks.min(q + 1)).chain((q + 1).saturating_sub(window)..=q)
}

fn check_far(t: &SyntheticTask, cfg: &WindowConfig) {
    let l = t.seq_len();
    for &q in &t.query_positions {
        let answer = t.tokens[q + 1];
        for p in visible(q, cfg.window, cfg.sinks) {
            assert_ne!(t.tokens[p], answer, "answer visible at {p} from query {q}");
        }
        // the only other occurrence is the stored one, before the last W+s
        let stored: Vec<usize> = (0..l).filter(|&p| t.tokens[p] == answer && p != q + 1).collect();
        assert_eq!(stored.len(), 1);
        assert!(stored[0] + cfg.window + cfg.sinks < l, "stored at {} with L={l}", stored[0]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn far_answers_lie_outside_the_window(
        s in 0usize..=4, w in 8usize..=64, c in 4usize..=32, seed in 0u64..1000, needle in any::<bool>(),
    ) {
        let cfg = WindowConfig { sinks: s, window: w, chunk: c };
        let kind = if needle { TaskKind::NeedleCopy } else { TaskKind::AssociativeRecall };
        let p = TaskParams::desk(kind, Split::Far).fitted(&cfg);
        for t in gen_batch(&p, seed, 4).unwrap() {
            check_far(&t, &cfg);
        }
    }

    #[test]
    fn near_block_lies_inside_the_first_window(w in 8usize..=64, seed in 0u64..1000, needle in any::<bool>()) {
        let cfg = WindowConfig { sinks: 0, window: w, chunk: 8 };
        let kind = if needle { TaskKind::NeedleCopy } else { TaskKind::AssociativeRecall };
        let p = TaskParams::desk(kind, Split::Near).fitted(&cfg);
        for t in gen_batch(&p, seed, 4).unwrap() {
            let q0 = t.query_positions[0];
            for &q in &t.query_positions {
                let stored = (0..q0).find(|&i| t.tokens[i] == t.tokens[q + 1]).unwrap();
                prop_assert!(stored + p.window > q0);
            }
        }
    }
}

#[test]
fn far_tasks_span_several_chunks() {
    for c in [4, 8, 16, 32] {
        let cfg = WindowConfig { sinks: 2, window: 16, chunk: c };
        let t = &gen_batch(&TaskParams::desk(TaskKind::AssociativeRecall, Split::Far).fitted(&cfg), 0, 1).unwrap()[0];
        assert!(t.query_positions[0] >= 4 * c, "c={c}: first query at {}", t.query_positions[0]);
    }
}

#[test]
fn infeasible_placement_is_a_generation_error() {
    let p = TaskParams { seq_len: 24, ..TaskParams::desk(TaskKind::AssociativeRecall, Split::Far) };
    assert!(matches!(gen_task(&p, &mut rng(0)), Err(Error::Generation(_))));
    let p = TaskParams { vocab: 30, ..TaskParams::desk(TaskKind::AssociativeRecall, Split::Near) };
    assert!(matches!(gen_task(&p, &mut rng(0)), Err(Error::Generation(_))));
    let p = TaskParams { n_queries: 7, ..TaskParams::desk(TaskKind::AssociativeRecall, Split::Near) };
    assert!(matches!(gen_task(&p, &mut rng(0)), Err(Error::Generation(_))));
}

#[test]
fn jsonl_dump_has_one_task_per_line() {
    let tasks = gen_batch(&TaskParams::desk(TaskKind::NeedleCopy, Split::Near), 1, 3).unwrap();
    let mut out = Vec::new();
    write_jsonl(&mut out, &tasks).unwrap();
    let text = String::from_utf8(out).unwrap();
    let back: Vec<SyntheticTask> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, tasks);
}

// ---- loss ----

fn row_targets(rows: usize, mask: Vec<f64>) -> LossTargets {
    LossTargets { labels: vec![0; rows], mask }
}

#[test]
fn two_class_hand_instance() {
    let teacher = Tensor::new(vec![1, 2], vec![0.75f64.ln(), 0.25f64.ln()]).unwrap();
    let student = Tensor::zeros(&[1, 2]);
    let kl = distill_loss(&student, &teacher, &row_targets(1, vec![1.0]), &DistillSpec::default()).unwrap();
    let expected = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
    assert!((kl - expected).abs() < 1e-15);
    assert!((kl - 0.13081).abs() < 5e-6);
}

#[test]
fn temperature_scales_both_distributions() {
    let teacher = Tensor::new(vec![1, 3], vec![1.0, -0.5, 2.0]).unwrap();
    let student = Tensor::new(vec![1, 3], vec![0.3, 0.1, -0.2]).unwrap();
    let t = 2.5;
    let soft = |row: &[f64]| {
        let z: f64 = row.iter().map(|x| (x / t).exp()).sum();
        row.iter().map(|x| (x / t).exp() / z).collect::<Vec<_>>()
    };
    let (p, q) = (soft(teacher.data()), soft(student.data()));
    let expected: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    let spec = DistillSpec { temperature: t, ..Default::default() };
    let got = distill_loss(&student, &teacher, &row_targets(1, vec![1.0]), &spec).unwrap();
    assert!((got - expected).abs() < 1e-14);
}

#[test]
fn identical_logits_have_zero_divergence() {
    let x = Tensor::randn(&[5, 9], 2.0, &mut rng(1));
    let kl = distill_loss(&x, &x, &row_targets(5, vec![1.0, 0.0, 1.0, 1.0, 0.0]), &DistillSpec::default()).unwrap();
    assert!(kl.abs() < 1e-15);
}

#[test]
fn labels_are_ignored_without_cross_entropy() {
    let (s, t) = (Tensor::randn(&[4, 6], 1.0, &mut rng(2)), Tensor::randn(&[4, 6], 1.0, &mut rng(3)));
    let mask = vec![1.0, 1.0, 0.0, 1.0];
    let a = LossTargets { labels: vec![0, 1, 2, 3], mask: mask.clone() };
    let b = LossTargets { labels: vec![5, 5, 4, 0], mask };
    let spec = DistillSpec::default();
    assert_eq!(distill_loss(&s, &t, &a, &spec).unwrap(), distill_loss(&s, &t, &b, &spec).unwrap());
    let with_ce = DistillSpec { ce_weight: 1.0, ..Default::default() };
    assert_ne!(distill_loss(&s, &t, &a, &with_ce).unwrap(), distill_loss(&s, &t, &b, &with_ce).unwrap());
}

#[test]
fn masked_positions_do_not_contribute() {
    let (s, mut t) = (Tensor::randn(&[3, 4], 1.0, &mut rng(4)), Tensor::randn(&[3, 4], 1.0, &mut rng(5)));
    let targets = row_targets(3, vec![1.0, 0.0, 1.0]);
    let before = distill_loss(&s, &t, &targets, &DistillSpec::default()).unwrap();
    t.data_mut()[4..8].copy_from_slice(&[9.0, -9.0, 3.0, 0.0]);
    assert_eq!(before, distill_loss(&s, &t, &targets, &DistillSpec::default()).unwrap());
}

#[test]
fn empty_mask_is_an_error() {
    let x = Tensor::zeros(&[2, 3]);
    let err = distill_loss(&x, &x, &row_targets(2, vec![0.0, 0.0]), &DistillSpec::default());
    assert!(matches!(err, Err(Error::EmptyLoss)));
}

// ---- configuration sampling ----

fn chi_square_p(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn sampler_is_uniform_over_each_range() {
    let ranges = ConfigRanges::DESK;
    let mut r = rng(11);
    let draws: Vec<WindowConfig> = (0..10_000).map(|_| randomized_config_sample(&ranges, &mut r)).collect();
    type Field = (fn(&WindowConfig) -> usize, (usize, usize));
    let fields: [Field; 3] =
        [(|c| c.sinks, ranges.sinks), (|c| c.window, ranges.window), (|c| c.chunk, ranges.chunk)];
    for (get, (lo, hi)) in fields {
        let mut counts = vec![0usize; hi - lo + 1];
        for d in &draws {
            counts[get(d) - lo] += 1;
        }
        assert!(counts[0] > 0 && counts[hi - lo] > 0, "endpoints of [{lo}, {hi}] not hit");
        let p = chi_square_p(&counts);
        assert!(p > 0.01, "[{lo}, {hi}]: p = {p}");
    }
    // sinks and chunk are drawn independently
    let mut joint = vec![0usize; 5 * 29];
    for d in &draws {
        joint[d.sinks * 29 + d.chunk - 4] += 1;
    }
    assert!(chi_square_p(&joint) > 0.01);
}

#[test]
fn sampler_schedule_is_reproducible() {
    let a: Vec<_> = (0..50).scan(rng(9), |r, _| Some(randomized_config_sample(&ConfigRanges::DESK, r))).collect();
    let b: Vec<_> = (0..50).scan(rng(9), |r, _| Some(randomized_config_sample(&ConfigRanges::DESK, r))).collect();
    assert_eq!(a, b);
}

#[test]
fn full_scale_draws_stay_in_range() {
    let mut r = rng(12);
    for _ in 0..2000 {
        let c = randomized_config_sample(&ConfigRanges::FULL_SCALE, &mut r);
        assert!(c.sinks <= 256);
        assert!((512..=8192).contains(&c.window));
        assert!((512..=4096).contains(&c.chunk));
    }
}

#[test]
fn reversed_ranges_are_rejected() {
    let bad = ConfigRanges { window: (64, 8), ..ConfigRanges::DESK };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

// ---- training ----

#[test]
fn trainable_count_matches_the_meta_parameter_list() {
    let teacher = Model::init_teacher(ModelConfig::default(), &mut rng(0)).unwrap();
    let student = convert_teacher(&teacher, BranchKind::AllMem, &mut rng(1)).unwrap();
    // d=64, memory width 2·16=32, 2 KV heads, conv 4, per layer:
    //   Q/K/V 3·64·32 + conv 3·4·32 + norms 2·16 + rate/decay 2·(64·2+2)
    //   + gate 64·32+32 + out 32·64 + α 64
    let per_layer = 3 * 64 * 32 + 3 * 4 * 32 + 2 * 16 + 2 * (64 * 2 + 2) + (64 * 32 + 32) + 32 * 64 + 64;
    assert_eq!(per_layer, 11_012);
    assert_eq!(student.trainable_count(), 2 * per_layer);
    let mut names: Vec<&str> = student
        .params
        .names()
        .iter()
        .filter(|n| n.starts_with("l0.") && is_trainable(n))
        .map(|n| &n[3..])
        .collect();
    names.sort_unstable();
    let documented = [
        "mem.alpha", "mem.conv_k", "mem.conv_q", "mem.conv_v", "mem.gate_b", "mem.gate_w", "mem.k_norm", "mem.lr_b",
        "mem.lr_w", "mem.mu_b", "mem.mu_w", "mem.q_norm", "mem.wk", "mem.wo", "mem.wq", "mem.wv",
    ];
    assert_eq!(names, documented);
}

#[test]
fn zero_steps_leave_the_student_unchanged() {
    let (teacher, mut student) = pair(small_config(), 0);
    let before = student.clone();
    let (state, csv) = run(&mut student, &teacher, 0, 0);
    assert_eq!(student, before);
    assert_eq!(csv.trim(), METRICS_HEADER);
    assert_eq!(state.step, 0);
}

#[test]
fn frozen_parameters_survive_training_bit_for_bit() {
    let (teacher, mut student) = pair(small_config(), 1);
    let (frozen, trainable) = (frozen_digest(&student.params), trainable_digest(&student.params));
    let (state, _) = run(&mut student, &teacher, 100, 3);
    assert_eq!(frozen_digest(&student.params), frozen);
    assert_eq!(state.frozen_digest, frozen);
    assert_ne!(trainable_digest(&student.params), trainable);
    assert!(state.trained.iter().all(|n| is_trainable(n)));
    assert!(state.frozen.iter().all(|n| !is_trainable(n)));
    assert_eq!(state.trained.len() + state.frozen.len(), student.params.len());
    assert_eq!(state.velocity.len(), state.trained.len());
}

#[test]
fn fixed_seed_reproduces_metrics_and_weights() {
    let (teacher, student) = pair(small_config(), 2);
    let (mut a, mut b, mut c) = (student.clone(), student.clone(), student);
    let (_, csv_a) = run(&mut a, &teacher, 12, 7);
    let (_, csv_b) = run(&mut b, &teacher, 12, 7);
    let (_, csv_c) = run(&mut c, &teacher, 12, 8);
    assert_eq!(csv_a, csv_b);
    assert_eq!(a, b);
    assert_ne!(csv_a, csv_c);
    assert_eq!(csv_a.lines().count(), 13);
    assert!(csv_a.lines().nth(1).unwrap().split(',').all(|f| !f.is_empty()));
}

#[test]
fn metrics_rows_follow_the_header() {
    let (teacher, mut student) = pair(small_config(), 3);
    let (_, csv) = run(&mut student, &teacher, 6, 0);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss_kl,loss_ce,far_recall,near_recall"));
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 5);
        assert_eq!(f[0].parse::<usize>().unwrap(), i);
        assert!(f[1].parse::<f64>().unwrap() >= 0.0);
        // recall only on eval steps and the last one
        assert_eq!(!f[3].is_empty(), i % 5 == 0 || i == 5, "{line}");
    }
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let (teacher, mut student) = pair(small_config(), 4);
    student.params.get_mut("l0.mem.alpha").unwrap().data_mut()[0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions { steps: 5, seed: 0, dump: Some(dir.path().to_path_buf()) };
    let data = TrainData::Synthetic(TaskParams::recall_mix());
    let err = train(&mut student, &teacher, &data, &EvalSets::default(), &quick_spec(), &opts, &mut Vec::new());
    assert!(matches!(err, Err(Error::Diverged { step: 0 })), "{err:?}");
    assert!(dir.path().join("diverged_step0.json").exists());
    assert!(dir.path().join("diverged_step0.bin").exists());
}

#[test]
fn offline_on_policy_training_never_generates() {
    let (teacher, mut student) = pair(small_config(), 5);
    let prompts = gen_batch(&TaskParams::desk(TaskKind::AssociativeRecall, Split::Far), 0, 4).unwrap();
    let mut generator = Generator::new();
    let pool = generator.on_policy(&student, &prompts, WindowConfig::EVAL.runtime()).unwrap();
    let answers: usize = prompts.iter().map(|t| t.query_positions.len()).sum();
    assert_eq!(generator.calls(), answers);
    for (p, g) in prompts.iter().zip(&pool) {
        assert_eq!(p.mask, g.mask);
        // everything but the answers is the prompt
        let differs = (0..p.seq_len()).filter(|&i| p.tokens[i] != g.tokens[i]).all(|i| i >= 1 && p.mask[i - 1] == 1.0);
        assert!(differs);
    }
    let calls = generator.calls();
    let opts = RunOptions { steps: 4, seed: 0, dump: None };
    train(&mut student, &teacher, &TrainData::Fixed(pool), &EvalSets::default(), &quick_spec(), &opts, &mut Vec::new()).unwrap();
    assert_eq!(generator.calls(), calls);
}

#[test]
fn on_policy_outputs_are_the_greedy_continuation() {
    let (_, student) = pair(small_config(), 6);
    let prompt = gen_batch(&TaskParams::desk(TaskKind::NeedleCopy, Split::Near), 2, 1).unwrap();
    let out = Generator::new().on_policy(&student, &prompt, Runtime::full(8)).unwrap();
    let logits = student.logits(&out[0].tokens, &Runtime::full(8)).unwrap();
    for &q in &out[0].query_positions {
        let row = logits.row(q);
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        assert_eq!(out[0].tokens[q + 1], best);
    }
}

/// KL of the student against fixed teacher logits, plus tape gradients of
/// the named parameters.
fn kl_and_grads(student: &Model, tokens: &[usize], teacher: &Tensor, targets: &LossTargets, names: &[&str]) -> (f64, Vec<Tensor>) {
    let rt = Runtime::sliding(6, 1, 4);
    let spec = DistillSpec::default();
    let mut tape = Tape::new();
    let vars = student.params.map(|_, t| tape.input(t.clone()));
    let logits = forward_ops(&mut tape, &student.config, &vars, tokens, &rt).unwrap();
    let kl = distill_loss(tape.value(&logits), teacher, targets, &spec).unwrap();
    let loss = tape.distill_loss(&logits, teacher, targets, spec.weights()).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = names.iter().map(|n| grads.get_or_zeros(*vars.get(n).unwrap(), student.params.get(n).unwrap())).collect();
    (kl, g)
}

#[test]
fn outer_gradients_match_finite_differences() {
    let (teacher, mut student) = pair(small_config(), 7);
    let mut r = rng(70);
    // live memory path: nonzero gate, rates and decays
    for n in ["l0.mem.alpha", "l0.mem.lr_w", "l0.mem.mu_w", "l0.mem.gate_w"] {
        let shape = student.params.get(n).unwrap().shape().to_vec();
        *student.params.get_mut(n).unwrap() = Tensor::randn(&shape, 0.5, &mut r);
    }
    let tokens: Vec<usize> = (0..16).map(|i| (i * 7 + 3) % 64).collect();
    let t_logits = teacher.logits(&tokens, &Runtime::full(4)).unwrap();
    let targets = LossTargets { labels: vec![0; 16], mask: (0..16).map(|i| if i >= 8 { 1.0 } else { 0.0 }).collect() };
    let names = ["l0.mem.alpha", "l0.mem.lr_w"];
    let (_, grads) = kl_and_grads(&student, &tokens, &t_logits, &targets, &names);
    let h = 1e-4;
    for (name, g) in names.iter().zip(&grads) {
        let scale = g.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(scale > 1e-8, "{name}: no gradient");
        for idx in (0..g.len()).step_by(5) {
            let probe = |delta: f64| {
                let mut s = student.clone();
                s.params.get_mut(name).unwrap().data_mut()[idx] += delta;
                kl_and_grads(&s, &tokens, &t_logits, &targets, &[]).0
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            let err = (fd - g.data()[idx]).abs() / fd.abs().max(g.data()[idx].abs()).max(1e-3 * scale);
            assert!(err < 1e-3, "{name}[{idx}]: tape {} vs fd {fd}", g.data()[idx]);
        }
    }
}

#[test]
fn constant_frozen_leaves_give_the_same_trained_gradients() {
    let (teacher, mut student) = pair(small_config(), 8);
    *student.params.get_mut("l0.mem.alpha").unwrap() = Tensor::full(&[32], 0.3);
    let tokens: Vec<usize> = (0..12).map(|i| (i * 5 + 1) % 64).collect();
    let t_logits = teacher.logits(&tokens, &Runtime::full(4)).unwrap();
    let targets = LossTargets { labels: vec![0; 12], mask: vec![1.0; 12] };
    let rt = Runtime::sliding(4, 1, 4);
    let grads = |frozen_constant: bool| {
        let mut tape = Tape::new();
        let vars = student.params.map(|n, t| {
            if frozen_constant && !is_trainable(n) {
                tape.constant(t.clone())
            } else {
                tape.input(t.clone())
            }
        });
        let logits = forward_ops(&mut tape, &student.config, &vars, &tokens, &rt).unwrap();
        let loss = tape.distill_loss(&logits, &t_logits, &targets, DistillSpec::default().weights()).unwrap();
        let g = tape.backward(loss).unwrap();
        student
            .params
            .names()
            .iter()
            .filter(|n| is_trainable(n))
            .map(|n| g.get_or_zeros(*vars.get(n).unwrap(), student.params.get(n).unwrap()))
            .collect::<Vec<_>>()
    };
    assert_eq!(grads(true), grads(false));
}
