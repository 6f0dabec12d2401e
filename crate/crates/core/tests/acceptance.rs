//! End-to-end acceptance checks, one verdict line per criterion.
//!
//! Runs without the libtest harness so every line prints even when a check
//! passes. `ACCEPTANCE_ONLY=A1,A4` restricts the run to a subset.

mod common;

use std::time::Instant;

use common::*;
use prunekit::cli::{Preset, RunConfig};
use prunekit::distill::{distill_loss, hard_label_loss, train_teacher, DistillConfig, LossVariant, TeacherConfig};
use prunekit::importance::{accumulate_element_importance, ImportanceReport};
use prunekit::pruner::{LogRecord, PipelineOutcome, PruneData, PrunePlan, Pruner, RunLog, StageConfig, StageKind};
use prunekit::taskgen::{accuracy, decode_throughput, mean_answer_loss, DataConfig, Datasets, Sample, TaskSuite, TrainBatch};
use prunekit::tensor_core::kl_divergence;
use prunekit::{Graph, ModelConfig, ModelState, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and thresholds.
const FD_STEP: f64 = 1e-3;
const A1_SECONDS: f64 = 60.0;
const A2_EPS: f64 = 1e-3;
const A2_REL: f64 = 0.05;
const A2_ABS: f64 = 1e-6;
const A2_PARAMS: usize = 20;
const A3_SEEDS: u64 = 10;
const A3_NEEDED: usize = 9;
const A3_FRACTION: f64 = 0.10;
const A3_SECONDS: f64 = 300.0;
const A5_TEACHER_ACCURACY: f64 = 0.95;
const A5_REDUCTION: f64 = 4.0;
const A5_ACCURACY_DROP: f64 = 0.05;
const A5_SPEEDUP: f64 = 2.0;
const A5_SECONDS: f64 = 45.0 * 60.0;
const A6_SEEDS: u64 = 3;
const A6_NEEDED: usize = 2;
const A7_NEEDED: usize = 2;
const KL_ZERO: f64 = 1e-9;
const DEAD_TOLERANCE: f64 = 1e-6;
const MASKED_NORM_TOLERANCE: f64 = 1e-4;
const THROUGHPUT_SAMPLES: usize = 200;

struct Verdict {
    id: &'static str,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Shared {
    /// Every pruning log produced during the run, for the structural check.
    logs: Vec<(String, RunLog)>,
    /// Pipeline stage models whose shape audit failed.
    audit_failures: Vec<String>,
    a5_seconds: Option<f64>,
    /// Teacher training plus the gradual and one-shot runs of the small suite.
    a6_seconds: f64,
    small: Vec<SmallSeed>,
}

struct SmallSeed {
    seed: u64,
    teacher_accuracy: f64,
    gradual: Option<f64>,
    oneshot: Option<f64>,
    arms: Vec<(LossVariant, Option<f64>)>,
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_uppercase()).collect());
    let wanted = |id: &str| only.as_ref().map_or(true, |o| o.iter().any(|x| x == id));
    let mut shared = Shared::default();
    let mut verdicts = Vec::new();
    let mut run = |id: &'static str, f: &mut dyn FnMut(&mut Shared) -> (bool, String), shared: &mut Shared| {
        if !wanted(id) {
            return;
        }
        let started = Instant::now();
        let (pass, detail) = f(shared);
        let v = Verdict { id, pass, detail };
        println!(
            "{} {} ({:.1}s) {}",
            v.id,
            if v.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            v.detail
        );
        verdicts.push(v);
    };
    run("A1", &mut |_| a1(), &mut shared);
    run("A2", &mut |_| a2(), &mut shared);
    run("A3", &mut |_| a3(), &mut shared);
    run("A8", &mut |_| a8(), &mut shared);
    run("A9", &mut |_| a9(), &mut shared);
    run("A10", &mut |_| a10(), &mut shared);
    if wanted("A4") {
        small_pipeline_logs(&mut shared);
    }
    run("A5", &mut a5, &mut shared);
    if wanted("A6") || wanted("A7") {
        small_suite(&mut shared);
    }
    run("A6", &mut a6, &mut shared);
    run("A7", &mut a7, &mut shared);
    run("A4", &mut a4, &mut shared);

    println!("\nacceptance summary");
    verdicts.sort_by_key(|v| v.id[1..].parse::<u32>().unwrap_or(0));
    for v in &verdicts {
        println!("  {:<4} {}", v.id, if v.pass { "PASS" } else { "FAIL" });
    }
    if verdicts.iter().any(|v| !v.pass) {
        std::process::exit(1);
    }
}

fn suite_batch(suite: &TaskSuite, n: u64, seed: u64) -> (Vec<Sample>, TrainBatch) {
    let samples: Vec<Sample> = (0..n).map(|i| suite.sample(seed, i)).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = TrainBatch::build(&refs).unwrap();
    (samples, batch)
}

fn a1() -> (bool, String) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let model = lively_model(ModelConfig::standard(512, 16, 16, 2, 2), &mut rng);
    let suite = TaskSuite::new(3).unwrap();
    let (_, batch) = suite_batch(&suite, 2, 4);
    let targets = batch.targets.clone();
    let r = finite_difference_check(
        &model,
        &batch.tokens,
        &batch.rows,
        FD_STEP,
        |g, logits| g.cross_entropy(logits, &targets),
        |rows| rows.iter().zip(&targets).map(|(r, &t)| ce(r, t)).sum(),
    );
    let secs = started.elapsed().as_secs_f64();
    let pass = r.failures.is_empty() && r.checked == model.actual_param_count() && secs < A1_SECONDS;
    let detail = format!(
        "{} parameters checked, {} mismatches, worst |diff| {:.2e}, {:.1}s{}",
        r.checked,
        r.failures.len(),
        r.worst_abs,
        secs,
        r.failures.first().map(|f| format!(", e.g. {f}")).unwrap_or_default()
    );
    (pass, detail)
}

/// Dataset-mean answer cross-entropy evaluated on the f64 reference.
fn reference_loss(reference: &Reference, batches: &[TrainBatch], n: usize) -> f64 {
    let total: f64 = batches
        .iter()
        .map(|b| {
            reference
                .batch_rows(&b.tokens, &b.rows)
                .iter()
                .zip(&b.targets)
                .map(|(r, &t)| ce(r, t))
                .sum::<f64>()
        })
        .sum();
    total / n as f64
}

fn a2() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let model = lively_model(ModelConfig::standard(512, 16, 16, 2, 2), &mut rng);
    let suite = TaskSuite::new(5).unwrap();
    let data: Vec<Sample> = (0..24).map(|i| suite.sample(6, i)).collect();
    let batch_size = 8;
    let batches: Vec<TrainBatch> = data
        .chunks(batch_size)
        .map(|c| TrainBatch::build(&c.iter().collect::<Vec<_>>()).unwrap())
        .collect();
    let scores = accumulate_element_importance(&model, &data, batch_size).unwrap();
    let mut reference = Reference::new(&model);
    let base = reference_loss(&reference, &batches, data.len());
    // Elements the data never reaches (embedding rows of unseen tokens) have
    // zero score and zero effect; drawing among reached elements keeps the
    // check informative.
    let reached: Vec<(String, usize)> = model
        .params
        .keys()
        .flat_map(|k| {
            let s = scores.get(k).unwrap().data();
            (0..s.len()).filter(move |&i| s[i] > 0.0).map(move |i| (k.clone(), i))
        })
        .collect();
    let mut worst = 0.0f64;
    let mut misses = Vec::new();
    for _ in 0..A2_PARAMS {
        let (name, idx) = reached[rng.gen_range(0..reached.len())].clone();
        let theta = reference.p[&name][idx];
        reference.p.get_mut(&name).unwrap()[idx] = theta * (1.0 - A2_EPS);
        let shifted = reference_loss(&reference, &batches, data.len());
        reference.p.get_mut(&name).unwrap()[idx] = theta;
        let predicted = A2_EPS * scores.get(&name).unwrap().data()[idx] as f64;
        let observed = (shifted - base).abs();
        let err = (observed - predicted).abs();
        worst = worst.max(err / (A2_REL * predicted + A2_ABS));
        if err > A2_REL * predicted + A2_ABS {
            misses.push(format!("{name}[{idx}] observed {observed:.3e} predicted {predicted:.3e}"));
        }
    }
    let detail = format!(
        "{}/{} parameters within tolerance (drawn from {} reached elements), worst error/tolerance {:.3}{}",
        A2_PARAMS - misses.len(),
        A2_PARAMS,
        reached.len(),
        worst,
        misses.first().map(|m| format!(", e.g. {m}")).unwrap_or_default()
    );
    (misses.is_empty(), detail)
}

fn small_teacher_config(seed: u64, epochs: usize) -> TeacherConfig {
    TeacherConfig {
        max_epochs: epochs,
        learning_rate: 3e-3,
        batch_size: 32,
        seed,
        warmup_steps: 100,
        target_accuracy: None,
        ..TeacherConfig::default()
    }
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v
}

fn a3() -> (bool, String) {
    let started = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..A3_SEEDS {
        let suite = TaskSuite::new(300 + seed).unwrap();
        let data = Datasets::generate(
            &suite,
            &DataConfig {
                train: 4_000,
                test: 100,
                rule_seed: 300 + seed,
                data_seed: seed,
                ..DataConfig::default()
            },
        )
        .unwrap();
        let cfg = ModelConfig::standard(512, 16, 32, 2, 2);
        let init = ModelState::init(cfg, seed).unwrap();
        let teacher = train_teacher(&init, &data.distill, &[], &small_teacher_config(seed, 8)).unwrap().model;
        let report = ImportanceReport::compute(&teacher, &data.prune, 64).unwrap();
        let k = (cfg.d_ffn as f64 * A3_FRACTION).round() as usize;
        let (mut low, mut high) = (teacher.clone(), teacher.clone());
        for (b, scores) in report.ffn_inter.iter().enumerate() {
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&x, &y| scores[x].total_cmp(&scores[y]));
            assert_eq!(prunekit::pruner::lowest(scores, k), sorted(&order[..k]));
            kill_ffn_dims(&mut low, b, &order[..k]);
            kill_ffn_dims(&mut high, b, &order[order.len() - k..]);
        }
        let base = mean_answer_loss(&teacher, &data.validation).unwrap();
        let acc = accuracy(&teacher, &data.validation).unwrap().overall;
        let dl = mean_answer_loss(&low, &data.validation).unwrap() - base;
        let dh = mean_answer_loss(&high, &data.validation).unwrap() - base;
        if dl < dh {
            wins += 1;
        }
        rows.push(format!("seed {seed}: acc {acc:.3} bottom {dl:+.4} top {dh:+.4}"));
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = wins >= A3_NEEDED && secs < A3_SECONDS;
    (pass, format!("{wins}/{A3_SEEDS} seeds ranked correctly; {}", rows.join("; ")))
}

fn a8() -> (bool, String) {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let logits = Tensor::randn(&[4, 9], 2.0, &mut rng);
    let kl_same = kl_divergence(&logits, &logits).unwrap().item().unwrap() as f64;
    checks.push(("kl(x,x)=0", kl_same.abs() <= KL_ZERO));
    let other = Tensor::randn(&[4, 9], 2.0, &mut rng);
    checks.push(("kl>=0", kl_divergence(&logits, &other).unwrap().item().unwrap() >= 0.0));

    let argmax: Vec<u32> = logits
        .data()
        .chunks(9)
        .map(|r| r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 as u32)
        .collect();
    let mut g = Graph::new();
    let s = g.param(logits.clone());
    let h = g.pairwise_hinge(s, &argmax).unwrap();
    checks.push(("hinge at argmax = 0", g.value(h).item().unwrap() == 0.0));

    let labels: Vec<u32> = (0..4).map(|_| rng.gen_range(0..9)).collect();
    let gamma0 = prunekit::distill::distill_loss_value(&logits, &other, &labels, 0.0).unwrap();
    let kl_sum = kl_divergence(&logits, &other).unwrap().item().unwrap();
    checks.push(("gamma=0 bitwise KL", gamma0.to_bits() == kl_sum.to_bits()));

    let cfg = ModelConfig::standard(24, 6, 16, 2, 2);
    let model = lively_model(cfg, &mut rng);
    let tokens = probe_batch(24, 3, 5, 9);
    let rows = vec![1, 4, 6, 9, 12, 14];
    let labels: Vec<u32> = rows.iter().map(|_| rng.gen_range(0..24)).collect();
    let teacher: Vec<Vec<f64>> = rows
        .iter()
        .map(|_| (0..24).map(|_| rng.gen_range(-3.0..3.0f32) as f64).collect())
        .collect();
    let tt = Tensor::new(vec![rows.len(), 24], teacher.iter().flatten().map(|&v| v as f32).collect()).unwrap();
    let mut fd = Vec::new();
    for variant in LossVariant::ALL {
        let r = finite_difference_check(
            &model,
            &tokens,
            &rows,
            FD_STEP,
            |g, logits| match variant {
                LossVariant::KlOnly => distill_loss(g, logits, &tt, &labels, 0.0),
                LossVariant::KlPairwise => distill_loss(g, logits, &tt, &labels, 1.0),
                LossVariant::HardLabel => {
                    let k = g.kl_div(logits, &tt)?;
                    let c = hard_label_loss(g, logits, &labels)?;
                    g.add(k, c)
                }
            },
            |out| {
                out.iter()
                    .zip(&teacher)
                    .zip(&labels)
                    .map(|((s, t), &y)| {
                        kl(s, t)
                            + match variant {
                                LossVariant::KlOnly => 0.0,
                                LossVariant::KlPairwise => hinge(s, y),
                                LossVariant::HardLabel => ce(s, y),
                            }
                    })
                    .sum()
            },
        );
        checks.push((variant.name(), r.failures.is_empty()));
        fd.push(format!("{} {}/{} ok", variant, r.checked - r.failures.len(), r.checked));
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = format!(
        "kl(x,x)={kl_same:.1e}; finite differences: {}{}",
        fd.join(", "),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    (failed.is_empty(), detail)
}

fn a9() -> (bool, String) {
    use prunekit::pruner::apply_plan;
    let mut cfg = ModelConfig::standard(64, 8, 16, 3, 2);
    cfg.d_ffn = 24;
    let mut m = ModelState::init(cfg, 909).unwrap();
    let batch = probe_batch(64, 3, 8, 910);
    kill_block(&mut m, 2);
    kill_ffn_dims(&mut m, 0, &[1, 5, 22]);
    kill_ffn_dims(&mut m, 1, &[0, 7, 8]);
    kill_attention_dims(&mut m, 0, &[2, 3]);
    kill_attention_dims(&mut m, 1, &[0, 6]);
    let before = m.forward(&batch).unwrap();
    let diff_after = |plan: PrunePlan, model: &ModelState| -> (ModelState, f64) {
        let pruned = apply_plan(model, &plan).unwrap();
        let d = max_abs_diff(&before, &pruned.forward(&batch).unwrap());
        (pruned, d)
    };
    let (p1, d_block) = diff_after(PrunePlan::blocks(vec![2]), &m);
    let (p2, d_ffn) = diff_after(PrunePlan::ffn(vec![vec![1, 5, 22], vec![0, 7, 8]]), &p1);
    let (_, d_att) = diff_after(PrunePlan::attention(vec![vec![2, 3], vec![0, 6]]), &p2);
    let fresh = ModelState::init(cfg, 911).unwrap();
    let base = fresh.forward(&batch).unwrap();
    let d_ext = max_abs_diff(&base, &widen_heads(&widen_ffn(&fresh, 7), 3).forward(&batch).unwrap());

    // Removing residual dims also changes every layer-norm population, so the
    // right comparison is the unpruned model normalized over surviving dims.
    let mut rng = ChaCha8Rng::seed_from_u64(912);
    let lively = lively_model(ModelConfig::standard(64, 8, 16, 2, 2), &mut rng);
    let removed = vec![0, 3, 9, 15];
    let mut active = vec![true; 16];
    removed.iter().for_each(|&i| active[i] = false);
    let pruned = apply_plan(&lively, &PrunePlan::in_out(removed)).unwrap();
    let oracle = Reference::new(&lively);
    let expected: Vec<Vec<f64>> = batch.ids.chunks(8).flat_map(|s| oracle.logits_masked(s, &active)).collect();
    let d_io = max_diff(&pruned.forward(&batch).unwrap(), &expected);

    let pass = [d_block, d_ffn, d_att, d_ext].iter().all(|d| *d <= DEAD_TOLERANCE) && d_io <= MASKED_NORM_TOLERANCE;
    let detail = format!(
        "max |Δlogit|: block {d_block:.1e}, ffn {d_ffn:.1e}, attention {d_att:.1e}, zero-extension {d_ext:.1e}; in/out vs masked-norm oracle {d_io:.1e}"
    );
    (pass, detail)
}

fn a10() -> (bool, String) {
    use prunekit::cli::{execute, Command, Invocation};
    let base = tempfile::tempdir().unwrap();
    let out = base.path().join("run");
    let mut cfg = RunConfig::preset(Preset::Tiny);
    cfg.out = out.clone();
    cfg.seed = 7;
    for attempt in ["first", "second"] {
        for command in Command::ALL {
            let started = Instant::now();
            let inv = Invocation {
                command,
                config: cfg.clone(),
                teacher: None,
                checkpoint: (command == Command::Evaluate).then(|| out.join("student.pkpt")),
                verbose: false,
            };
            if let Err(e) = execute(&inv) {
                return (false, format!("{command} failed: {e}"));
            }
            eprintln!("  A10 {attempt} {command} {:.1}s", started.elapsed().as_secs_f64());
        }
        std::fs::rename(&out, base.path().join(attempt)).unwrap();
    }
    // Timing files and the human-readable tables carry wall-clock throughput;
    // everything else must match byte for byte.
    let compared_file = |n: &str| !n.contains("timing") && !n.ends_with(".txt") || n.ends_with(".config.txt");
    let mut names: Vec<String> = std::fs::read_dir(base.path().join("first"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| compared_file(n))
        .collect();
    names.sort();
    let mut mismatches = Vec::new();
    for name in &names {
        let a = std::fs::read(base.path().join("first").join(name)).unwrap();
        let b = std::fs::read(base.path().join("second").join(name)).unwrap_or_default();
        if a != b {
            mismatches.push(name.clone());
        }
    }
    let checkpoints = names.iter().filter(|n| n.ends_with(".pkpt")).count();
    let records = names.iter().filter(|n| n.ends_with(".jsonl")).count();
    let pass = mismatches.is_empty() && checkpoints > 0;
    let detail = format!(
        "every command run twice on the tiny preset; {checkpoints} checkpoints and {records} record files compared, {} differ{}",
        mismatches.len(),
        if mismatches.is_empty() { String::new() } else { format!(": {}", mismatches.join(", ")) }
    );
    (pass, detail)
}

fn small_pipeline_logs(shared: &mut Shared) {
    let suite = TaskSuite::new(41).unwrap();
    let data = Datasets::generate(
        &suite,
        &DataConfig {
            train: 300,
            test: 50,
            rule_seed: 41,
            ..DataConfig::default()
        },
    )
    .unwrap();
    let mut cfg = ModelConfig::standard(512, 16, 32, 3, 2);
    cfg.tie_embeddings = true;
    let teacher = ModelState::init(cfg, 42).unwrap();
    let stage = StageConfig {
        alpha: 1.0,
        epochs: 1,
        n_b: 1,
        max_blocks: 1,
        n_ffn: 40,
        max_ffn: 100,
        n_att: 3,
        max_att: 9,
        n_d: 5,
        max_in_out: 12,
        refresh_importance: true,
        importance_batch: 64,
    };
    let pd = PruneData {
        prune: &data.prune,
        distill: &data.distill,
        validation: &data.validation,
    };
    let pruner = Pruner::new(&teacher, stage, DistillConfig::default(), pd).unwrap();
    let out = pruner.run_pipeline(&teacher).unwrap();
    collect_pipeline(shared, "structure pipeline", &out);
    let one = pruner.run_oneshot(&teacher, prunekit::pruner::Scope::All, Some(1)).unwrap();
    if !one.model.shape_audit().is_empty() {
        shared.audit_failures.push("structure one-shot".into());
    }
    shared.logs.push(("structure one-shot".into(), one.log));
}

fn collect_pipeline(shared: &mut Shared, label: &str, out: &PipelineOutcome) {
    for s in &out.stages {
        for (what, m) in [("stage", Some(&s.model)), ("rollback", s.rollback.as_ref())] {
            if let Some(m) = m {
                if !m.shape_audit().is_empty() {
                    shared.audit_failures.push(format!("{label} {what} {}", s.kind));
                }
            }
        }
    }
    shared.logs.push((label.to_string(), out.log.clone()));
}

fn a4(shared: &mut Shared) -> (bool, String) {
    let mut surgeries = 0;
    let mut bad = Vec::new();
    for (label, log) in &shared.logs {
        for r in &log.records {
            let (stage, before, after, check) = match r {
                LogRecord::Iteration(i) => (i.stage, i.params_before, i.params_after, i.surgery),
                LogRecord::OneShotPrune {
                    stage,
                    params_before,
                    params_after,
                    surgery,
                    ..
                } => (*stage, *params_before, *params_after, *surgery),
                _ => continue,
            };
            surgeries += 1;
            // Distillation never changes shapes, so the logged count after the
            // iteration must equal the closed-form prediction as well.
            if !check.exact(before) || after != check.predicted_params_after {
                bad.push(format!("{label} {stage}: {check:?}"));
            }
        }
    }
    let stages: Vec<StageKind> = shared
        .logs
        .iter()
        .flat_map(|(_, l)| l.iterations().map(|i| i.stage).collect::<Vec<_>>())
        .collect();
    let all_kinds = StageKind::PIPELINE.iter().all(|k| stages.contains(k));
    let pass = surgeries > 0 && bad.is_empty() && shared.audit_failures.is_empty() && all_kinds;
    let detail = format!(
        "{surgeries} plan applications across {} runs, {} count mismatches, {} audit failures, every stage kind exercised: {all_kinds}{}",
        shared.logs.len(),
        bad.len(),
        shared.audit_failures.len(),
        bad.first().map(|b| format!("; e.g. {b}")).unwrap_or_default()
    );
    (pass, detail)
}

fn throughput(model: &ModelState, samples: &[Sample]) -> f64 {
    // best of two passes damps scheduler noise
    (0..2).map(|_| decode_throughput(model, samples).unwrap()).fold(0.0, f64::max)
}

fn a5(shared: &mut Shared) -> (bool, String) {
    let started = Instant::now();
    let cfg = RunConfig::preset(Preset::Desk);
    let suite = TaskSuite::with_shape(cfg.data.rule_seed, cfg.data.feature_values, TaskSuite::DEFAULT_SLOTS).unwrap();
    let data = Datasets::generate(&suite, &cfg.data).unwrap();
    let init = ModelState::init(cfg.model, cfg.seed).unwrap();
    let trained = train_teacher(&init, &data.distill, &data.validation, &cfg.teacher).unwrap();
    let teacher = trained.model;
    let train_probe = &data.distill[..data.distill.len().min(3_000)];
    let teacher_train = accuracy(&teacher, train_probe).unwrap().overall;
    let teacher_test = accuracy(&teacher, &data.test).unwrap().overall;
    let teacher_secs = started.elapsed().as_secs_f64();

    let pd = PruneData {
        prune: &data.prune,
        distill: &data.distill,
        validation: &data.validation,
    };
    let pruner = Pruner::new(&teacher, cfg.stage, cfg.distill, pd).unwrap();
    let out = pruner.run_pipeline(&teacher).unwrap();
    collect_pipeline(shared, "desk pipeline", &out);
    let student = &out.model;
    let student_test = accuracy(student, &data.test).unwrap().overall;
    let probe = &data.test[..THROUGHPUT_SAMPLES.min(data.test.len())];
    let t_teacher = throughput(&teacher, probe);
    let t_student = throughput(student, probe);
    let secs = started.elapsed().as_secs_f64();
    shared.a5_seconds = Some(secs);

    let reduction = teacher.param_count() as f64 / student.param_count() as f64;
    let speedup = t_student / t_teacher;
    let checks = [
        teacher_train >= A5_TEACHER_ACCURACY,
        reduction >= A5_REDUCTION,
        student_test >= teacher_test - A5_ACCURACY_DROP,
        speedup >= A5_SPEEDUP,
        secs <= A5_SECONDS,
    ];
    let c = student.config;
    let detail = format!(
        "teacher acc train {teacher_train:.4} test {teacher_test:.4} after {} epochs ({teacher_secs:.0}s); \
         student {} blocks d_model {} d_ffn {} d_head {}; params {} -> {} ({reduction:.2}x); \
         test acc {student_test:.4} (drop {:.4}); throughput {t_teacher:.1} -> {t_student:.1}/s ({speedup:.2}x); \
         {} iterations; total {secs:.0}s",
        trained.epochs.len(),
        c.n_blocks,
        c.d_model,
        c.d_ffn,
        c.d_head,
        teacher.param_count(),
        student.param_count(),
        teacher_test - student_test,
        out.iterations(),
    );
    (checks.iter().all(|c| *c), detail)
}

/// Near-total budgets and one distillation epoch per iteration. At desk
/// budgets the small suite compresses losslessly and both arms tie at full
/// accuracy, which says nothing about the schedule.
fn aggressive_stage(cfg: &ModelConfig) -> StageConfig {
    StageConfig {
        epochs: 1,
        max_blocks: cfg.n_blocks - 1,
        max_ffn: cfg.d_ffn - cfg.d_ffn / 8,
        max_att: 3 * cfg.d_head / 4,
        max_in_out: cfg.d_model / 2,
        ..StageConfig::desk(cfg)
    }
}

fn small_suite(shared: &mut Shared) {
    for seed in 0..A6_SEEDS {
        let rule_seed = 600 + seed;
        let suite = TaskSuite::new(rule_seed).unwrap();
        let data = Datasets::generate(
            &suite,
            &DataConfig {
                train: 4_000,
                test: 1_000,
                rule_seed,
                data_seed: seed,
                ..DataConfig::default()
            },
        )
        .unwrap();
        let started = Instant::now();
        let cfg = ModelConfig::standard(512, 16, 64, 4, 4);
        let init = ModelState::init(cfg, seed).unwrap();
        let teacher = train_teacher(&init, &data.distill, &data.validation, &small_teacher_config(seed, 10))
            .unwrap()
            .model;
        let teacher_accuracy = accuracy(&teacher, &data.test).unwrap().overall;
        shared.a6_seconds += started.elapsed().as_secs_f64();
        let stage = aggressive_stage(&cfg);
        let pd = PruneData {
            prune: &data.prune,
            distill: &data.distill,
            validation: &data.validation,
        };
        let test_acc = |m: &ModelState| accuracy(m, &data.test).unwrap().overall;
        let mut arms = Vec::new();
        let (mut gradual, mut oneshot) = (None, None);
        for variant in LossVariant::ALL {
            let distill = DistillConfig {
                learning_rate: 1e-3,
                loss_variant: variant,
                seed,
                ..DistillConfig::default()
            };
            let started = Instant::now();
            let pruner = Pruner::new(&teacher, stage, distill, PruneData { ..pd }).unwrap();
            let out = pruner.run_pipeline(&teacher);
            let acc = out.as_ref().ok().map(|o| test_acc(&o.model));
            arms.push((variant, acc));
            if variant == LossVariant::KlPairwise {
                if let Ok(out) = out {
                    collect_pipeline(shared, &format!("small seed {seed}"), &out);
                    gradual = acc;
                    let epochs = out.iterations() * stage.epochs;
                    if let Ok(one) = pruner.run_oneshot_with(&teacher, &out.removals(), epochs) {
                        oneshot = Some(test_acc(&one.model));
                        shared.logs.push((format!("small seed {seed} one-shot"), one.log));
                    }
                    shared.a6_seconds += started.elapsed().as_secs_f64();
                }
            }
        }
        shared.small.push(SmallSeed {
            seed,
            teacher_accuracy,
            gradual,
            oneshot,
            arms,
        });
    }
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or("failed".into(), |v| format!("{v:.4}"))
}

fn a6(shared: &mut Shared) -> (bool, String) {
    let mut wins = 0;
    let mut rows = Vec::new();
    for s in &shared.small {
        if let (Some(g), Some(o)) = (s.gradual, s.oneshot) {
            if g > o {
                wins += 1;
            }
        }
        rows.push(format!(
            "seed {}: teacher {:.4} gradual {} one-shot {}",
            s.seed,
            s.teacher_accuracy,
            fmt_acc(s.gradual),
            fmt_acc(s.oneshot)
        ));
    }
    // without an A5 run in the same invocation there is nothing to compare against
    let limit = shared.a5_seconds.map_or(f64::INFINITY, |a5| 2.0 * a5);
    let pass = wins >= A6_NEEDED && shared.a6_seconds <= limit;
    let detail = format!(
        "{wins}/{A6_SEEDS} seeds favour gradual ({:.0}s); {}",
        shared.a6_seconds,
        rows.join("; ")
    );
    (pass, detail)
}

fn a7(shared: &mut Shared) -> (bool, String) {
    let mut wins = 0;
    let mut rows = Vec::new();
    for s in &shared.small {
        let get = |v: LossVariant| s.arms.iter().find(|a| a.0 == v).and_then(|a| a.1);
        let (kl, pair) = (get(LossVariant::KlOnly), get(LossVariant::KlPairwise));
        if let (Some(k), Some(p)) = (kl, pair) {
            if p >= k {
                wins += 1;
            }
        }
        let arms: Vec<String> = s.arms.iter().map(|(v, a)| format!("{v} {}", fmt_acc(*a))).collect();
        rows.push(format!("seed {}: {}", s.seed, arms.join(", ")));
    }
    let complete = shared.small.iter().all(|s| s.arms.len() == 3);
    (
        wins >= A7_NEEDED && complete,
        format!("{wins}/{} seeds with kl_pairwise >= kl_only; {}", shared.small.len(), rows.join("; ")),
    )
}
