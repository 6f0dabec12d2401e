use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::config::{scope_name, RunConfig};
use super::Command;
use crate::distill::{train_teacher_with, LossVariant};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, ModelState};
use crate::pruner::{PipelineOutcome, PruneData, Pruner, RunLog, Scope, StageKind};
use crate::taskgen::{accuracy, decode_throughput, AccuracyReport, Datasets, TaskId, TaskSuite};

/// A parsed command line.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: RunConfig,
    /// Teacher checkpoint; defaults to `<out>/teacher.pkpt`.
    pub teacher: Option<PathBuf>,
    /// Checkpoint for `evaluate`.
    pub checkpoint: Option<PathBuf>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

/// 1 for usage and configuration problems, 2 for everything that failed at run time.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Input(_) => 1,
        _ => 2,
    }
}

/// Exclusive handle on an output directory, released on drop.
struct OutDir {
    path: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    fn open(path: &Path) -> Result<Self> {
        fs::create_dir_all(path)?;
        let lock = path.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self {
                path: path.to_path_buf(),
                lock,
            }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::contract(format!(
                "output directory {} is in use by another run (remove {} if stale)",
                path.display(),
                lock.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.file(name), contents)?;
        Ok(())
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

fn jsonl(records: &[Value]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

fn hardware() -> String {
    let cpu = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {threads} hardware threads; single-threaded decode")
}

fn per_task(r: &AccuracyReport) -> BTreeMap<&'static str, f64> {
    r.per_task.iter().map(|(t, a)| (t.name(), *a)).collect()
}

struct Measured {
    accuracy: AccuracyReport,
    throughput: f64,
    params: usize,
}

struct Ctx<'a> {
    inv: &'a Invocation,
    cfg: &'a RunConfig,
    out: OutDir,
    data: Datasets,
    records: Vec<Value>,
    timings: Vec<Value>,
}

impl Ctx<'_> {
    fn progress(&self, msg: impl AsRef<str>) {
        if self.inv.verbose {
            eprintln!("[{}] {}", self.inv.command, msg.as_ref());
        }
    }

    fn measure(&self, model: &ModelState) -> Result<Measured> {
        let n = self.cfg.throughput_samples.min(self.data.test.len()).max(1);
        Ok(Measured {
            accuracy: accuracy(model, &self.data.test)?,
            throughput: decode_throughput(model, &self.data.test[..n])?,
            params: model.param_count(),
        })
    }

    fn teacher(&self) -> Result<ModelState> {
        let path = self
            .inv
            .teacher
            .clone()
            .unwrap_or_else(|| self.out.file("teacher.pkpt"));
        self.progress(format!("loading teacher {}", path.display()));
        load_checkpoint(&path)
    }

    fn pruner<'d>(&'d self, teacher: &ModelState, variant: Option<LossVariant>) -> Result<Pruner<'d>> {
        let (_, _, mut distill) = self.cfg.seeded();
        if let Some(v) = variant {
            distill.loss_variant = v;
        }
        let data = PruneData {
            prune: &self.data.prune,
            distill: &self.data.distill,
            validation: &self.data.validation,
        };
        Pruner::new(teacher, self.cfg.stage, distill, data)
    }

    fn record(&mut self, v: Value) {
        self.records.push(v);
    }

    fn timing(&mut self, what: &str, m: &Measured) {
        self.timings.push(json!({
            "event": "throughput",
            "what": what,
            "samples_per_second": m.throughput,
            "hardware": hardware(),
        }));
    }

    fn write_log(&self, name: &str, log: &RunLog) -> Result<()> {
        self.out.write(&format!("{name}.runlog.jsonl"), &log.to_jsonl()?)?;
        self.out.write(&format!("{name}.runlog.timing.jsonl"), &log.timings_jsonl()?)
    }

    fn finish(&self, table: Option<String>) -> Result<()> {
        let stem = self.inv.command.file_stem();
        self.out.write(&format!("{stem}.jsonl"), &jsonl(&self.records))?;
        self.out.write(&format!("{stem}.timing.jsonl"), &jsonl(&self.timings))?;
        if let Some(t) = table {
            self.out.write(&format!("{stem}.txt"), &t)?;
            if self.inv.verbose {
                eprint!("{t}");
            }
        }
        Ok(())
    }
}

/// Runs one command; returns the metrics records it wrote.
pub fn execute(inv: &Invocation) -> Result<Vec<Value>> {
    let cfg = &inv.config;
    cfg.validate()?;
    let suite = TaskSuite::with_shape(cfg.data.rule_seed, cfg.data.feature_values, TaskSuite::DEFAULT_SLOTS)?;
    let data = Datasets::generate(&suite, &cfg.data)?;
    if suite.max_input_len() > cfg.model.max_seq_len {
        return Err(Error::Config(format!(
            "model.max_seq_len {} is shorter than the longest task input {}",
            cfg.model.max_seq_len,
            suite.max_input_len()
        )));
    }
    let out = OutDir::open(&cfg.out)?;
    out.write(&format!("{}.config.txt", inv.command.file_stem()), &cfg.to_text())?;
    let mut ctx = Ctx {
        inv,
        cfg,
        out,
        data,
        records: Vec::new(),
        timings: Vec::new(),
    };
    match inv.command {
        Command::TrainTeacher => train_teacher_cmd(&mut ctx)?,
        Command::Compress => compress(&mut ctx)?,
        Command::OneShot => oneshot(&mut ctx)?,
        Command::SingleStage => single_stage(&mut ctx)?,
        Command::Evaluate => evaluate(&mut ctx)?,
        Command::AblateDistill => ablate_distill(&mut ctx)?,
        Command::AblatePrune => ablate_prune(&mut ctx)?,
    }
    Ok(ctx.records)
}

fn evaluation_record(split: &str, what: &str, m: &Measured) -> Value {
    json!({
        "event": "evaluation",
        "model": what,
        "split": split,
        "accuracy": m.accuracy.overall,
        "per_task": per_task(&m.accuracy),
        "correct": m.accuracy.correct,
        "total": m.accuracy.total,
        "params": m.params,
    })
}

fn train_teacher_cmd(ctx: &mut Ctx) -> Result<()> {
    let (seed, teacher_cfg, _) = ctx.cfg.seeded();
    let init = ModelState::init(ctx.cfg.model, seed)?;
    ctx.progress(format!("training teacher with {} parameters", init.param_count()));
    let outcome = train_teacher_with(&init, &ctx.data.distill, &ctx.data.validation, &teacher_cfg, |r| {
        if ctx.inv.verbose {
            eprintln!("[train-teacher] epoch {} loss {:.4} val {:?}", r.epoch, r.mean_loss, r.val_accuracy);
        }
    })?;
    for r in &outcome.epochs {
        ctx.record(json!({"event": "epoch", "epoch": r.epoch, "mean_loss": r.mean_loss, "val_accuracy": r.val_accuracy}));
    }
    if let Some(why) = outcome.diverged {
        ctx.record(json!({"event": "diverged", "detail": why}));
        ctx.finish(None)?;
        return Err(Error::Numeric(why));
    }
    save_checkpoint(&ctx.out.file("teacher.pkpt"), &outcome.model)?;
    let m = ctx.measure(&outcome.model)?;
    ctx.timing("teacher", &m);
    let val = accuracy(&outcome.model, &ctx.data.validation)?;
    ctx.record(json!({"event": "evaluation", "model": "teacher", "split": "validation", "accuracy": val.overall, "per_task": per_task(&val)}));
    ctx.record(evaluation_record("test", "teacher", &m));
    ctx.record(json!({
        "event": "summary",
        "epochs": outcome.epochs.len(),
        "params": m.params,
        "accuracy": m.accuracy.overall,
        "checkpoint": "teacher.pkpt",
    }));
    ctx.finish(None)
}

struct Row {
    label: String,
    measured: std::result::Result<Measured, String>,
}

fn table(title: &str, base_params: usize, rows: &[Row]) -> String {
    let mut header = vec!["".to_string(), "params".into(), "ratio".into(), "samples/s".into()];
    header.extend(TaskId::ALL.iter().map(|t| t.name().to_string()));
    header.push("overall".into());
    let mut lines = vec![header];
    for r in rows {
        let mut cells = vec![r.label.clone()];
        match &r.measured {
            Ok(m) => {
                cells.push(m.params.to_string());
                cells.push(format!("{:.2}x", base_params as f64 / m.params as f64));
                cells.push(format!("{:.1}", m.throughput));
                for t in TaskId::ALL {
                    cells.push(m.accuracy.per_task.get(&t).map_or("-".into(), |a| format!("{a:.3}")));
                }
                cells.push(format!("{:.4}", m.accuracy.overall));
            }
            Err(e) => cells.push(format!("FAILED: {e}")),
        }
        lines.push(cells);
    }
    let cols = lines.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| lines.iter().filter_map(|l| l.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut s = format!("{title}\n");
    for l in &lines {
        let cells: Vec<String> = l
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        s.push_str(cells.join("  ").trim_end());
        s.push('\n');
    }
    s
}

fn row_record(table: &str, r: &Row) -> Value {
    match &r.measured {
        Ok(m) => json!({
            "event": "table_row",
            "table": table,
            "row": r.label,
            "params": m.params,
            "accuracy": m.accuracy.overall,
            "per_task": per_task(&m.accuracy),
        }),
        Err(e) => json!({"event": "table_row", "table": table, "row": r.label, "failed": e}),
    }
}

fn measure_row(ctx: &mut Ctx, label: &str, model: &ModelState) -> Result<Row> {
    let m = ctx.measure(model)?;
    ctx.timing(label, &m);
    Ok(Row {
        label: label.to_string(),
        measured: Ok(m),
    })
}

fn compress(ctx: &mut Ctx) -> Result<()> {
    let teacher = ctx.teacher()?;
    let outcome = {
        let pruner = ctx.pruner(&teacher, None)?;
        ctx.progress("running the staged pipeline");
        pruner.run_pipeline(&teacher)?
    };
    ctx.write_log("compress", &outcome.log)?;
    for s in &outcome.stages {
        save_checkpoint(&ctx.out.file(&format!("stage_{}.pkpt", s.kind)), &s.model)?;
        if let Some(r) = &s.rollback {
            save_checkpoint(&ctx.out.file(&format!("rollback_{}.pkpt", s.kind)), r)?;
        }
    }
    save_checkpoint(&ctx.out.file("student.pkpt"), &outcome.model)?;

    let after = |kinds: &[StageKind]| -> ModelState {
        outcome
            .stages
            .iter()
            .rfind(|s| kinds.contains(&s.kind))
            .map(|s| s.model.clone())
            .unwrap_or_else(|| teacher.clone())
    };
    let snapshots = [
        ("original", teacher.clone()),
        ("after_block_pruning", after(&[StageKind::Blocks])),
        ("after_inter_module_pruning", after(&[StageKind::Blocks, StageKind::FfnInter, StageKind::AttInter])),
        ("after_in_out_pruning", outcome.model.clone()),
    ];
    let mut rows = Vec::new();
    for (label, model) in &snapshots {
        ctx.progress(format!("measuring {label}"));
        rows.push(measure_row(ctx, label, model)?);
    }
    for r in &rows {
        let rec = row_record("compress", r);
        ctx.record(rec);
    }
    let last = rows.last().and_then(|r| r.measured.as_ref().ok()).expect("measured above");
    let first = rows[0].measured.as_ref().expect("measured above");
    let summary = json!({
        "event": "summary",
        "params": last.params,
        "teacher_params": first.params,
        "reduction": first.params as f64 / last.params as f64,
        "accuracy": last.accuracy.overall,
        "teacher_accuracy": first.accuracy.overall,
        "iterations": outcome.iterations(),
        "checkpoint": "student.pkpt",
    });
    ctx.record(summary);
    let t = table("compression summary (test split)", first.params, &rows);
    ctx.finish(Some(t))
}

fn oneshot(ctx: &mut Ctx) -> Result<()> {
    let teacher = ctx.teacher()?;
    let scope = ctx.cfg.scope;
    let outcome = ctx.pruner(&teacher, None)?.run_oneshot(&teacher, scope, None)?;
    ctx.write_log("oneshot", &outcome.log)?;
    save_checkpoint(&ctx.out.file("oneshot.pkpt"), &outcome.model)?;
    let row = measure_row(ctx, &format!("oneshot_{}", scope_name(scope)), &outcome.model)?;
    let rec = row_record("oneshot", &row);
    ctx.record(rec);
    let m = row.measured.as_ref().expect("measured");
    ctx.record(json!({
        "event": "summary",
        "scope": scope_name(scope),
        "epochs": outcome.epochs,
        "params": m.params,
        "accuracy": m.accuracy.overall,
        "diverged": outcome.diverged,
        "checkpoint": "oneshot.pkpt",
    }));
    ctx.finish(None)
}

fn single_stage(ctx: &mut Ctx) -> Result<()> {
    let teacher = ctx.teacher()?;
    let kind = ctx.cfg.single_stage;
    let outcome = ctx.pruner(&teacher, None)?.run_single_stage(&teacher, kind)?;
    ctx.write_log("single_stage", &outcome.log)?;
    save_checkpoint(&ctx.out.file("single_stage.pkpt"), &outcome.model)?;
    let row = measure_row(ctx, &format!("gradual_{kind}"), &outcome.model)?;
    let rec = row_record("single_stage", &row);
    ctx.record(rec);
    let m = row.measured.as_ref().expect("measured");
    ctx.record(json!({
        "event": "summary",
        "stage": kind,
        "iterations": outcome.iterations(),
        "params": m.params,
        "accuracy": m.accuracy.overall,
        "checkpoint": "single_stage.pkpt",
    }));
    ctx.finish(None)
}

fn evaluate(ctx: &mut Ctx) -> Result<()> {
    let path = ctx
        .inv
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("evaluate needs --checkpoint PATH".into()))?;
    let model = load_checkpoint(&path)?;
    let m = ctx.measure(&model)?;
    ctx.timing("checkpoint", &m);
    ctx.record(evaluation_record("test", &path.display().to_string(), &m));
    ctx.record(json!({
        "event": "summary",
        "params": m.params,
        "accuracy": m.accuracy.overall,
        "closed_form_params": crate::model::param_count(&model.config),
    }));
    if ctx.inv.verbose {
        eprintln!(
            "accuracy {:.4}  params {}  throughput {:.1} samples/s",
            m.accuracy.overall, m.params, m.throughput
        );
    }
    ctx.finish(None)
}

fn arm<F>(ctx: &mut Ctx, label: &str, run: F) -> Row
where
    F: FnOnce(&Ctx) -> Result<ModelState>,
{
    ctx.progress(format!("arm {label}"));
    let result = run(ctx).and_then(|model| ctx.measure(&model));
    let row = Row {
        label: label.to_string(),
        measured: result.map_err(|e| e.to_string()),
    };
    if let Ok(m) = &row.measured {
        ctx.timing(label, m);
    }
    row
}

fn ablate_distill(ctx: &mut Ctx) -> Result<()> {
    let teacher = ctx.teacher()?;
    let mut rows = Vec::new();
    for variant in LossVariant::ALL {
        rows.push(arm(ctx, variant.name(), |c| {
            Ok(c.pruner(&teacher, Some(variant))?.run_pipeline(&teacher)?.model)
        }));
    }
    for r in &rows {
        let rec = row_record("ablate_distill", r);
        ctx.record(rec);
    }
    ctx.record(json!({"event": "summary", "arms": rows.len(), "failed": rows.iter().filter(|r| r.measured.is_err()).count()}));
    let t = table("distillation ablation (test split)", teacher.param_count(), &rows);
    ctx.finish(Some(t))
}

fn gradual(ctx: &Ctx, teacher: &ModelState, scope: Scope) -> Result<PipelineOutcome> {
    let pruner = ctx.pruner(teacher, None)?;
    match scope {
        Scope::All => pruner.run_pipeline(teacher),
        Scope::Stage(k) => pruner.run_single_stage(teacher, k),
    }
}

fn ablate_prune(ctx: &mut Ctx) -> Result<()> {
    let teacher = ctx.teacher()?;
    let epochs = ctx.cfg.stage.epochs;
    let mut rows = Vec::new();
    let scopes = StageKind::PIPELINE.into_iter().map(Scope::Stage).chain([Scope::All]);
    for scope in scopes {
        let name = scope_name(scope);
        let mut matched = None;
        rows.push(arm(ctx, &format!("{name} (gradual)"), |c| {
            let out = gradual(c, &teacher, scope)?;
            matched = Some((out.removals(), out.iterations() * epochs));
            Ok(out.model)
        }));
        rows.push(arm(ctx, &format!("{name} (one-shot)"), |c| {
            let (removals, budget) = matched.ok_or_else(|| Error::contract("gradual arm failed; nothing to match"))?;
            Ok(c.pruner(&teacher, None)?.run_oneshot_with(&teacher, &removals, budget)?.model)
        }));
    }
    // all-stages one-shot row before the all-stages gradual row
    let n = rows.len();
    rows.swap(n - 2, n - 1);
    for r in &rows {
        let rec = row_record("ablate_prune", r);
        ctx.record(rec);
    }
    ctx.record(json!({"event": "summary", "arms": rows.len(), "failed": rows.iter().filter(|r| r.measured.is_err()).count()}));
    let t = table("pruning ablation (test split)", teacher.param_count(), &rows);
    ctx.finish(Some(t))
}
