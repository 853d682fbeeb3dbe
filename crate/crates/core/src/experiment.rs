//! End-to-end runs: data loading, stream generation, sequential training
//! with per-task evaluation of both memories, and artifact files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{Baseline, BaselineConfig};
use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, Method, RunConfig, StreamKind};
use crate::data::{gaussian_blobs, gcil_stream, load_idx_dir, split_stream, DataSplit, TaskSpec};
use crate::dropout::ActivityState;
use crate::error::{Error, Result};
use crate::metrics::{
    activation_similarity, eval_activity, evaluate, recency_probabilities, spread, TaskAccuracies, TaskMatrix,
};
use crate::net::{small_conv, NetworkState};
use crate::rng::{stream, Stream};
use crate::sparse::SparsityRatio;
use crate::trainer::{fingerprint, AuditEvent, AuditLog, ContinualLearner, Learner};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Loads the configured dataset and applies the per-class limits.
pub fn load_data(cfg: &RunConfig) -> Result<DataSplit> {
    let d = &cfg.dataset;
    let split = match d.kind {
        DatasetKind::Idx => {
            let path = d.path.as_ref().ok_or_else(|| Error::Config(vec!["dataset.path is required".into()]))?;
            load_idx_dir(path)?
        }
        DatasetKind::Blobs => gaussian_blobs(
            d.blob_classes,
            d.train_per_class.unwrap_or(100),
            d.test_per_class.unwrap_or(50),
            &d.blob_shape,
            d.blob_noise,
            &mut stream(d.stream_seed, Stream::Data),
        )?,
    };
    let train = match d.train_per_class {
        Some(n) => split.train.take_per_class(n),
        None => split.train,
    };
    let test = match d.test_per_class {
        Some(n) => split.test.take_per_class(n),
        None => split.test,
    };
    DataSplit::new(train, test)
}

pub fn make_tasks(cfg: &RunConfig, split: &DataSplit) -> Result<Vec<TaskSpec>> {
    let d = &cfg.dataset;
    match d.stream {
        StreamKind::Split => split_stream(split, d.tasks),
        StreamKind::Gcil => gcil_stream(split, d.tasks, d.samples_per_task, d.max_classes, d.weighting, d.stream_seed),
    }
}

/// Builds the working model for the configured method.
pub fn build_network(cfg: &RunConfig, split: &DataSplit, seed: u64) -> Result<NetworkState> {
    let comps = cfg.components();
    let sparsity = if comps.sparse_activations {
        Some((SparsityRatio::new(cfg.sparsity.ratios[0])?, SparsityRatio::new(cfg.sparsity.ratios[1])?))
    } else {
        None
    };
    let specs = small_conv(
        (cfg.model.filters[0], cfg.model.filters[1]),
        cfg.model.hidden,
        split.class_count(),
        sparsity,
        comps.semantic_dropout,
    );
    NetworkState::build(split.train.item_shape(), &specs, split.class_count(), &mut stream(seed, Stream::Init))
}

/// Class-IL and Task-IL matrices of one model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixPair {
    pub class_il: TaskMatrix,
    pub task_il: TaskMatrix,
}

impl MatrixPair {
    fn new(t: usize) -> Self {
        MatrixPair { class_il: TaskMatrix::new(t), task_il: TaskMatrix::new(t) }
    }

    fn record(&mut self, after: usize, acc: &TaskAccuracies) {
        self.class_il.set_row(after, &acc.class_il);
        self.task_il.set_row(after, &acc.task_il);
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub label: String,
    pub method: Method,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
    pub working: MatrixPair,
    pub stable: Option<MatrixPair>,
    pub final_working: TaskAccuracies,
    pub final_stable: Option<TaskAccuracies>,
    /// Per-task prediction mass of the inference model.
    pub recency: Vec<f64>,
    pub activity: Option<ActivityState>,
    pub eval_activity: Option<ActivityState>,
    pub audit: Option<AuditLog>,
    pub checkpoint: Checkpoint,
}

impl RunResult {
    /// Final accuracies of the model used for reported predictions.
    pub fn final_inference(&self) -> &TaskAccuracies {
        self.final_stable.as_ref().unwrap_or(&self.final_working)
    }

    /// Named scalar results, in a fixed order.
    pub fn scalar_metrics(&self) -> Vec<(&'static str, f64)> {
        let inf = self.final_inference();
        let mut m = vec![
            ("class_il", inf.mean_class_il()),
            ("task_il", inf.mean_task_il()),
            ("working_class_il", self.final_working.mean_class_il()),
            ("working_task_il", self.final_working.mean_task_il()),
        ];
        if let Some(s) = &self.final_stable {
            m.push(("stable_class_il", s.mean_class_il()));
            m.push(("stable_task_il", s.mean_task_il()));
        }
        let matrix = &self.stable.as_ref().unwrap_or(&self.working).class_il;
        if let Some(f) = matrix.forgetting() {
            m.push(("forgetting", f));
        }
        m.push(("recency_spread", spread(&self.recency)));
        m
    }
}

fn activity_digest(learner: &dyn ContinualLearner) -> (u64, u64, Option<u64>) {
    (
        learner.activity().map_or(0, ActivityState::total_counts),
        fingerprint(learner.working()),
        learner.stable().map(fingerprint),
    )
}

fn evaluate_after(
    learner: &dyn ContinualLearner,
    split: &DataSplit,
    seen: &[TaskSpec],
) -> Result<(TaskAccuracies, Option<TaskAccuracies>)> {
    let w = evaluate(learner.working(), &split.test, seen)?;
    let s = match learner.stable() {
        Some(s) => Some(evaluate(s, &split.test, seen)?),
        None => None,
    };
    Ok((w, s))
}

/// Trains one seed of the configured method over the whole stream.
pub fn run_experiment(cfg: &RunConfig, seed: u64) -> Result<RunResult> {
    let split = load_data(cfg)?;
    let tasks = make_tasks(cfg, &split)?;
    run_on(cfg, seed, &split, &tasks)
}

/// As [`run_experiment`] on an already loaded dataset and stream.
pub fn run_on(cfg: &RunConfig, seed: u64, split: &DataSplit, tasks: &[TaskSpec]) -> Result<RunResult> {
    cfg.validate()?;
    let net = build_network(cfg, split, seed)?;
    let tc = cfg.train_config();
    let bc = BaselineConfig {
        sgd: tc.sgd,
        batch_size: tc.batch_size,
        replay_batch_size: tc.replay_batch_size,
        epochs: tc.epochs,
        augment: tc.augment,
    };
    let t = tasks.len();
    let mut working = MatrixPair::new(t);
    let mut stable_m = None;
    let mut audit_extra = Vec::new();

    let (final_w, final_s, learner): (TaskAccuracies, Option<TaskAccuracies>, Box<dyn ContinualLearner>) =
        match cfg.method.name {
            Method::Joint => {
                let mut all: Vec<usize> = tasks.iter().flat_map(|t| t.train_indices.iter().copied()).collect();
                all.sort_unstable();
                all.dedup();
                let mut classes: Vec<usize> = tasks.iter().flat_map(|t| t.classes.iter().copied()).collect();
                classes.sort_unstable();
                classes.dedup();
                let union = TaskSpec {
                    task_id: 0,
                    classes,
                    class_counts: Vec::new(),
                    train_indices: all,
                    test_indices: Vec::new(),
                };
                let mut b = Baseline::sgd(net, bc, seed)?;
                b.train_task(&split.train, &union)?;
                let (w, _) = evaluate_after(&b, split, tasks)?;
                working.record(t - 1, &w);
                (w, None, Box::new(b))
            }
            method => {
                let mut learner: Box<dyn ContinualLearner> = match method {
                    Method::Scommer => Box::new(Learner::new(net, tc, seed)?),
                    Method::Er => Box::new(Baseline::er(net, cfg.buffer.size, bc, seed)?),
                    _ => Box::new(Baseline::sgd(net, bc, seed)?),
                };
                let mut last = None;
                for (i, task) in tasks.iter().enumerate() {
                    learner.train_task(&split.train, task)?;
                    let before = activity_digest(learner.as_ref());
                    let (w, s) = evaluate_after(learner.as_ref(), split, &tasks[..=i])?;
                    let after = activity_digest(learner.as_ref());
                    if cfg.training.audit {
                        audit_extra.push(AuditEvent::Eval {
                            task: i,
                            counters_changed: before.0 != after.0,
                            working_changed: before.1 != after.1,
                            stable_changed: before.2 != after.2,
                        });
                    }
                    working.record(i, &w);
                    if let Some(s) = &s {
                        stable_m.get_or_insert_with(|| MatrixPair::new(t)).record(i, s);
                    }
                    last = Some((w, s));
                }
                let (w, s) = last.ok_or_else(|| Error::InvalidInput("stream has no tasks".into()))?;
                (w, s, learner)
            }
        };

    let recency = recency_probabilities(learner.inference_model(), &split.test, tasks)?;
    let test_all: Vec<usize> = (0..split.test.len()).collect();
    let eval_counts = match learner.activity() {
        Some(a) => Some(eval_activity(learner.working(), a, &split.test, &test_all)?),
        None => None,
    };
    let audit = learner_audit(learner.as_ref(), cfg, audit_extra);
    Ok(RunResult {
        label: run_label(cfg),
        method: cfg.method.name,
        seed,
        tasks: tasks.to_vec(),
        working,
        stable: stable_m,
        final_working: final_w,
        final_stable: final_s,
        recency,
        activity: learner.activity().cloned(),
        eval_activity: eval_counts,
        audit,
        checkpoint: learner.checkpoint(),
    })
}

fn learner_audit(learner: &dyn ContinualLearner, cfg: &RunConfig, extra: Vec<AuditEvent>) -> Option<AuditLog> {
    if !cfg.training.audit {
        return None;
    }
    let mut log = learner.audit_log().cloned().unwrap_or_default();
    // evaluation events go after the task-end event of the same task
    let mut merged = Vec::with_capacity(log.events.len() + extra.len());
    let mut extra = extra.into_iter().peekable();
    for e in log.events.drain(..) {
        let task_end = matches!(e, AuditEvent::TaskEnd { .. });
        merged.push(e);
        if task_end {
            if let Some(x) = extra.next() {
                merged.push(x);
            }
        }
    }
    merged.extend(extra);
    Some(AuditLog { events: merged })
}

/// Short name of the configuration: the method, plus the disabled SCoMMER
/// components if any.
pub fn run_label(cfg: &RunConfig) -> String {
    let m = &cfg.method;
    if m.name != Method::Scommer {
        return m.name.name().to_string();
    }
    let mut off = Vec::new();
    if !m.sparse_activations {
        off.push("sparse");
    }
    if !m.long_term_memory {
        off.push("ltm");
    }
    if !m.semantic_dropout {
        off.push("dropout");
    }
    if off.is_empty() {
        "scommer".into()
    } else {
        format!("scommer-no-{}", off.join("-"))
    }
}

#[derive(Serialize)]
struct RunInfo<'a> {
    label: &'a str,
    method: &'a str,
    seed: u64,
    engine_version: &'a str,
    config: &'a str,
}

#[derive(Serialize)]
struct Summary<'a> {
    label: &'a str,
    seed: u64,
    metrics: Vec<(&'static str, f64)>,
    final_working: &'a TaskAccuracies,
    final_stable: Option<&'a TaskAccuracies>,
    recency: &'a [f64],
    working_matrix: &'a MatrixPair,
    stable_matrix: Option<&'a MatrixPair>,
    activation_similarity: Option<Vec<Vec<f64>>>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Rows of `method  seed  task  metric  value` for every per-task and
/// overall result (`task` is `all` for whole-run values).
pub fn metric_rows(r: &RunResult) -> Vec<String> {
    let mut rows = Vec::new();
    let mut per_task = |name: &str, acc: &TaskAccuracies| {
        for (j, (c, ti)) in acc.class_il.iter().zip(&acc.task_il).enumerate() {
            rows.push(format!("{}\t{}\t{j}\t{name}_class_il\t{c:.6}", r.label, r.seed));
            rows.push(format!("{}\t{}\t{j}\t{name}_task_il\t{ti:.6}", r.label, r.seed));
        }
    };
    per_task("working", &r.final_working);
    if let Some(s) = &r.final_stable {
        per_task("stable", s);
    }
    for (j, p) in r.recency.iter().enumerate() {
        rows.push(format!("{}\t{}\t{j}\trecency_mass\t{p:.6}", r.label, r.seed));
    }
    for (name, v) in r.scalar_metrics() {
        rows.push(format!("{}\t{}\tall\t{name}\t{v:.6}", r.label, r.seed));
    }
    rows
}

pub const METRICS_HEADER: &str = "method\tseed\ttask\tmetric\tvalue";

/// Writes the artifact files of one run into `dir` (created if needed).
pub fn write_run(dir: &Path, cfg: &RunConfig, r: &RunResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("config.toml"), cfg.to_toml()?)?;
    let info = RunInfo {
        label: &r.label,
        method: r.method.name(),
        seed: r.seed,
        engine_version: ENGINE_VERSION,
        config: "config.toml",
    };
    write(&dir.join("run.json"), serde_json::to_string_pretty(&info)?)?;
    write(&dir.join("tasks.json"), serde_json::to_string_pretty(&r.tasks)?)?;
    let inference = r.stable.as_ref().unwrap_or(&r.working);
    write(&dir.join("accuracy_matrix.tsv"), inference.class_il.to_tsv())?;
    write(&dir.join("task_il_matrix.tsv"), inference.task_il.to_tsv())?;
    if r.stable.is_some() {
        write(&dir.join("accuracy_matrix_working.tsv"), r.working.class_il.to_tsv())?;
    }
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    for row in metric_rows(r) {
        metrics.push_str(&row);
        metrics.push('\n');
    }
    write(&dir.join("metrics.tsv"), metrics)?;
    let similarity =
        r.eval_activity.as_ref().and_then(|a| a.layers.last()).map(|l| activation_similarity(&l.class_wise));
    let summary = Summary {
        label: &r.label,
        seed: r.seed,
        metrics: r.scalar_metrics(),
        final_working: &r.final_working,
        final_stable: r.final_stable.as_ref(),
        recency: &r.recency,
        working_matrix: &r.working,
        stable_matrix: r.stable.as_ref(),
        activation_similarity: similarity,
    };
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    if let Some(a) = &r.activity {
        write(&dir.join("activity.json"), a.to_json()?)?;
    }
    if let Some(a) = &r.eval_activity {
        write(&dir.join("eval_activity.json"), a.to_json()?)?;
    }
    if let Some(log) = &r.audit {
        write(&dir.join("audit.jsonl"), log.to_jsonl()?)?;
    }
    if cfg.output.checkpoint {
        r.checkpoint.save(&dir.join("checkpoint.bin"))?;
    }
    Ok(())
}
