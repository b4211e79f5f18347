//! Multi-split experiments (N × μ × augmentation sweeps) and cross-task
//! transfer, with their on-disk outputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::checkpoint::load_with_vocab;
use super::finetune::{evaluate, train_sflm, FineTuneData, Metric, StepLog};
use super::search::{grid_search, Grid, GridPointResult};
use crate::augment::AugmentKind;
use crate::data::{load_tsv, sample_few_shot_splits, sample_per_class, LabeledExample, UnlabeledExample};
use crate::error::{Error, Result};
use crate::losses::{HyperParams, TaskPair};
use crate::model::Model;
use crate::prompting::{PromptTask, TaskSpec};
use crate::report::{aggregate, emit, Format, Key, ResultTable, RunResult, STD_CONVENTION};
use crate::rng::Streams;
use crate::tokenizer::Vocab;

/// Per-split outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRun {
    pub row: Key,
    pub col: Key,
    pub task: String,
    pub n: usize,
    pub mu: usize,
    pub aug: AugmentKind,
    pub split_seed: u64,
    pub metric: Metric,
    pub value: f64,
    pub accuracy: f64,
    pub f1: Option<f64>,
    pub dev_acc: Option<f64>,
    pub best_step: usize,
    pub hyperparameters: HyperParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<GridPointResult>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub metric: Metric,
    pub num_splits: usize,
    pub std_convention: String,
    pub hyperparameters: HyperParams,
    pub runs: Vec<SplitRun>,
    pub table: ResultTable,
    pub log_path: Option<String>,
}

impl RunReport {
    fn build(command: &str, metric: Metric, num_splits: usize, hp: &HyperParams, runs: Vec<SplitRun>, row_header: &str, log_path: Option<String>) -> Result<Self> {
        let results: Vec<RunResult> = runs
            .iter()
            .map(|r| RunResult {
                row: r.row.clone(),
                col: r.col.clone(),
                metric: r.metric,
                value: r.value,
            })
            .collect();
        let table = aggregate(&results, row_header)?;
        table.check_runs(num_splits)?;
        Ok(RunReport {
            command: command.to_string(),
            metric,
            num_splits,
            std_convention: STD_CONVENTION.to_string(),
            hyperparameters: hp.clone(),
            runs,
            table,
            log_path,
        })
    }

    /// `report.json`, `results.csv` (one row per split run), `table.csv` and
    /// `table.md`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let report = dir.join("report.json");
        std::fs::write(&report, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&report, e))?;

        let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
        w.write_record(["row_key", "col_key", "task", "n", "mu", "aug", "split_seed", "metric", "value", "accuracy", "f1", "dev_acc", "best_step"])?;
        for r in &self.runs {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                r.row.label.clone(),
                r.col.label.clone(),
                r.task.clone(),
                r.n.to_string(),
                r.mu.to_string(),
                r.aug.to_string(),
                r.split_seed.to_string(),
                r.metric.to_string(),
                r.value.to_string(),
                r.accuracy.to_string(),
                opt(r.f1),
                opt(r.dev_acc),
                r.best_step.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir.join("results.csv"), e))?;
        emit(&self.table, Format::Csv, dir.join("table.csv"))?;
        emit(&self.table, Format::Markdown, dir.join("table.md"))
    }

    pub fn mean(&self, row: &str, col: &str) -> Option<f64> {
        self.table.cell(row, col).map(|c| c.mean)
    }
}

/// `train_log.jsonl` writer; a no-op without an output directory.
pub struct StepLogWriter {
    out: Option<BufWriter<File>>,
    path: Option<PathBuf>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    run: &'a str,
    split: u64,
    #[serde(flatten)]
    step: &'a StepLog,
}

impl StepLogWriter {
    pub fn create(dir: Option<&Path>) -> Result<Self> {
        match dir {
            None => Ok(StepLogWriter { out: None, path: None }),
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let path = d.join("train_log.jsonl");
                let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
                Ok(StepLogWriter {
                    out: Some(BufWriter::new(f)),
                    path: Some(path),
                })
            }
        }
    }

    pub fn write(&mut self, run: &str, split: u64, step: &StepLog) -> Result<()> {
        if let (Some(out), Some(path)) = (&mut self.out, &self.path) {
            let line = serde_json::to_string(&LogLine { run, split, step })?;
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<Option<String>> {
        if let (Some(out), Some(path)) = (&mut self.out, &self.path) {
            out.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(self.path.map(|_| "train_log.jsonl".to_string()))
    }
}

fn default_splits() -> usize {
    5
}

fn default_aug() -> Vec<AugmentKind> {
    vec![AugmentKind::MASK]
}

fn default_metric() -> Metric {
    Metric::Accuracy
}

/// What to run, independent of where the data lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub n: Vec<usize>,
    pub mu: Vec<usize>,
    #[serde(default = "default_aug")]
    pub aug: Vec<AugmentKind>,
    #[serde(default = "default_splits")]
    pub num_splits: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hp: HyperParams,
    #[serde(default)]
    pub grid: Option<Grid>,
    #[serde(default = "default_metric")]
    pub metric: Metric,
}

/// A task with its labeled pool and held-out test set.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub name: String,
    pub task: PromptTask,
    pub pool: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFiles {
    #[serde(default)]
    pub name: Option<String>,
    pub task: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
}

/// Experiment file: data locations plus a [`Plan`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub checkpoint: PathBuf,
    pub tasks: Vec<TaskFiles>,
    #[serde(flatten)]
    pub plan: Plan,
}

impl ExperimentSpec {
    /// Relative paths are resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: ExperimentSpec =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut spec.checkpoint);
        for t in &mut spec.tasks {
            fix(&mut t.task);
            fix(&mut t.train);
            fix(&mut t.test);
        }
        Ok(spec)
    }
}

pub fn load_task_data(files: &TaskFiles, vocab: &Vocab) -> Result<TaskData> {
    let spec = TaskSpec::load(&files.task)?;
    let task = PromptTask::new(&spec, vocab)?;
    if !files.test.exists() {
        return Err(Error::invalid(format!("test file {} does not exist", files.test.display())));
    }
    let pool = load_tsv(&files.train, task.arity(), &spec.labels)?;
    let test = load_tsv(&files.test, task.arity(), &spec.labels)?;
    let name = files
        .name
        .clone()
        .or(spec.name)
        .unwrap_or_else(|| files.task.file_stem().map_or("task".into(), |s| s.to_string_lossy().into_owned()));
    Ok(TaskData { name, task, pool, test })
}

fn aug_label(kind: &AugmentKind) -> String {
    if AugmentKind::all_defaults().contains(kind) {
        kind.name().to_string()
    } else {
        kind.to_string()
    }
}

fn metrics(model: &Model, vocab: &Vocab, task: &PromptTask, test: &[LabeledExample], metric: Metric) -> Result<(f64, f64, Option<f64>)> {
    let accuracy = evaluate(model, vocab, test, task, Metric::Accuracy)?;
    let f1 = if task.num_labels() == 2 {
        Some(evaluate(model, vocab, test, task, Metric::F1)?)
    } else {
        None
    };
    let value = match metric {
        Metric::Accuracy => accuracy,
        Metric::F1 => f1.ok_or_else(|| Error::invalid("F1 requested on a task with more than two labels"))?,
    };
    Ok((value, accuracy, f1))
}

/// Every `(task, N, μ, kind)` cell over `num_splits` splits. Labeled data,
/// batch order and labeled-pass dropout depend only on the split seed, so
/// cells that differ only in μ or kind are paired.
pub fn run_experiment_with(
    model: &Model,
    vocab: &Vocab,
    tasks: &[TaskData],
    plan: &Plan,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<RunReport> {
    if tasks.is_empty() || plan.n.is_empty() || plan.mu.is_empty() || plan.aug.is_empty() || plan.num_splits == 0 {
        return Err(Error::Config("experiment needs tasks, N, μ, augmentation kinds and at least one split".into()));
    }
    let many_aug = plan.aug.len() > 1;
    let many_n = plan.n.len() > 1;
    let many_mu = plan.mu.len() > 1;
    let many_tasks = tasks.len() > 1;
    let mut log = StepLogWriter::create(out)?;
    let mut runs = Vec::new();
    for (ti, td) in tasks.iter().enumerate() {
        for (ni, &n) in plan.n.iter().enumerate() {
            for (mi, &mu) in plan.mu.iter().enumerate() {
                let splits = sample_few_shot_splits(&td.pool, td.task.num_labels(), n, mu, plan.num_splits, plan.seed)?;
                for (ai, kind) in plan.aug.iter().enumerate() {
                    let mut row = Vec::new();
                    if many_aug {
                        row.push(aug_label(kind));
                    }
                    if many_n || !many_aug {
                        row.push(format!("N={n}"));
                    }
                    let mut col = Vec::new();
                    if many_tasks || !many_mu {
                        col.push(td.name.clone());
                    }
                    if many_mu {
                        col.push(format!("mu={mu}"));
                    }
                    let row = Key::new(ai * plan.n.len() + ni, row.join(" "));
                    let col = Key::new(ti * plan.mu.len() + mi, col.join(" "));
                    let base = HyperParams {
                        n_per_class: n,
                        mu,
                        ..plan.hp.clone()
                    };
                    for split in &splits {
                        let run_name = format!("{} N={n} mu={mu} {}", td.name, kind);
                        progress(&format!("{run_name} split {}", split.seed));
                        let unlabeled = split.unlabeled_texts();
                        let streams = Streams::new(split.seed).child("train");
                        let mut train_one = |hp: &HyperParams| {
                            let data = FineTuneData {
                                train: &split.train,
                                dev: &split.dev,
                                unlabeled: &unlabeled,
                            };
                            let mut sink = Ok(());
                            let outcome = train_sflm(model, vocab, data, TaskPair::same(&td.task), hp, *kind, &streams, &mut |s| {
                                if sink.is_ok() {
                                    sink = log.write(&run_name, split.seed, s);
                                }
                            })?;
                            sink?;
                            Ok::<_, Error>(outcome)
                        };
                        let (outcome, hp, grid) = match &plan.grid {
                            None => (train_one(&base)?, base.clone(), None),
                            Some(grid) => {
                                let g = grid_search(&base, grid, |_, hp| {
                                    let o = train_one(hp)?;
                                    Ok((o.best_dev_acc.unwrap_or(0.0), o))
                                })?;
                                (g.best_artifact, g.best, Some(g.results))
                            }
                        };
                        let (value, accuracy, f1) = metrics(&outcome.model, vocab, &td.task, &td.test, plan.metric)?;
                        runs.push(SplitRun {
                            row: row.clone(),
                            col: col.clone(),
                            task: td.name.clone(),
                            n,
                            mu,
                            aug: *kind,
                            split_seed: split.seed,
                            metric: plan.metric,
                            value,
                            accuracy,
                            f1,
                            dev_acc: outcome.best_dev_acc,
                            best_step: outcome.best_step,
                            hyperparameters: hp,
                            grid,
                        });
                    }
                }
            }
        }
    }
    let log_path = log.finish()?;
    let header = if many_aug { "Augmentation" } else { "N" };
    let report = RunReport::build("sweep", plan.metric, plan.num_splits, &plan.hp, runs, header, log_path)?;
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

pub fn run_experiment(spec: &ExperimentSpec, out: Option<&Path>, progress: &mut dyn FnMut(&str)) -> Result<RunReport> {
    let (model, vocab) = load_with_vocab(&spec.checkpoint)?;
    let tasks = spec
        .tasks
        .iter()
        .map(|t| load_task_data(t, &vocab))
        .collect::<Result<Vec<_>>>()?;
    run_experiment_with(&model, &vocab, &tasks, &spec.plan, out, progress)
}

/// Cross-task transfer: labeled source data, unlabeled target data, target
/// test set.
pub struct TransferData<'a> {
    pub source: &'a TaskData,
    pub target_task: &'a PromptTask,
    pub target_name: &'a str,
    pub target_unlabeled: &'a [UnlabeledExample],
    pub target_test: &'a [LabeledExample],
}

fn default_per_class() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    /// Source examples per class, and target unlabeled examples per class
    /// (drawn without labels, so `per_class × classes` in total).
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_splits")]
    pub num_splits: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hp: HyperParams,
    #[serde(default = "default_aug_one")]
    pub aug: AugmentKind,
    #[serde(default = "default_metric")]
    pub metric: Metric,
}

fn default_aug_one() -> AugmentKind {
    AugmentKind::MASK
}

/// Trains twice per seed for a fixed `hp.steps`: the source-only baseline
/// (`λ1 = λ2 = 0`, no unlabeled data) and the full objective with target
/// unlabeled data. No target labels are used before the final test.
pub fn run_transfer(
    model: &Model,
    vocab: &Vocab,
    data: &TransferData<'_>,
    plan: &TransferPlan,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<RunReport> {
    if data.target_unlabeled.iter().any(|u| u.audit_gold().is_some()) {
        return Err(Error::invalid("target data must be unlabeled"));
    }
    if data.source.task.num_labels() != data.target_task.num_labels() {
        return Err(Error::Task("source and target tasks need the same number of labels".into()));
    }
    if plan.num_splits == 0 {
        return Err(Error::Config("transfer needs at least one seed".into()));
    }
    let c = data.source.task.num_labels();
    let col = Key::new(0, format!("{}->{}", data.source.name, data.target_name));
    let mut log = StepLogWriter::create(out)?;
    let mut runs = Vec::new();
    for s in 0..plan.num_splits as u64 {
        let seed = plan.seed + s;
        let root = Streams::new(seed);
        let picks = sample_per_class(&data.source.pool, c, plan.per_class, &root.child("source"))?;
        let train: Vec<LabeledExample> = picks.iter().map(|&i| data.source.pool[i].clone()).collect();
        let k = (plan.per_class * c).min(data.target_unlabeled.len());
        let u_idx = index::sample(&mut root.child("target").rng(), data.target_unlabeled.len(), k).into_vec();
        let unlabeled: Vec<&[String]> = u_idx.iter().map(|&i| data.target_unlabeled[i].text()).collect();
        let tasks = TaskPair {
            labeled: &data.source.task,
            unlabeled: data.target_task,
        };
        let streams = root.child("train");
        for (rank, name) in [(0usize, "Transfer"), (1, "SFLM")] {
            progress(&format!("{name} seed {seed}"));
            let (hp, unl): (HyperParams, &[&[String]]) = if rank == 0 {
                (
                    HyperParams {
                        lambda1: 0.0,
                        lambda2: 0.0,
                        mu: 0,
                        ..plan.hp.clone()
                    },
                    &[],
                )
            } else {
                (plan.hp.clone(), &unlabeled)
            };
            let fine = FineTuneData {
                train: &train,
                dev: &[],
                unlabeled: unl,
            };
            let mut sink = Ok(());
            let outcome = train_sflm(model, vocab, fine, tasks, &hp, plan.aug, &streams, &mut |st| {
                if sink.is_ok() {
                    sink = log.write(name, seed, st);
                }
            })?;
            sink?;
            let (value, accuracy, f1) = metrics(&outcome.model, vocab, data.target_task, data.target_test, plan.metric)?;
            runs.push(SplitRun {
                row: Key::new(rank, name),
                col: col.clone(),
                task: data.target_name.to_string(),
                n: plan.per_class,
                mu: hp.mu,
                aug: plan.aug,
                split_seed: seed,
                metric: plan.metric,
                value,
                accuracy,
                f1,
                dev_acc: None,
                best_step: outcome.best_step,
                hyperparameters: hp,
                grid: None,
            });
        }
    }
    let log_path = log.finish()?;
    let report = RunReport::build("transfer", plan.metric, plan.num_splits, &plan.hp, runs, "Method", log_path)?;
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}
