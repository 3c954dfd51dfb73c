//! The subcommands behind the `eanet` binary.

use std::fmt;
use std::path::{Path, PathBuf};

use eanet_core::data::{split_validation, standardize, synth_dataset, TimeSeriesDataset};
use eanet_core::metrics::{attention_records, avg_rank, avg_relative_difference};
use eanet_core::model::{Model, Task};
use eanet_core::nn::Phase;
use eanet_core::selftest::{self, Check, Mutation, GRAD_TOLERANCE};
use eanet_core::train::{evaluate, task_metric, train, History};
use eanet_core::{attention::attention_mask, seeded_rng, Tape};

use crate::checkpoint;
use crate::config::{DataSource, RunConfig, TaskKind};
use crate::csv_long::{load_csv_long, TargetKind};
use crate::error::{io_err, Error, Result};
use crate::tables::{load_metrics_table, save_attention, save_history};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Seed offset of the generator used for evaluation masks.
const EVAL_SEED_MIX: u64 = 0x5eed;

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: TimeSeriesDataset,
    pub valid: Option<TimeSeriesDataset>,
    pub test: Option<TimeSeriesDataset>,
}

fn task_kind(task: Task) -> TaskKind {
    match task {
        Task::Pretrain => TaskKind::Pretrain,
        Task::Regression => TaskKind::Regression,
        Task::Classification { .. } => TaskKind::Classification,
    }
}

fn fill(slot: &mut Option<usize>, found: usize, key: &str) -> Result<()> {
    match *slot {
        None => *slot = Some(found),
        Some(v) if v != found && key == "model.input_channels" => {
            return Err(Error::Usage(format!("{key} is {v} but the data has {found}")));
        }
        Some(v) if v < found => {
            return Err(Error::Usage(format!("{key} is {v} but the data needs {found}")));
        }
        Some(_) => {}
    }
    Ok(())
}

/// Loads the train/valid/test splits for `task`, holds out a validation
/// share if asked, standardizes with training statistics and fills the
/// data-dependent model fields of `cfg`.
pub fn load_splits(cfg: &mut RunConfig, task: TaskKind) -> Result<Splits> {
    let (train, valid, mut test) = match cfg.data.source {
        DataSource::Synth => {
            let (train, test) = synth_dataset(&cfg.data.synth)?;
            (train, None, Some(test))
        }
        DataSource::Csv => {
            let path = cfg
                .data
                .train
                .clone()
                .ok_or_else(|| Error::Usage("data.train is not set".into()))?;
            let mut kind = match task {
                TaskKind::Pretrain => TargetKind::Ignore,
                TaskKind::Regression => TargetKind::Regression,
                TaskKind::Classification => TargetKind::Classes {
                    n_classes: cfg.n_classes,
                },
            };
            let train = load_csv_long(&path, kind)?;
            if let TargetKind::Classes { n_classes: None } = kind {
                kind = TargetKind::Classes {
                    n_classes: train.n_classes(),
                };
            }
            let other = |p: &Option<PathBuf>| p.as_deref().map(|p| load_csv_long(p, kind)).transpose();
            (train, other(&cfg.data.valid)?, other(&cfg.data.test)?)
        }
    };
    let (mut train, mut valid) = match valid {
        None if cfg.data.valid_fraction > 0.0 => {
            let (t, v) = split_validation(&train, cfg.data.valid_fraction, &mut seeded_rng(cfg.train.seed))?;
            (t, Some(v))
        }
        valid => (train, valid),
    };
    for ds in valid.iter().chain(test.iter()) {
        if ds.c != train.c {
            return Err(Error::Usage(format!(
                "splits disagree on channels: train has {}, another split has {}",
                train.c, ds.c
            )));
        }
    }
    if cfg.data.standardize {
        let others: Vec<&TimeSeriesDataset> = valid.iter().chain(test.iter()).collect();
        let (t, mut rest) = standardize(&train, &others)?;
        train = t;
        if test.is_some() {
            test = rest.pop();
        }
        if valid.is_some() {
            valid = rest.pop();
        }
    }
    let max_len = [Some(&train), valid.as_ref(), test.as_ref()]
        .into_iter()
        .flatten()
        .map(|d| d.t)
        .max()
        .unwrap_or(train.t);
    fill(&mut cfg.input_channels, train.c, "model.input_channels")?;
    fill(&mut cfg.max_len, max_len, "model.max_len")?;
    if task == TaskKind::Classification {
        if let Some(n) = train.n_classes() {
            fill(&mut cfg.n_classes, n, "model.n_classes")?;
        }
    }
    Ok(Splits { train, valid, test })
}

/// Outcome of a training command.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metric: &'static str,
    pub history: History,
    pub valid: Option<f64>,
    pub test: Option<f64>,
    pub params: usize,
    pub copied: Option<usize>,
    pub out: PathBuf,
    pub warnings: Vec<String>,
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        if let Some(n) = self.copied {
            writeln!(f, "initialized {n} parameter tensors from checkpoint")?;
        }
        writeln!(f, "parameters: {}", self.params)?;
        for r in &self.history.records {
            write!(f, "epoch {:>3}  train_loss {:.6}", r.epoch, r.train_loss)?;
            if let Some(v) = r.valid_metric {
                write!(f, "  valid_{} {v:.6}", self.metric)?;
            }
            writeln!(f)?;
        }
        writeln!(f, "best epoch: {}", self.history.best_epoch)?;
        if let Some(v) = self.valid {
            writeln!(f, "valid {}: {v:.6}", self.metric)?;
        }
        if let Some(v) = self.test {
            writeln!(f, "test {}: {v:.6}", self.metric)?;
        }
        write!(f, "artifacts: {}", self.out.display())
    }
}

fn fit(cfg: &RunConfig, task: TaskKind, init: Option<&Path>) -> Result<TrainReport> {
    let mut cfg = cfg.clone();
    cfg.task = task;
    let splits = load_splits(&mut cfg, task)?;
    let config = cfg.model_config(task)?;
    let mut model = Model::new(config, &mut seeded_rng(cfg.train.seed))?;
    let copied = match init {
        Some(path) => {
            let source = checkpoint::load(path)?;
            let n = model.params.copy_matching(&source.params)?;
            if n == 0 {
                return Err(Error::Usage(format!(
                    "{}: checkpoint shares no parameters with this model",
                    path.display()
                )));
            }
            Some(n)
        }
        None => None,
    };
    let outcome = train(model, &splits.train, splits.valid.as_ref(), &cfg.train)?;
    let best = outcome.best;
    let (metric, _) = task_metric(best.config.task);
    let score = |ds: &Option<TimeSeriesDataset>| {
        ds.as_ref()
            .map(|d| {
                evaluate(
                    &best,
                    d,
                    cfg.train.batch_size,
                    cfg.train.mask_rate,
                    cfg.train.seed ^ EVAL_SEED_MIX,
                )
            })
            .transpose()
    };
    let (valid, test) = (score(&splits.valid)?, score(&splits.test)?);

    std::fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    checkpoint::save(&cfg.out.join(CHECKPOINT_FILE), &best)?;
    save_history(&cfg.out.join(HISTORY_FILE), &outcome.history, metric)?;
    let config_path = cfg.out.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_text()).map_err(io_err(&config_path))?;
    Ok(TrainReport {
        metric,
        history: outcome.history,
        valid,
        test,
        params: best.params.count(),
        copied,
        out: cfg.out.clone(),
        warnings: cfg.warnings(),
    })
}

/// Masked-reconstruction pre-training. Writes the best checkpoint, the
/// per-epoch history and the effective configuration into `cfg.out`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<TrainReport> {
    fit(cfg, TaskKind::Pretrain, None)
}

/// Full-parameter training of the configured task head, optionally
/// starting from the matching tensors of a checkpoint.
pub fn cmd_finetune(cfg: &RunConfig, init: Option<&Path>) -> Result<TrainReport> {
    if cfg.task == TaskKind::Pretrain {
        return Err(Error::Usage(
            "finetune needs task = regression or classification".into(),
        ));
    }
    fit(cfg, cfg.task, init)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: &'static str,
    pub scores: Vec<(&'static str, f64)>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self
            .scores
            .iter()
            .map(|(s, v)| format!("{s} {}: {v:.6}", self.metric))
            .collect();
        write!(f, "{}", lines.join("\n"))
    }
}

fn prepare(cfg: &RunConfig, model: &Model) -> Result<Splits> {
    let mut cfg = cfg.clone();
    cfg.input_channels = Some(model.config.input_channels);
    cfg.max_len = Some(model.config.max_len);
    if let Task::Classification { n_classes } = model.config.task {
        cfg.n_classes = Some(n_classes);
    }
    load_splits(&mut cfg, task_kind(model.config.task))
}

/// Scores a checkpoint on every available split.
pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path) -> Result<EvalReport> {
    let model = checkpoint::load(ckpt)?;
    let splits = prepare(cfg, &model)?;
    let (metric, _) = task_metric(model.config.task);
    let seed = cfg.train.seed ^ EVAL_SEED_MIX;
    let mut scores = Vec::new();
    for (name, ds) in [
        ("train", Some(&splits.train)),
        ("valid", splits.valid.as_ref()),
        ("test", splits.test.as_ref()),
    ] {
        if let Some(ds) = ds {
            scores.push((
                name,
                evaluate(&model, ds, cfg.train.batch_size, cfg.train.mask_rate, seed)?,
            ));
        }
    }
    Ok(EvalReport { metric, scores })
}

/// A list of named checks with their measured values.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub checks: Vec<Check>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            writeln!(
                f,
                "{status}  {:<52} measured {:.3e}  tolerance {:.3e}",
                c.name, c.measured, c.tolerance
            )?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {failed} failed", self.checks.len())
    }
}

/// Finite-difference gradient checks of every kernel and of a small
/// EA-DC-Transformer.
pub fn cmd_gradcheck(seed: u64) -> CheckReport {
    let mut checks: Vec<Check> = selftest::kernel_grad_checks(seed)
        .into_iter()
        .map(|(name, err)| check(&format!("gradient {name}"), err))
        .collect();
    let full = selftest::model_grad_check(seed).unwrap_or(f64::INFINITY);
    checks.push(check("gradient full EA-DC model", full));
    CheckReport { checks }
}

fn check(name: &str, measured: f64) -> Check {
    Check {
        name: name.to_string(),
        passed: measured <= GRAD_TOLERANCE,
        measured,
        tolerance: GRAD_TOLERANCE,
    }
}

/// The invariant suite.
pub fn cmd_selftest() -> CheckReport {
    CheckReport {
        checks: selftest::run(&Mutation::default()),
    }
}

/// Writes the attention logits and probabilities of one series (taken from
/// the test split when there is one, else from training) and returns the
/// number of rows.
pub fn cmd_export_attn(cfg: &RunConfig, ckpt: &Path, sample: usize, path: &Path) -> Result<usize> {
    let model = checkpoint::load(ckpt)?;
    if !model.config.has_attention() {
        return Err(Error::Usage("the model has no attention branch".into()));
    }
    let splits = prepare(cfg, &model)?;
    let ds = splits.test.as_ref().unwrap_or(&splits.train);
    if sample >= ds.len() {
        return Err(Error::Usage(format!(
            "sample {sample} outside a split of {} series",
            ds.len()
        )));
    }
    let (x, lengths) = ds.gather(&[sample]);
    let lens = ds.is_padded().then_some(lengths.as_slice());
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xin = tape.constant(x);
    let (_, enc) = model.forward(&mut tape, &bound, xin, lens, &mut Phase::Eval)?;
    let mask = attention_mask(1, model.config.heads, ds.t, model.config.causal(), lens);
    let records = attention_records(&tape, &enc.logits, 0, mask.as_deref())?;
    save_attention(path, &records)?;
    Ok(records.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricOp {
    Rank,
    RelDiff,
}

/// Per-model aggregate of a metrics table, in column order.
pub fn cmd_metrics(path: &Path, op: MetricOp, lower_is_better: bool) -> Result<Vec<(String, f64)>> {
    let table = load_metrics_table(path, lower_is_better)?;
    let values = match op {
        MetricOp::Rank => avg_rank(&table),
        MetricOp::RelDiff => avg_relative_difference(&table)?,
    };
    Ok(table.cols.into_iter().zip(values).collect())
}
