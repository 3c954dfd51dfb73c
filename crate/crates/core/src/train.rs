//! Losses, pre-training masks, optimizers and the training loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::{batchify, Targets, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::math;
use crate::metrics::{accuracy, argmax_rows, rmse};
use crate::model::{Model, Task};
use crate::nn::Phase;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;
use crate::{seeded_rng, SeedRng};

/// Probabilities are clamped to this before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

const MASK_RETRIES: usize = 100;

/// Keep/mask flags over a `(B, T, C)` input; `true` keeps the cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainMask {
    pub shape: [usize; 3],
    pub keep: Vec<bool>,
}

impl PretrainMask {
    pub fn masked_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// 1.0 for kept cells, 0.0 for masked ones.
    pub fn keep_factors(&self) -> Vec<f64> {
        self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }
}

/// Independent Bernoulli masking of each valid cell with probability `r`.
/// Cells past a series' length are always kept. Redraws when nothing was
/// masked.
pub fn gen_pretrain_mask(
    shape: [usize; 3],
    r: f64,
    lengths: Option<&[usize]>,
    rng: &mut SeedRng,
) -> Result<PretrainMask> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Config(format!("mask rate {r} outside (0, 1)")));
    }
    let [b, t, c] = shape;
    for _ in 0..MASK_RETRIES {
        let mut keep = vec![true; b * t * c];
        for bi in 0..b {
            let len = lengths.map_or(t, |l| l[bi]);
            for ti in 0..len {
                for ci in 0..c {
                    keep[(bi * t + ti) * c + ci] = rng.random::<f64>() >= r;
                }
            }
        }
        let mask = PretrainMask { shape, keep };
        if mask.masked_count() > 0 {
            return Ok(mask);
        }
    }
    Err(Error::Contract(format!(
        "no cell masked after {MASK_RETRIES} draws at rate {r}"
    )))
}

impl Tape {
    /// `Σ wᵢ (predᵢ − targetᵢ)²`.
    pub fn weighted_squares(&mut self, pred: Var, target: &[f64], weight: Vec<f64>) -> Result<Var> {
        let p = self.data(pred);
        if p.len() != target.len() || p.len() != weight.len() {
            return Err(Error::LengthMismatch {
                shape: self.shape(pred).to_vec(),
                expected: p.len(),
                actual: target.len(),
            });
        }
        let s: f64 = p
            .iter()
            .zip(target)
            .zip(&weight)
            .map(|((a, b), w)| if *w == 0.0 { 0.0 } else { w * (a - b) * (a - b) })
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSquares {
                pred,
                target: target.to_vec(),
                weight,
            },
        ))
    }

    /// Mean of `−ln max(p[label], PROB_FLOOR)` over rows.
    pub fn nll(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(probs);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::LengthMismatch {
                shape: s.to_vec(),
                expected: s[0],
                actual: labels.len(),
            });
        }
        let n = s[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::LabelOutOfRange { label, n_classes: n });
        }
        let p = self.data(probs);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(row, &l)| -math::ln(p[row * n + l].max(PROB_FLOOR)))
            .sum();
        Ok(self.push(
            Tensor::scalar(total / labels.len() as f64),
            Op::Nll {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }
}

/// Mean squared error over masked cells only.
pub fn masked_mse(tape: &mut Tape, x_hat: Var, x: &Tensor, mask: &PretrainMask) -> Result<Var> {
    let n = mask.masked_count();
    if n == 0 {
        return Err(Error::Contract("masked_mse with no masked cells".into()));
    }
    let w = 1.0 / n as f64;
    let weight = mask.keep.iter().map(|&k| if k { 0.0 } else { w }).collect();
    tape.weighted_squares(x_hat, x.data(), weight)
}

/// Batch-mean squared error.
pub fn mse_loss(tape: &mut Tape, y_hat: Var, y: &[f64]) -> Result<Var> {
    let w = vec![1.0 / y.len().max(1) as f64; y.len()];
    tape.weighted_squares(y_hat, y, w)
}

/// Batch-mean negative log-likelihood of `labels` under `probs (B, n)`.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    tape.nll(probs, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Adam,
    #[default]
    RAdam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Adam => "adam",
            Self::RAdam => "radam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Adam, Self::RAdam].into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::RAdam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Moment accumulators and step count for a list of parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Rectification factor `r_t`, or `None` while the variance estimate is
/// not yet tractable (`ρ_t ≤ 4`).
pub fn radam_rectifier(beta2: f64, step: u64) -> Option<f64> {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = math::powi(beta2, step as i32);
    let rho = rho_inf - 2.0 * step as f64 * b2t / (1.0 - b2t);
    (rho > 4.0).then(|| math::sqrt((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)))
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Optimizer {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update. Refuses non-finite gradients without touching state.
    pub fn step(&mut self, params: &mut [Tensor], grads: &mut [Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} parameters, got {} values and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != params[i].len() {
                return Err(Error::Contract(format!("gradient {i} has the wrong length")));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(format!(
                    "parameter {i}, element {j}: {}",
                    g[j]
                )));
            }
        }
        if let Some(max) = self.config.clip_norm {
            clip_global_norm(grads, max);
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - math::powi(c.beta1, t);
        let bc2 = 1.0 - math::powi(c.beta2, t);
        let rect = match c.kind {
            OptimizerKind::Adam => Some(1.0),
            OptimizerKind::RAdam => radam_rectifier(c.beta2, self.step),
        };
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                *w -= match rect {
                    Some(r) => c.lr * r * m_hat / (math::sqrt(v[j] / bc2) + c.eps),
                    None => c.lr * m_hat,
                };
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max`; returns
/// the norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max: f64) -> f64 {
    let norm = math::sqrt(grads.iter().flatten().map(|g| g * g).sum());
    if norm > max {
        let s = max / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Fraction of cells masked during pre-training.
    pub mask_rate: f64,
    /// Stop once the validation metric reaches this value (at or below
    /// for losses, at or above for accuracy).
    pub stop_at: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            mask_rate: 0.15,
            stop_at: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters are kept as the best checkpoint.
    pub best_epoch: usize,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub last: Model,
    /// Parameters with the best validation metric (the last epoch when no
    /// validation set is given).
    pub best: Model,
    pub history: History,
}

/// Metric reported for a task and whether larger is better.
pub fn task_metric(task: Task) -> (&'static str, bool) {
    match task {
        Task::Pretrain => ("masked_mse", false),
        Task::Regression => ("rmse", false),
        Task::Classification { .. } => ("accuracy", true),
    }
}

fn check_targets(task: Task, ds: &TimeSeriesDataset) -> Result<()> {
    match (task, &ds.targets) {
        (Task::Pretrain, _) => Ok(()),
        (Task::Regression, Targets::Regression(_)) => Ok(()),
        (Task::Classification { n_classes }, Targets::Classes { labels, .. }) => {
            match labels.iter().find(|&&l| l >= n_classes) {
                Some(&label) => Err(Error::LabelOutOfRange { label, n_classes }),
                None => Ok(()),
            }
        }
        (task, _) => Err(Error::Config(format!(
            "{} head does not match the dataset targets",
            task.name()
        ))),
    }
}

/// Loss of one batch on `tape`.
fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    ds: &TimeSeriesDataset,
    idx: &[usize],
    mask_rate: f64,
    rng: &mut SeedRng,
    training: bool,
) -> Result<(Var, Vec<Var>)> {
    let (x, lengths) = ds.gather(idx);
    let lens = ds.is_padded().then_some(lengths.as_slice());
    let bound = model.bind(tape);
    let loss = match model.config.task {
        Task::Pretrain => {
            let s = x.shape();
            let mask = gen_pretrain_mask([s[0], s[1], s[2]], mask_rate, lens, rng)?;
            let xin = tape.constant(x.clone());
            let xm = tape.mul_const(xin, mask.keep_factors())?;
            let (xh, _) = run(model, tape, &bound, xm, lens, rng, training)?;
            masked_mse(tape, xh, &x, &mask)?
        }
        Task::Regression => {
            let xin = tape.constant(x);
            let (y, _) = run(model, tape, &bound, xin, lens, rng, training)?;
            mse_loss(tape, y, &ds.regression_targets(idx)?)?
        }
        Task::Classification { .. } => {
            let xin = tape.constant(x);
            let (p, _) = run(model, tape, &bound, xin, lens, rng, training)?;
            cross_entropy(tape, p, &ds.class_labels(idx)?)?
        }
    };
    Ok((loss, bound.leaves))
}

fn run(
    model: &Model,
    tape: &mut Tape,
    bound: &crate::model::BoundModel,
    x: Var,
    lengths: Option<&[usize]>,
    rng: &mut SeedRng,
    training: bool,
) -> Result<(Var, crate::model::Encoded)> {
    if training {
        model.forward(tape, bound, x, lengths, &mut Phase::Train(rng))
    } else {
        model.forward(tape, bound, x, lengths, &mut Phase::Eval)
    }
}

/// Validation metric of `model` on `ds`. Pre-training masks are drawn from
/// a generator seeded with `seed`, so repeated calls agree.
pub fn evaluate(model: &Model, ds: &TimeSeriesDataset, batch_size: usize, mask_rate: f64, seed: u64) -> Result<f64> {
    check_targets(model.config.task, ds)?;
    let batches = batchify(ds.len(), batch_size, false, None)?;
    match model.config.task {
        Task::Pretrain => {
            let mut rng = seeded_rng(seed);
            let (mut total, mut weight) = (0.0, 0.0);
            for idx in &batches {
                let mut tape = Tape::new();
                let (loss, _) = batch_loss(model, &mut tape, ds, idx, mask_rate, &mut rng, false)?;
                total += tape.data(loss)[0] * idx.len() as f64;
                weight += idx.len() as f64;
            }
            Ok(total / weight)
        }
        Task::Regression => {
            let preds = predict(model, ds, batch_size)?;
            rmse(&preds, &ds.regression_targets(&(0..ds.len()).collect::<Vec<_>>())?)
        }
        Task::Classification { .. } => {
            let preds = predict(model, ds, batch_size)?;
            let n = preds.len() / ds.len();
            let labels = ds.class_labels(&(0..ds.len()).collect::<Vec<_>>())?;
            accuracy(&argmax_rows(&preds, n), &labels)
        }
    }
}

/// Head outputs for every series, concatenated in dataset order: one value
/// per series for regression, `n_classes` probabilities for
/// classification, `T·C` reconstructions for pre-training.
pub fn predict(model: &Model, ds: &TimeSeriesDataset, batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for idx in batchify(ds.len(), batch_size, false, None)? {
        let (x, lengths) = ds.gather(&idx);
        let lens = ds.is_padded().then_some(lengths.as_slice());
        out.extend_from_slice(crate::model::predict_values(model, &x, lens)?.data());
    }
    Ok(out)
}

fn improves(candidate: f64, best: Option<f64>, higher_better: bool) -> bool {
    match best {
        None => true,
        Some(b) if higher_better => candidate > b,
        Some(b) => candidate < b,
    }
}

fn reached(metric: f64, target: f64, higher_better: bool) -> bool {
    if higher_better {
        metric >= target
    } else {
        metric <= target
    }
}

/// Epoch loop. Every random draw (shuffling, dropout, masks) comes from a
/// generator seeded with `cfg.seed`, so equal inputs give bitwise-equal
/// outcomes.
pub fn train(
    model: Model,
    train_set: &TimeSeriesDataset,
    valid_set: Option<&TimeSeriesDataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let task = model.config.task;
    check_targets(task, train_set)?;
    if let Some(v) = valid_set {
        check_targets(task, v)?;
    }
    let (_, higher_better) = task_metric(task);
    let mut rng = seeded_rng(cfg.seed);
    let mut model = model;
    let mut opt = Optimizer::new(cfg.optimizer, model.params.tensors());
    let mut history = History::default();
    let mut best: Option<(f64, Model)> = None;

    for epoch in 1..=cfg.epochs {
        let batches = batchify(train_set.len(), cfg.batch_size, true, Some(&mut rng))?;
        let (mut total, mut count) = (0.0, 0usize);
        for idx in &batches {
            let mut tape = Tape::new();
            let (loss, leaves) = batch_loss(&model, &mut tape, train_set, idx, cfg.mask_rate, &mut rng, true)?;
            let value = tape.data(loss)[0];
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            let grads = tape.backward(loss)?;
            let mut g: Vec<Vec<f64>> = leaves.iter().map(|&v| grads.get(v).unwrap().to_vec()).collect();
            opt.step(model.params.tensors_mut(), &mut g)?;
            total += value * idx.len() as f64;
            count += idx.len();
        }
        let train_loss = total / count as f64;
        let valid_metric = match valid_set {
            Some(v) => Some(evaluate(&model, v, cfg.batch_size, cfg.mask_rate, cfg.seed ^ 0x5eed)?),
            None => None,
        };
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            valid_metric,
        });
        let score = valid_metric.unwrap_or(train_loss);
        let score_higher = valid_metric.is_some() && higher_better;
        if improves(score, best.as_ref().map(|b| b.0), score_higher) || valid_metric.is_none() {
            best = Some((score, model.clone()));
            history.best_epoch = epoch;
        }
        if let (Some(target), Some(m)) = (cfg.stop_at, valid_metric) {
            if reached(m, target, higher_better) {
                break;
            }
        }
    }
    let best = best.map_or_else(|| model.clone(), |b| b.1);
    Ok(TrainOutcome {
        last: model,
        best,
        history,
    })
}
