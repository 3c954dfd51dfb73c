//! Run configuration: a flat `key = value` text file with `#` comments and
//! dotted keys.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eanet_core::data::{SynthKind, SynthSpec};
use eanet_core::model::{ModelConfig, Task};
use eanet_core::nn::{ConvMaskKind, DilatedPadding, PositionalKind};
use eanet_core::train::{OptimizerKind, TrainConfig};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Pretrain,
    Regression,
    Classification,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Regression => "regression",
            Self::Classification => "classification",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Self::Pretrain, Self::Regression, Self::Classification]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub synth: SynthSpec,
    /// Per-channel z-scoring fitted on the training split.
    pub standardize: bool,
    /// Share of the training split held out for validation when no
    /// validation file is given.
    pub valid_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth,
            train: None,
            valid: None,
            test: None,
            synth: SynthSpec::default(),
            standardize: true,
            valid_fraction: 0.0,
        }
    }
}

/// Everything a command needs. `input_channels`, `max_len` and
/// `n_classes` may be left open and are then taken from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskKind,
    pub model: ModelConfig,
    pub input_channels: Option<usize>,
    pub max_len: Option<usize>,
    pub n_classes: Option<usize>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::Classification,
            model: ModelConfig::default(),
            input_channels: None,
            max_len: None,
            n_classes: None,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            out: PathBuf::from("runs"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not true or false")),
    }
}

fn parse_opt<T: std::str::FromStr>(v: &str) -> std::result::Result<Option<T>, String> {
    if v == "none" {
        Ok(None)
    } else {
        parse_num(v).map(Some)
    }
}

fn parse_name<T>(v: &str, parse: impl Fn(&str) -> Option<T>, choices: &str) -> std::result::Result<T, String> {
    parse(v).ok_or_else(|| format!("`{v}` is not one of {choices}"))
}

fn show_opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    /// Applies one assignment. Paths are taken relative to `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> std::result::Result<(), String> {
        let path = |v: &str| -> Option<PathBuf> { (v != "none").then(|| base.join(v)) };
        let m = &mut self.model;
        let o = &mut self.train.optimizer;
        let s = &mut self.data.synth;
        match key {
            "task" => self.task = parse_name(value, TaskKind::parse, "pretrain, regression, classification")?,
            "out" => self.out = base.join(value),
            "model.input_channels" => self.input_channels = parse_opt(value)?,
            "model.max_len" => self.max_len = parse_opt(value)?,
            "model.n_classes" => self.n_classes = parse_opt(value)?,
            "model.n_blocks" => m.n_blocks = parse_num(value)?,
            "model.d" => m.d = parse_num(value)?,
            "model.heads" => m.heads = parse_num(value)?,
            "model.alpha" => m.alpha = parse_num(value)?,
            "model.beta" => m.beta = parse_num(value)?,
            "model.p" => m.p = parse_num(value)?,
            "model.evolve" => m.evolve = parse_bool(value)?,
            "model.dilated_layers" => m.dilated_layers = parse_num(value)?,
            "model.dilated_padding" => {
                m.dilated_padding = parse_name(value, DilatedPadding::parse, "symmetric, causal")?
            }
            "model.ffn_mult" => m.ffn_mult = parse_num(value)?,
            "model.dropout" => m.dropout = parse_num(value)?,
            "model.mask_kind" => {
                m.mask_kind = parse_name(value, ConvMaskKind::parse, "encoder, decoder-self, encoder-decoder")?
            }
            "model.positional" => {
                m.positional = parse_name(value, PositionalKind::parse, "learned, sinusoidal, relative")?
            }
            "model.max_rel_dist" => m.max_rel_dist = parse_num(value)?,
            "model.classifier_hidden" => m.classifier_hidden = parse_bool(value)?,
            "model.layer_norm_eps" => m.layer_norm_eps = parse_num(value)?,
            "optim.kind" => o.kind = parse_name(value, OptimizerKind::parse, "adam, radam")?,
            "optim.lr" => o.lr = parse_num(value)?,
            "optim.beta1" => o.beta1 = parse_num(value)?,
            "optim.beta2" => o.beta2 = parse_num(value)?,
            "optim.eps" => o.eps = parse_num(value)?,
            "optim.clip_norm" => o.clip_norm = parse_opt(value)?,
            "train.epochs" => self.train.epochs = parse_num(value)?,
            "train.batch_size" => self.train.batch_size = parse_num(value)?,
            "train.seed" => self.train.seed = parse_num(value)?,
            "train.mask_rate" => self.train.mask_rate = parse_num(value)?,
            "train.stop_at" => self.train.stop_at = parse_opt(value)?,
            "data.source" => {
                self.data.source = match value {
                    "synth" => DataSource::Synth,
                    "csv" => DataSource::Csv,
                    _ => return Err(format!("`{value}` is not one of synth, csv")),
                }
            }
            "data.train" => self.data.train = path(value),
            "data.valid" => self.data.valid = path(value),
            "data.test" => self.data.test = path(value),
            "data.standardize" => self.data.standardize = parse_bool(value)?,
            "data.valid_fraction" => self.data.valid_fraction = parse_num(value)?,
            "data.synth.kind" => s.kind = parse_name(value, SynthKind::parse, "freq-class, noisy-sine-regress")?,
            "data.synth.t" => s.t = parse_num(value)?,
            "data.synth.c" => s.c = parse_num(value)?,
            "data.synth.n_classes" => s.n_classes = parse_num(value)?,
            "data.synth.noise" => s.noise = parse_num(value)?,
            "data.synth.n_train" => s.n_train = parse_num(value)?,
            "data.synth.n_test" => s.n_test = parse_num(value)?,
            "data.synth.seed" => s.seed = parse_num(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let o = &self.train.optimizer;
        let s = &self.data.synth;
        let d = &self.data;
        vec![
            ("task", self.task.name().into()),
            ("out", self.out.display().to_string()),
            ("model.input_channels", show_opt(self.input_channels)),
            ("model.max_len", show_opt(self.max_len)),
            ("model.n_classes", show_opt(self.n_classes)),
            ("model.n_blocks", m.n_blocks.to_string()),
            ("model.d", m.d.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.alpha", m.alpha.to_string()),
            ("model.beta", m.beta.to_string()),
            ("model.p", m.p.to_string()),
            ("model.evolve", m.evolve.to_string()),
            ("model.dilated_layers", m.dilated_layers.to_string()),
            ("model.dilated_padding", m.dilated_padding.name().into()),
            ("model.ffn_mult", m.ffn_mult.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.mask_kind", m.mask_kind.name().into()),
            ("model.positional", m.positional.name().into()),
            ("model.max_rel_dist", m.max_rel_dist.to_string()),
            ("model.classifier_hidden", m.classifier_hidden.to_string()),
            ("model.layer_norm_eps", m.layer_norm_eps.to_string()),
            ("optim.kind", o.kind.name().into()),
            ("optim.lr", o.lr.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.clip_norm", show_opt(o.clip_norm)),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.seed", self.train.seed.to_string()),
            ("train.mask_rate", self.train.mask_rate.to_string()),
            ("train.stop_at", show_opt(self.train.stop_at)),
            (
                "data.source",
                match d.source {
                    DataSource::Synth => "synth",
                    DataSource::Csv => "csv",
                }
                .into(),
            ),
            ("data.train", show_path(&d.train)),
            ("data.valid", show_path(&d.valid)),
            ("data.test", show_path(&d.test)),
            ("data.standardize", d.standardize.to_string()),
            ("data.valid_fraction", d.valid_fraction.to_string()),
            ("data.synth.kind", s.kind.name().into()),
            ("data.synth.t", s.t.to_string()),
            ("data.synth.c", s.c.to_string()),
            ("data.synth.n_classes", s.n_classes.to_string()),
            ("data.synth.noise", s.noise.to_string()),
            ("data.synth.n_train", s.n_train.to_string()),
            ("data.synth.n_test", s.n_test.to_string()),
            ("data.synth.seed", s.seed.to_string()),
        ]
    }

    /// Parses configuration text on top of the defaults. `origin` names the
    /// source in diagnostics; relative paths resolve against `base`.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.out = base.join(&cfg.out);
        let mut seen: Vec<(String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| Error::Config {
                origin: origin.to_string(),
                line,
                message,
            };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(err(format!("expected `key = value`, found `{content}`")));
            }
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                return Err(err(format!("`{key}` already set on line {first}")));
            }
            seen.push((key.to_string(), line));
            cfg.set(key, value, base).map_err(|m| err(format!("{key}: {m}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let parent = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let base = std::path::absolute(parent).map_err(io_err(parent))?;
        Self::parse(&text, &path.display().to_string(), &base)
    }

    /// The effective configuration, one `key = value` line per setting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Model configuration for `task` with data-dependent fields filled.
    pub fn model_config(&self, task: TaskKind) -> Result<ModelConfig> {
        let missing = |what: &str| Error::Usage(format!("{what} is not known; set it or load data first"));
        let mut m = self.model.clone();
        m.input_channels = self.input_channels.ok_or_else(|| missing("model.input_channels"))?;
        m.max_len = self.max_len.ok_or_else(|| missing("model.max_len"))?;
        m.task = match task {
            TaskKind::Pretrain => Task::Pretrain,
            TaskKind::Regression => Task::Regression,
            TaskKind::Classification => Task::Classification {
                n_classes: self.n_classes.ok_or_else(|| missing("model.n_classes"))?,
            },
        };
        m.validate()?;
        Ok(m)
    }

    /// Values outside the usual search grids.
    pub fn warnings(&self) -> Vec<String> {
        self.model.grid_warnings()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, "cfg", Path::new("/base"))
    }

    #[test]
    fn defaults_when_empty() {
        let cfg = parse("# nothing\n\n").unwrap();
        assert_eq!(cfg.train.mask_rate, 0.15);
        assert_eq!(cfg.model.d, 64);
        assert_eq!(cfg.model.heads, 4);
        assert_eq!(cfg.model.n_blocks, 3);
        assert_eq!(cfg.model.p, 0.25);
        assert_eq!(cfg.model.dropout, 0.1);
        assert_eq!(cfg.train.optimizer.lr, 1e-3);
        assert_eq!(cfg.train.optimizer.kind, OptimizerKind::RAdam);
        assert_eq!(cfg.out, Path::new("/base/runs"));
    }

    #[test]
    fn dotted_keys_and_comments() {
        let cfg = parse("model.d = 128  # wider\noptim.kind=adam\ndata.train = x.csv\ntrain.stop_at = 0.9\n").unwrap();
        assert_eq!(cfg.model.d, 128);
        assert_eq!(cfg.train.optimizer.kind, OptimizerKind::Adam);
        assert_eq!(cfg.data.train.as_deref(), Some(Path::new("/base/x.csv")));
        assert_eq!(cfg.train.stop_at, Some(0.9));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse("model.d = 64\n\nmodel.heads = four\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        let err = parse("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 1") && err.to_string().contains("unknown key"));
        let err = parse("model.d\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
        let err = parse("model.d = 8\nmodel.d = 16\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = parse("model.p = 0.5\nmodel.n_classes = 3\ntrain.seed = 9\ndata.source = csv\ndata.train = a.csv\n")
            .unwrap();
        let again = RunConfig::parse(&cfg.to_text(), "again", Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn structural_errors_surface_when_building_the_model() {
        let mut cfg = parse("model.p = 0.3\nmodel.input_channels = 1\nmodel.max_len = 8\n").unwrap();
        assert!(cfg.model_config(TaskKind::Pretrain).is_err());
        cfg.model.p = 0.25;
        assert!(cfg.model_config(TaskKind::Pretrain).is_ok());
        assert!(cfg.model_config(TaskKind::Classification).is_err());
    }

    #[test]
    fn grid_values_only_warn() {
        let mut cfg = parse("model.d = 32\nmodel.input_channels = 1\nmodel.max_len = 8\n").unwrap();
        assert!(!cfg.warnings().is_empty());
        assert!(cfg.model_config(TaskKind::Pretrain).is_ok());
        cfg.model.d = 64;
        assert!(cfg.warnings().is_empty());
    }
}
