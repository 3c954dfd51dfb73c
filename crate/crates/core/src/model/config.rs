use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{ConvMaskKind, DilatedPadding, PositionalKind};

/// Downstream objective a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Task {
    /// Masked-value reconstruction.
    #[default]
    Pretrain,
    Regression,
    Classification {
        n_classes: usize,
    },
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Pretrain => "pretrain",
            Task::Regression => "regression",
            Task::Classification { .. } => "classification",
        }
    }
}

/// Architecture hyper-parameters.
///
/// `evolve` and `p` select the family: EA-DC-Transformer (`evolve`,
/// `0 < p < 1`), EA-Transformer (`evolve`, `p = 1`), vanilla Transformer
/// (no `evolve`, `p = 1`), DC-Transformer (no `evolve`, `p < 1`), and a
/// pure dilated-convolution stack at `p = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input channels `C`.
    pub input_channels: usize,
    /// Longest series the positional table covers.
    pub max_len: usize,
    pub n_blocks: usize,
    pub d: usize,
    pub heads: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Fraction of `d` given to the attention branch.
    pub p: f64,
    /// Layers in the dilated-convolution branch.
    pub dilated_layers: usize,
    pub dilated_padding: DilatedPadding,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub mask_kind: ConvMaskKind,
    pub positional: PositionalKind,
    pub max_rel_dist: usize,
    pub evolve: bool,
    pub task: Task,
    /// Insert a width-`d` ReLU layer before the classifier output.
    pub classifier_hidden: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 1,
            max_len: 64,
            n_blocks: 3,
            d: 64,
            heads: 4,
            alpha: 0.5,
            beta: 0.3,
            p: 0.25,
            dilated_layers: 2,
            dilated_padding: DilatedPadding::Symmetric,
            ffn_mult: 4,
            dropout: 0.1,
            mask_kind: ConvMaskKind::Encoder,
            positional: PositionalKind::LearnedAbsolute,
            max_rel_dist: 16,
            evolve: true,
            task: Task::Pretrain,
            classifier_hidden: false,
            layer_norm_eps: 1e-5,
        }
    }
}

pub const P_GRID: [f64; 9] = [0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0];
pub const MIX_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const WIDTH_GRID: [usize; 2] = [64, 128];
pub const BLOCKS_GRID: [usize; 4] = [2, 3, 4, 5];

impl ModelConfig {
    /// Width of the attention branch, `p · d`.
    pub fn attn_width(&self) -> usize {
        libm::round(self.p * self.d as f64) as usize
    }

    /// Width of the dilated branch, `(1 − p) · d`.
    pub fn conv_width(&self) -> usize {
        self.d - self.attn_width()
    }

    pub fn head_dim(&self) -> usize {
        self.attn_width() / self.heads.max(1)
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_mult * self.d
    }

    pub fn has_attention(&self) -> bool {
        self.attn_width() > 0
    }

    pub fn has_dilated(&self) -> bool {
        self.conv_width() > 0
    }

    pub fn causal(&self) -> bool {
        self.mask_kind == ConvMaskKind::DecoderSelf
    }

    /// Structural checks; violations make the model unbuildable.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_channels == 0 || self.max_len == 0 || self.n_blocks == 0 {
            return bad(format!(
                "channels ({}), max_len ({}) and n_blocks ({}) must be positive",
                self.input_channels, self.max_len, self.n_blocks
            ));
        }
        if self.d < 2 {
            return bad(format!("model width d = {} must be at least 2", self.d));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("p = {} outside [0, 1]", self.p));
        }
        let exact = self.p * self.d as f64;
        if libm::fabs(exact - libm::round(exact)) > 1e-9 {
            return bad(format!("p · d = {exact} is not an integer"));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.has_attention() && (self.heads == 0 || !self.attn_width().is_multiple_of(self.heads)) {
            return bad(format!(
                "attention width {} is not divisible by {} heads",
                self.attn_width(),
                self.heads
            ));
        }
        if self.has_dilated() && self.dilated_layers == 0 {
            return bad("dilated branch needs at least one layer".into());
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 {
            return bad("layer_norm_eps must be positive".into());
        }
        if let Task::Classification { n_classes } = self.task {
            if n_classes < 2 {
                return bad(format!("classification needs at least 2 classes, got {n_classes}"));
            }
        }
        Ok(())
    }

    /// Values outside the usual search grids. Advisory only.
    pub fn grid_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !WIDTH_GRID.contains(&self.d) {
            out.push(format!("hidden dimension {} outside {{64, 128}}", self.d));
        }
        let on = |grid: &[f64], v: f64| grid.iter().any(|g| libm::fabs(g - v) < 1e-12);
        if self.evolve && !on(&MIX_GRID, self.alpha) {
            out.push(format!("alpha {} outside {{0.1, 0.3, 0.5, 0.7, 0.9}}", self.alpha));
        }
        if self.evolve && !on(&MIX_GRID, self.beta) {
            out.push(format!("beta {} outside {{0.1, 0.3, 0.5, 0.7, 0.9}}", self.beta));
        }
        if !on(&P_GRID, self.p) {
            out.push(format!("p {} outside the 1/8 grid", self.p));
        }
        if !BLOCKS_GRID.contains(&self.n_blocks) {
            out.push(format!("n_blocks {} outside {{2, 3, 4, 5}}", self.n_blocks));
        }
        out
    }
}
