//! Model assembly: parameter layout, the block stack and the task heads.

mod block;
mod config;
mod params;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

pub use block::{
    ea_dc_block, ea_transformer_block, feed_forward, transformer_block, BlockEnv, BlockOutput, BlockParams, FfnParams,
    NormParams,
};
pub use config::{ModelConfig, Task, BLOCKS_GRID, MIX_GRID, P_GRID, WIDTH_GRID};
pub use params::{Init, ParamSet, ParamSpec};

use crate::attention::{attention_mask, mask_factors, AttentionHeadParams, AttentionLogits, EvolveParams};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_table, Phase, PositionalKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::SeedRng;

/// Parameter layout of a configuration, in a fixed order.
pub fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let (d, aw, cw, fw) = (c.d, c.attn_width(), c.conv_width(), c.ffn_width());
    let glorot = |fan_in, fan_out| Init::Glorot { fan_in, fan_out };
    let mut s = Vec::new();
    s.push(ParamSpec::new(
        "embed.weight",
        &[c.input_channels, d],
        glorot(c.input_channels, d),
    ));
    s.push(ParamSpec::new("embed.bias", &[d], Init::Zeros));
    if c.positional == PositionalKind::LearnedAbsolute {
        s.push(ParamSpec::new("pos.table", &[c.max_len, d], Init::Normal(0.02)));
    }
    for i in 0..c.n_blocks {
        let p = |name: &str| format!("block{i}.{name}");
        if c.has_attention() {
            for w in ["wq", "wk", "wv"] {
                s.push(ParamSpec::new(p(&format!("attn.{w}")), &[d, aw], glorot(d, aw)));
            }
            s.push(ParamSpec::new(p("attn.wo"), &[aw, aw], glorot(aw, aw)));
            s.push(ParamSpec::new(p("attn.bo"), &[aw], Init::Zeros));
            if c.positional == PositionalKind::Relative1D {
                let rows = 2 * c.max_rel_dist + 1;
                s.push(ParamSpec::new(p("attn.rel"), &[rows, c.head_dim()], Init::Normal(0.02)));
            }
            if c.evolve {
                s.push(ParamSpec::new(
                    p("evolve.kernel"),
                    &[c.heads, c.heads, 3, 3],
                    Init::MapKernel(c.mask_kind),
                ));
                s.push(ParamSpec::new(p("evolve.bias"), &[c.heads], Init::Zeros));
            }
        }
        if c.has_dilated() {
            for l in 0..c.dilated_layers {
                let c_in = if l == 0 { d } else { cw };
                s.push(ParamSpec::new(
                    p(&format!("dilated{l}.kernel")),
                    &[cw, c_in, 3],
                    glorot(3 * c_in, 3 * cw),
                ));
                s.push(ParamSpec::new(p(&format!("dilated{l}.bias")), &[cw], Init::Zeros));
            }
        }
        s.push(ParamSpec::new(p("ffn.w1"), &[d, fw], glorot(d, fw)));
        s.push(ParamSpec::new(p("ffn.b1"), &[fw], Init::Zeros));
        s.push(ParamSpec::new(p("ffn.w2"), &[fw, d], glorot(fw, d)));
        s.push(ParamSpec::new(p("ffn.b2"), &[d], Init::Zeros));
        for n in ["norm1", "norm2"] {
            s.push(ParamSpec::new(p(&format!("{n}.gamma")), &[d], Init::Ones));
            s.push(ParamSpec::new(p(&format!("{n}.beta")), &[d], Init::Zeros));
        }
    }
    match c.task {
        Task::Pretrain => {
            let ch = c.input_channels;
            s.push(ParamSpec::new("head.reconstruct.weight", &[d, ch], glorot(d, ch)));
            s.push(ParamSpec::new("head.reconstruct.bias", &[ch], Init::Zeros));
        }
        Task::Regression => {
            s.push(ParamSpec::new("head.regress.weight", &[d, 1], glorot(d, 1)));
            s.push(ParamSpec::new("head.regress.bias", &[1], Init::Zeros));
        }
        Task::Classification { n_classes } => {
            if c.classifier_hidden {
                s.push(ParamSpec::new("head.classify.hidden.weight", &[d, d], glorot(d, d)));
                s.push(ParamSpec::new("head.classify.hidden.bias", &[d], Init::Zeros));
            }
            s.push(ParamSpec::new(
                "head.classify.weight",
                &[d, n_classes],
                glorot(d, n_classes),
            ));
            s.push(ParamSpec::new("head.classify.bias", &[n_classes], Init::Zeros));
        }
    }
    s
}

/// A configuration with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub enum HeadParams {
    Reconstruct(LinearParams),
    Regress(LinearParams),
    Classify {
        hidden: Option<LinearParams>,
        out: LinearParams,
    },
}

/// Model parameters placed on a tape as trainable leaves.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub embed: LinearParams,
    pub positional: Option<Var>,
    pub blocks: Vec<BlockParams>,
    pub head: HeadParams,
    /// Leaves in [`ParamSet`] order.
    pub leaves: Vec<Var>,
}

/// Output of [`Model::encode`].
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `(B, T, d)`
    pub z: Var,
    /// Evolved pre-softmax maps per block (empty for `p = 0`).
    pub logits: Vec<AttentionLogits>,
    pub probs: Vec<Var>,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        let params = ParamSet::init(&param_specs(&config), rng);
        Ok(Model { config, params })
    }

    /// Wraps existing parameters; names and shapes must match the layout.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        params.check_against(&specs)?;
        Ok(Model {
            config,
            params: params.reorder(&specs),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let leaves: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        self.bind_leaves(leaves)
    }

    /// Uses existing tape nodes, one per parameter in [`ParamSet`] order,
    /// as the model's parameters.
    pub fn bind_leaves(&self, leaves: Vec<Var>) -> BoundModel {
        assert_eq!(leaves.len(), self.params.len(), "one leaf per parameter");
        let c = &self.config;
        let v = |name: &str| leaves[self.params.index_of(name).unwrap()];
        let lin = |w: &str, b: &str| LinearParams {
            weight: v(w),
            bias: v(b),
        };
        let opt = |name: &str| self.params.index_of(name).map(|i| leaves[i]);
        let blocks = (0..c.n_blocks)
            .map(|i| {
                let p = |name: &str| format!("block{i}.{name}");
                let attention = c.has_attention().then(|| AttentionHeadParams {
                    heads: c.heads,
                    wq: v(&p("attn.wq")),
                    wk: v(&p("attn.wk")),
                    wv: v(&p("attn.wv")),
                    wo: v(&p("attn.wo")),
                    bo: Some(v(&p("attn.bo"))),
                    relative: opt(&p("attn.rel")).map(|t| (t, c.max_rel_dist)),
                });
                let evolve = (c.has_attention() && c.evolve).then(|| EvolveParams {
                    alpha: c.alpha,
                    beta: c.beta,
                    kernel: v(&p("evolve.kernel")),
                    bias: v(&p("evolve.bias")),
                    kind: c.mask_kind,
                });
                let dilated = if c.has_dilated() {
                    (0..c.dilated_layers)
                        .map(|l| (v(&p(&format!("dilated{l}.kernel"))), v(&p(&format!("dilated{l}.bias")))))
                        .collect()
                } else {
                    Vec::new()
                };
                BlockParams {
                    attention,
                    evolve,
                    dilated,
                    ffn: FfnParams {
                        w1: v(&p("ffn.w1")),
                        b1: v(&p("ffn.b1")),
                        w2: v(&p("ffn.w2")),
                        b2: v(&p("ffn.b2")),
                    },
                    norm1: NormParams {
                        gamma: v(&p("norm1.gamma")),
                        beta: v(&p("norm1.beta")),
                    },
                    norm2: NormParams {
                        gamma: v(&p("norm2.gamma")),
                        beta: v(&p("norm2.beta")),
                    },
                }
            })
            .collect();
        let head = match c.task {
            Task::Pretrain => HeadParams::Reconstruct(lin("head.reconstruct.weight", "head.reconstruct.bias")),
            Task::Regression => HeadParams::Regress(lin("head.regress.weight", "head.regress.bias")),
            Task::Classification { .. } => HeadParams::Classify {
                hidden: c
                    .classifier_hidden
                    .then(|| lin("head.classify.hidden.weight", "head.classify.hidden.bias")),
                out: lin("head.classify.weight", "head.classify.bias"),
            },
        };
        BoundModel {
            embed: lin("embed.weight", "embed.bias"),
            positional: opt("pos.table"),
            blocks,
            head,
            leaves,
        }
    }

    /// Embeds `x (B, T, C)`, adds positions and runs the block stack.
    /// `lengths` gives the valid prefix of each padded series.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        x: Var,
        lengths: Option<&[usize]>,
        phase: &mut Phase<'_>,
    ) -> Result<Encoded> {
        let c = &self.config;
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != c.input_channels {
            return Err(Error::Config(format!(
                "input {s:?} does not match a model built for {} channels",
                c.input_channels
            )));
        }
        let (b, t) = (s[0], s[1]);
        if t > c.max_len {
            return Err(Error::Config(format!(
                "series length {t} exceeds max_len {}",
                c.max_len
            )));
        }
        if let Some(l) = lengths {
            if l.len() != b || l.iter().any(|&n| n == 0 || n > t) {
                return Err(Error::Contract(format!("lengths {l:?} invalid for batch {b}, T={t}")));
            }
        }
        let mut h = tape.linear(x, bound.embed.weight, Some(bound.embed.bias))?;
        match c.positional {
            PositionalKind::LearnedAbsolute => {
                let table = bound
                    .positional
                    .ok_or_else(|| Error::Config("missing positional table".into()))?;
                let rows = tape.leading_rows(table, t)?;
                h = tape.add_bias(h, rows)?;
            }
            PositionalKind::Sinusoidal => {
                let table = tape.constant(sinusoidal_table(t, c.d));
                h = tape.add_bias(h, table)?;
            }
            PositionalKind::Relative1D => {}
        }
        h = phase.dropout(tape, h, c.dropout)?;
        // Padded steps are held at zero so they never feed valid ones.
        let step_factors = lengths.filter(|l| l.iter().any(|&n| n < t)).map(|l| {
            (0..b * t * c.d)
                .map(|i| if (i / c.d) % t < l[i / (c.d * t)] { 1.0 } else { 0.0 })
                .collect::<Vec<f64>>()
        });
        if let Some(f) = &step_factors {
            h = tape.mul_const(h, f.clone())?;
        }

        let mask = if c.has_attention() {
            attention_mask(b, c.heads, t, c.causal(), lengths)
        } else {
            None
        };
        let factors = mask.as_deref().map(mask_factors);
        let mut env = BlockEnv {
            dropout: c.dropout,
            eps: c.layer_norm_eps,
            padding: c.dilated_padding,
            mask: mask.as_deref(),
            zero_invalid: factors.as_deref(),
            phase,
        };
        let mut logits: Vec<AttentionLogits> = Vec::new();
        let mut probs = Vec::new();
        for (i, params) in bound.blocks.iter().enumerate() {
            let prev = logits.last();
            let out = if c.has_dilated() {
                ea_dc_block(tape, h, prev, params, i + 1, &mut env)?
            } else if c.evolve {
                ea_transformer_block(tape, h, prev, params, i + 1, &mut env)?
            } else {
                transformer_block(tape, h, params, i + 1, &mut env)?
            };
            h = out.output;
            if let Some(f) = &step_factors {
                h = tape.mul_const(h, f.clone())?;
            }
            logits.extend(out.logits);
            probs.extend(out.probs);
        }
        Ok(Encoded { z: h, logits, probs })
    }

    /// Encoder followed by the task head: `X̂ (B, T, C)`, `ŷ (B)` or
    /// class probabilities `(B, n_classes)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        x: Var,
        lengths: Option<&[usize]>,
        phase: &mut Phase<'_>,
    ) -> Result<(Var, Encoded)> {
        let enc = self.encode(tape, bound, x, lengths, phase)?;
        let out = match bound.head {
            HeadParams::Reconstruct(p) => reconstruct_head(tape, enc.z, &p)?,
            HeadParams::Regress(p) => regression_head(tape, enc.z, lengths, &p)?,
            HeadParams::Classify { hidden, out } => classification_head(tape, enc.z, lengths, hidden.as_ref(), &out)?,
        };
        Ok((out, enc))
    }

    /// Names of parameters belonging to the attention branch.
    pub fn attention_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .iter()
            .filter(|n| n.contains(".attn.") || n.contains(".evolve."))
            .cloned()
            .collect()
    }
}

/// Per-step linear map `d → C`.
pub fn reconstruct_head(tape: &mut Tape, z: Var, p: &LinearParams) -> Result<Var> {
    tape.linear(z, p.weight, Some(p.bias))
}

/// Mean over valid steps, then linear `d → 1`; returns `(B)`.
pub fn regression_head(tape: &mut Tape, z: Var, lengths: Option<&[usize]>, p: &LinearParams) -> Result<Var> {
    let pooled = tape.mean_pool(z, lengths)?;
    let y = tape.linear(pooled, p.weight, Some(p.bias))?;
    let b = tape.shape(y)[0];
    tape.reshape(y, &[b])
}

/// Mean over valid steps, optional ReLU hidden layer, linear, softmax.
pub fn classification_head(
    tape: &mut Tape,
    z: Var,
    lengths: Option<&[usize]>,
    hidden: Option<&LinearParams>,
    out: &LinearParams,
) -> Result<Var> {
    let mut h = tape.mean_pool(z, lengths)?;
    if let Some(hp) = hidden {
        h = tape.linear(h, hp.weight, Some(hp.bias))?;
        h = tape.relu(h);
    }
    let logits = tape.linear(h, out.weight, Some(out.bias))?;
    tape.softmax_masked(logits, None)
}

/// Runs a model on constant input without recording gradients of
/// interest; returns the head output value.
pub fn predict_values(model: &Model, x: &Tensor, lengths: Option<&[usize]>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let (out, _) = model.forward(&mut tape, &bound, xv, lengths, &mut Phase::Eval)?;
    Ok(tape.value(out).clone())
}
