//! Transformer-style blocks. All variants share the post-norm residual
//! layout `Y₁ = LN(X + drop(R))`, `Y = LN(Y₁ + drop(FFN(Y₁)))`; they differ
//! in how the mixing output `R` is produced.

use alloc::vec::Vec;

use crate::attention::{attention_apply, evolve, raw_logits, AttentionHeadParams, AttentionLogits, EvolveParams};
use crate::error::{Error, Result};
use crate::nn::{dilated_conv1d_stack, DilatedPadding, Phase};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: Var,
    pub beta: Var,
}

/// Parameters of one block, bound to a tape.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attention: Option<AttentionHeadParams>,
    pub evolve: Option<EvolveParams>,
    /// `(kernel, bias)` per dilated layer.
    pub dilated: Vec<(Var, Var)>,
    pub ffn: FfnParams,
    pub norm1: NormParams,
    pub norm2: NormParams,
}

/// Everything a block needs besides its parameters.
pub struct BlockEnv<'m, 'p, 'r> {
    pub dropout: f64,
    pub eps: f64,
    pub padding: DilatedPadding,
    /// Attention validity `(B, K, N, N)`.
    pub mask: Option<&'m [bool]>,
    /// 0/1 factors matching `mask`, applied before the map convolution.
    pub zero_invalid: Option<&'m [f64]>,
    pub phase: &'p mut Phase<'r>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub output: Var,
    pub logits: Option<AttentionLogits>,
    /// Post-softmax attention, before dropout.
    pub probs: Option<Var>,
}

/// `ReLU(z W₁ + b₁) W₂ + b₂` with dropout on the hidden activation.
pub fn feed_forward(tape: &mut Tape, z: Var, p: &FfnParams, env: &mut BlockEnv<'_, '_, '_>) -> Result<Var> {
    let h = tape.linear(z, p.w1, Some(p.b1))?;
    let h = tape.relu(h);
    let h = env.phase.dropout(tape, h, env.dropout)?;
    tape.linear(h, p.w2, Some(p.b2))
}

fn residual_sublayers(
    tape: &mut Tape,
    x: Var,
    mixed: Var,
    params: &BlockParams,
    env: &mut BlockEnv<'_, '_, '_>,
) -> Result<Var> {
    let r = env.phase.dropout(tape, mixed, env.dropout)?;
    let s = tape.add(x, r)?;
    let y1 = tape.layer_norm(s, params.norm1.gamma, params.norm1.beta, env.eps)?;
    let f = feed_forward(tape, y1, &params.ffn, env)?;
    let f = env.phase.dropout(tape, f, env.dropout)?;
    let s2 = tape.add(y1, f)?;
    tape.layer_norm(s2, params.norm2.gamma, params.norm2.beta, env.eps)
}

fn attention_branch(
    tape: &mut Tape,
    x: Var,
    prev: Option<&AttentionLogits>,
    attn: &AttentionHeadParams,
    evolution: Option<&EvolveParams>,
    layer_index: usize,
    env: &mut BlockEnv<'_, '_, '_>,
) -> Result<(Var, AttentionLogits, Var)> {
    let raw = raw_logits(tape, x, attn, layer_index)?;
    let logits = match evolution {
        Some(ev) => evolve(tape, prev, &raw, ev, env.zero_invalid)?,
        None => raw,
    };
    let out = attention_apply(tape, &logits, x, attn, env.mask, env.dropout, env.phase)?;
    Ok((out.output, logits, out.probs))
}

fn require_attention(params: &BlockParams) -> Result<&AttentionHeadParams> {
    params
        .attention
        .as_ref()
        .ok_or_else(|| Error::Config("block has no attention parameters".into()))
}

/// Standard transformer encoder block; attention maps are not evolved.
pub fn transformer_block(
    tape: &mut Tape,
    x: Var,
    params: &BlockParams,
    layer_index: usize,
    env: &mut BlockEnv<'_, '_, '_>,
) -> Result<BlockOutput> {
    let attn = require_attention(params)?;
    let (h, logits, probs) = attention_branch(tape, x, None, attn, None, layer_index, env)?;
    let output = residual_sublayers(tape, x, h, params, env)?;
    Ok(BlockOutput {
        output,
        logits: Some(logits),
        probs: Some(probs),
    })
}

/// EA-Transformer block: attention logits evolved from `prev`.
pub fn ea_transformer_block(
    tape: &mut Tape,
    x: Var,
    prev: Option<&AttentionLogits>,
    params: &BlockParams,
    layer_index: usize,
    env: &mut BlockEnv<'_, '_, '_>,
) -> Result<BlockOutput> {
    let attn = require_attention(params)?;
    let ev = params
        .evolve
        .as_ref()
        .ok_or_else(|| Error::Config("EA-Transformer block needs evolution parameters".into()))?;
    let (h, logits, probs) = attention_branch(tape, x, prev, attn, Some(ev), layer_index, env)?;
    let output = residual_sublayers(tape, x, h, params, env)?;
    Ok(BlockOutput {
        output,
        logits: Some(logits),
        probs: Some(probs),
    })
}

/// EA-DC-Transformer block: the `p·d`-wide attention branch is
/// concatenated with a `(1−p)·d`-wide dilated convolution of the block
/// input. Either branch may be absent (`p = 0` or `p = 1`).
pub fn ea_dc_block(
    tape: &mut Tape,
    x: Var,
    prev: Option<&AttentionLogits>,
    params: &BlockParams,
    layer_index: usize,
    env: &mut BlockEnv<'_, '_, '_>,
) -> Result<BlockOutput> {
    let attention = match &params.attention {
        Some(attn) => Some(attention_branch(
            tape,
            x,
            prev,
            attn,
            params.evolve.as_ref(),
            layer_index,
            env,
        )?),
        None => None,
    };
    let dilated = if params.dilated.is_empty() {
        None
    } else {
        Some(dilated_conv1d_stack(tape, x, &params.dilated, env.padding)?)
    };
    let (mixed, logits, probs) = match (attention, dilated) {
        (Some((h, l, p)), Some(dc)) => (tape.concat_last(h, dc)?, Some(l), Some(p)),
        (Some((h, l, p)), None) => (h, Some(l), Some(p)),
        (None, Some(dc)) => (dc, None, None),
        (None, None) => return Err(Error::Config("block has neither attention nor dilated branch".into())),
    };
    let output = residual_sublayers(tape, x, mixed, params, env)?;
    Ok(BlockOutput { output, logits, probs })
}
