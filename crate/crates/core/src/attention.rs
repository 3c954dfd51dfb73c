//! Evolving attention: raw logit generation, the residual convolutional
//! evolution of logits from one block to the next, and value projection.
//!
//! Per block `i`:
//!
//! ```text
//! A_input = α · A_logit(i−1) + (1 − α) · QKᵀ/√d_h      (first block: raw only)
//! A_logit = β · ReLU(Conv3×3(A_input)) + (1 − β) · A_input
//! H       = concat_k(softmax(A_logit)_k · X W^V_k) · W^O
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::nn::{ConvMaskKind, Phase};
use crate::tape::{Tape, Var};

/// Pre-softmax attention maps `(B, K, N, N)` of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLogits {
    pub values: Var,
    /// 1-based block index.
    pub layer_index: usize,
}

/// Mixing weights and convolution of one evolution step.
#[derive(Debug, Clone, Copy)]
pub struct EvolveParams {
    pub alpha: f64,
    pub beta: f64,
    /// `(K, K, 3, 3)`
    pub kernel: Var,
    /// `(K)`
    pub bias: Var,
    pub kind: ConvMaskKind,
}

impl EvolveParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Projections of one multi-head attention layer. Per-head `W^Q/W^K/W^V`
/// blocks are stored side by side as `(d, K·d_h)` matrices.
#[derive(Debug, Clone, Copy)]
pub struct AttentionHeadParams {
    pub heads: usize,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    /// `(K·d_h, out)`
    pub wo: Var,
    pub bo: Option<Var>,
    /// Relative-offset table `(2·max_rel + 1, d_h)` and `max_rel`.
    pub relative: Option<(Var, usize)>,
}

impl AttentionHeadParams {
    /// Per-head width `d_h`.
    pub fn head_dim(&self, tape: &Tape) -> Result<usize> {
        let width = tape.shape(self.wq)[1];
        if self.heads == 0 || !width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attention width {width} is not divisible by {} heads",
                self.heads
            )));
        }
        Ok(width / self.heads)
    }
}

/// Output of [`attention_apply`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `(B, N, out)`
    pub output: Var,
    /// Post-softmax maps `(B, K, N, N)`, before dropout.
    pub probs: Var,
}

// (B, N, K·dh) → (B, K, N, dh)
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, w) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, &[b, n, heads, w / heads])?;
    tape.swap_axes12(r)
}

// (B, K, N, dh) → (B, N, K·dh)
fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, k, n, dh) = (s[0], s[1], s[2], s[3]);
    let t = tape.swap_axes12(x)?;
    tape.reshape(t, &[b, n, k * dh])
}

/// `QKᵀ/√d_h (+ R)` for input `x (B, N, d)`.
pub fn raw_logits(
    tape: &mut Tape,
    x: Var,
    params: &AttentionHeadParams,
    layer_index: usize,
) -> Result<AttentionLogits> {
    let dh = params.head_dim(tape)?;
    if tape.shape(x).len() != 3 {
        return Err(shape_err("raw_logits", tape.shape(x), &[0, 0, 0]));
    }
    let q = tape.matmul(x, params.wq)?;
    let k = tape.matmul(x, params.wk)?;
    let q = split_heads(tape, q, params.heads)?;
    let k = split_heads(tape, k, params.heads)?;
    let scores = tape.matmul_t(q, k)?;
    let mut logits = tape.scale(scores, 1.0 / math::sqrt(dh as f64));
    if let Some((table, max_rel)) = params.relative {
        let r = tape.relative_logits_1d(q, table, max_rel)?;
        logits = tape.add(logits, r)?;
    }
    Ok(AttentionLogits {
        values: logits,
        layer_index,
    })
}

/// One evolution step. `prev` is the previous block's evolved logits
/// (absent for the first block). `zero_invalid`, when given, holds a 0/1
/// factor per logit; invalid positions are zeroed before the convolution.
pub fn evolve(
    tape: &mut Tape,
    prev: Option<&AttentionLogits>,
    raw: &AttentionLogits,
    params: &EvolveParams,
    zero_invalid: Option<&[f64]>,
) -> Result<AttentionLogits> {
    params.validate()?;
    let input = match prev {
        Some(p) => {
            if tape.shape(p.values) != tape.shape(raw.values) {
                return Err(shape_err("evolve", tape.shape(p.values), tape.shape(raw.values)));
            }
            tape.lerp(p.values, raw.values, params.alpha)?
        }
        None => raw.values,
    };
    if params.beta == 0.0 {
        return Ok(AttentionLogits {
            values: input,
            layer_index: raw.layer_index,
        });
    }
    let conv_in = match zero_invalid {
        Some(f) => tape.mul_const(input, f.to_vec())?,
        None => input,
    };
    let conv = tape.conv2d_maps(conv_in, params.kernel, params.bias, params.kind)?;
    let values = tape.lerp(conv, input, params.beta)?;
    Ok(AttentionLogits {
        values,
        layer_index: raw.layer_index,
    })
}

/// Softmax over `logits`, per-head value projection of `x`, head concat
/// and output projection.
pub fn attention_apply(
    tape: &mut Tape,
    logits: &AttentionLogits,
    x: Var,
    params: &AttentionHeadParams,
    valid: Option<&[bool]>,
    dropout: f64,
    phase: &mut Phase<'_>,
) -> Result<AttentionOutput> {
    let sl = tape.shape(logits.values).to_vec();
    let sx = tape.shape(x).to_vec();
    if sl.len() != 4 || sx.len() != 3 || sl[0] != sx[0] || sl[2] != sx[1] || sl[1] != params.heads {
        return Err(shape_err("attention_apply", &sl, &sx));
    }
    let probs = tape.softmax_masked(logits.values, valid)?;
    let attn = phase.dropout(tape, probs, dropout)?;
    let v = tape.matmul(x, params.wv)?;
    let v = split_heads(tape, v, params.heads)?;
    let heads = tape.matmul(attn, v)?;
    let merged = merge_heads(tape, heads)?;
    let output = tape.linear(merged, params.wo, params.bo)?;
    Ok(AttentionOutput { output, probs })
}

/// Validity flags `(B, K, N, N)` for causal and/or padding masking; `None`
/// when every position is valid.
pub fn attention_mask(
    batch: usize,
    heads: usize,
    n: usize,
    causal: bool,
    lengths: Option<&[usize]>,
) -> Option<Vec<bool>> {
    let padded = lengths.is_some_and(|l| l.iter().any(|&len| len < n));
    if !causal && !padded {
        return None;
    }
    let mut mask = vec![true; batch * heads * n * n];
    for b in 0..batch {
        let len = lengths.map_or(n, |l| l[b]);
        for k in 0..heads {
            for i in 0..n {
                for j in 0..n {
                    mask[((b * heads + k) * n + i) * n + j] = j < len && (!causal || j <= i);
                }
            }
        }
    }
    Some(mask)
}

/// 0/1 factors matching a validity mask.
pub fn mask_factors(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        tape.constant(Tensor::new(shape, data).unwrap())
    }

    fn params(
        tape: &mut Tape,
        d: usize,
        heads: usize,
        wq: &[f64],
        wk: &[f64],
        wv: &[f64],
        wo: &[f64],
    ) -> AttentionHeadParams {
        AttentionHeadParams {
            heads,
            wq: leaf(tape, &[d, d], wq),
            wk: leaf(tape, &[d, d], wk),
            wv: leaf(tape, &[d, d], wv),
            wo: leaf(tape, &[d, d], wo),
            bo: None,
            relative: None,
        }
    }

    #[test]
    fn zero_projections_give_uniform_attention() {
        let mut tape = Tape::new();
        let p = params(
            &mut tape,
            2,
            1,
            &[0.0; 4],
            &[0.0; 4],
            &[1.0, 0.0, 0.0, 1.0],
            &[1.0, 0.0, 0.0, 1.0],
        );
        let x = leaf(&mut tape, &[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let raw = raw_logits(&mut tape, x, &p, 1).unwrap();
        assert!(tape.data(raw.values).iter().all(|&v| v == 0.0));
        let out = attention_apply(&mut tape, &raw, x, &p, None, 0.0, &mut Phase::Eval).unwrap();
        for &pr in tape.data(out.probs) {
            assert!((pr - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_token_has_probability_one() {
        let mut tape = Tape::new();
        let p = params(
            &mut tape,
            2,
            2,
            &[0.3, 0.1, -0.2, 0.5],
            &[0.7, 0.2, 0.1, -0.4],
            &[1.0; 4],
            &[1.0; 4],
        );
        let x = leaf(&mut tape, &[1, 1, 2], &[0.5, -1.0]);
        let raw = raw_logits(&mut tape, x, &p, 1).unwrap();
        assert_eq!(tape.shape(raw.values), &[1, 2, 1, 1]);
        let out = attention_apply(&mut tape, &raw, x, &p, None, 0.0, &mut Phase::Eval).unwrap();
        assert_eq!(tape.data(out.probs), &[1.0, 1.0]);
    }

    #[test]
    fn hand_dot_products_unit_head() {
        // d_h = 1: q = 2, keys 1 and 3 → logits row [2, 6], scale 1/√1
        let mut tape = Tape::new();
        let p = params(&mut tape, 1, 1, &[1.0], &[1.0], &[1.0], &[1.0]);
        let xq = leaf(&mut tape, &[1, 2, 1], &[2.0, 3.0]);
        let raw = raw_logits(&mut tape, xq, &p, 1).unwrap();
        // row 0: q=2 against keys x = [2, 3]; use explicit k matrix instead
        assert_eq!(tape.data(raw.values), &[4.0, 6.0, 6.0, 9.0]);

        let mut tape = Tape::new();
        let q = leaf(&mut tape, &[1, 1, 1, 1], &[2.0]);
        let k = leaf(&mut tape, &[1, 1, 2, 1], &[1.0, 3.0]);
        let s = tape.matmul_t(q, k).unwrap();
        assert_eq!(tape.data(s), &[2.0, 6.0]);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut tape = Tape::new();
        let p = params(&mut tape, 3, 2, &[0.0; 9], &[0.0; 9], &[0.0; 9], &[0.0; 9]);
        let x = leaf(&mut tape, &[1, 2, 3], &[0.0; 6]);
        assert!(matches!(raw_logits(&mut tape, x, &p, 1), Err(Error::Config(_))));
    }

    fn evolve_params(tape: &mut Tape, alpha: f64, beta: f64) -> EvolveParams {
        let mut kernel = Tensor::zeros(&[1, 1, 3, 3]);
        kernel.data_mut()[4] = 1.0;
        EvolveParams {
            alpha,
            beta,
            kernel: tape.constant(kernel),
            bias: leaf(tape, &[1], &[0.0]),
            kind: ConvMaskKind::Encoder,
        }
    }

    #[test]
    fn evolve_degenerate_cases() {
        let mut tape = Tape::new();
        let prev = AttentionLogits {
            values: leaf(&mut tape, &[1, 1, 1, 1], &[2.0]),
            layer_index: 1,
        };
        let raw = AttentionLogits {
            values: leaf(&mut tape, &[1, 1, 1, 1], &[4.0]),
            layer_index: 2,
        };
        let p = evolve_params(&mut tape, 0.0, 0.0);
        let out = evolve(&mut tape, Some(&prev), &raw, &p, None).unwrap();
        assert_eq!(tape.data(out.values), &[4.0]);
        assert_eq!(out.layer_index, 2);

        let p = evolve_params(&mut tape, 0.5, 0.0);
        let out = evolve(&mut tape, Some(&prev), &raw, &p, None).unwrap();
        assert_eq!(tape.data(out.values), &[3.0]);

        // β = 1 with a centre-identity kernel on a nonnegative map
        let m = AttentionLogits {
            values: leaf(&mut tape, &[1, 1, 2, 2], &[0.5, 1.0, 0.0, 2.0]),
            layer_index: 1,
        };
        let p = evolve_params(&mut tape, 0.0, 1.0);
        let out = evolve(&mut tape, None, &m, &p, None).unwrap();
        assert_eq!(tape.data(out.values), &[0.5, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn evolve_shape_mismatch() {
        let mut tape = Tape::new();
        let prev = AttentionLogits {
            values: leaf(&mut tape, &[1, 1, 2, 2], &[0.0; 4]),
            layer_index: 1,
        };
        let raw = AttentionLogits {
            values: leaf(&mut tape, &[1, 1, 1, 1], &[0.0]),
            layer_index: 2,
        };
        let p = evolve_params(&mut tape, 0.5, 0.5);
        assert!(matches!(
            evolve(&mut tape, Some(&prev), &raw, &p, None),
            Err(Error::Shape { .. })
        ));
        let bad = evolve_params(&mut tape, 1.5, 0.5);
        assert!(matches!(
            evolve(&mut tape, None, &raw, &bad, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn value_projection_hand_case() {
        // B=1, K=1, N=2, d=1; logits [[0, ln 3], [0, 0]]
        // row 0 probs [1/4, 3/4], row 1 [1/2, 1/2]; values x·wv = [2, 6]; wo = 0.5
        let mut tape = Tape::new();
        let p = AttentionHeadParams {
            heads: 1,
            wq: leaf(&mut tape, &[1, 1], &[0.0]),
            wk: leaf(&mut tape, &[1, 1], &[0.0]),
            wv: leaf(&mut tape, &[1, 1], &[2.0]),
            wo: leaf(&mut tape, &[1, 1], &[0.5]),
            bo: Some(leaf(&mut tape, &[1], &[1.0])),
            relative: None,
        };
        let x = leaf(&mut tape, &[1, 2, 1], &[1.0, 3.0]);
        let logits = AttentionLogits {
            values: leaf(&mut tape, &[1, 1, 2, 2], &[0.0, math::ln(3.0), 0.0, 0.0]),
            layer_index: 1,
        };
        let out = attention_apply(&mut tape, &logits, x, &p, None, 0.0, &mut Phase::Eval).unwrap();
        let y = tape.data(out.output);
        // row 0: (0.25·2 + 0.75·6)·0.5 + 1 = 3.5 ; row 1: 4·0.5 + 1 = 3
        assert!((y[0] - 3.5).abs() < 1e-12 && (y[1] - 3.0).abs() < 1e-12, "{y:?}");
    }

    #[test]
    fn one_hot_attention_selects_value_row() {
        let mut tape = Tape::new();
        let p = params(
            &mut tape,
            2,
            1,
            &[0.0; 4],
            &[0.0; 4],
            &[1.0, 0.0, 0.0, 1.0],
            &[2.0, 0.0, 0.0, 3.0],
        );
        let x = leaf(&mut tape, &[1, 2, 2], &[1.0, 2.0, 5.0, 7.0]);
        let logits = AttentionLogits {
            values: leaf(&mut tape, &[1, 1, 2, 2], &[0.0, 0.0, 0.0, 0.0]),
            layer_index: 1,
        };
        let mask = [false, true, true, false];
        let out = attention_apply(&mut tape, &logits, x, &p, Some(&mask), 0.0, &mut Phase::Eval).unwrap();
        assert_eq!(tape.data(out.output), &[10.0, 21.0, 2.0, 6.0]);
    }

    #[test]
    fn causal_mask_layout() {
        let m = attention_mask(1, 1, 3, true, Some(&[2])).unwrap();
        assert_eq!(m, [true, false, false, true, true, false, true, true, false]);
        assert!(attention_mask(2, 2, 3, false, None).is_none());
        assert!(attention_mask(1, 1, 3, false, Some(&[3])).is_none());
    }
}
