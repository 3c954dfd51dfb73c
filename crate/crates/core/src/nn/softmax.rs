//! Row softmax over the last dimension with an optional validity mask.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Softmax of each length-`n` row of `logits`. Entries whose `valid` flag is
/// false get probability exactly 0 and never enter the exponentials, so a
/// `-inf` sentinel is never needed.
pub fn softmax_rows(logits: &[f64], n: usize, valid: Option<&[bool]>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits.len()];
    for (row, (src, dst)) in logits.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
        let mask = valid.map(|m| &m[row * n..(row + 1) * n]);
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in src.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMasked { row });
        }
        let mut total = 0.0;
        for j in 0..n {
            if keep(j) {
                let e = math::exp(src[j] - max);
                dst[j] = e;
                total += e;
            }
        }
        let inv = 1.0 / total;
        dst.iter_mut().for_each(|e| *e *= inv);
    }
    Ok(out)
}

pub(crate) fn backward(probs: &[f64], g: &[f64], n: usize, gx: &mut [f64]) {
    for ((p, gr), dst) in probs.chunks_exact(n).zip(g.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
        let inner: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            dst[j] += p[j] * (gr[j] - inner);
        }
    }
}

impl Tape {
    /// Softmax over the last dimension. `valid`, when given, has one flag
    /// per element of `x`; every row needs at least one valid entry.
    pub fn softmax_masked(&mut self, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let v = self.value(x);
        if let Some(m) = valid {
            if m.len() != v.len() {
                return Err(shape_err("softmax_masked", v.shape(), &[m.len()]));
            }
        }
        let out = softmax_rows(v.data(), v.last_dim(), valid)?;
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(out, Op::Softmax { x }))
    }
}
