//! Positional encodings: absolute tables added to the input embedding and
//! 1-D relative logits `r_ij = q_i · e_clip(i−j)`.

use alloc::format;
use alloc::vec;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};
use crate::math;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PositionalKind {
    /// Trainable `(T, d)` table added to the embedded input.
    #[default]
    LearnedAbsolute,
    /// Fixed sine/cosine table added to the embedded input.
    Sinusoidal,
    /// Trainable relative-offset table added to the attention logits.
    Relative1D,
}

impl PositionalKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::LearnedAbsolute => "learned",
            Self::Sinusoidal => "sinusoidal",
            Self::Relative1D => "relative",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::LearnedAbsolute, Self::Sinusoidal, Self::Relative1D]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

/// Standard sine/cosine table of shape `(len, d)`.
pub fn sinusoidal_table(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / libm::pow(10_000.0, 2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { math::sin(angle) } else { math::cos(angle) };
        }
    }
    Tensor::from_parts(vec![len, d], data)
}

/// Row of the relative table used for query `i` and key `j`.
pub fn relative_index(i: usize, j: usize, max_rel: usize) -> usize {
    let off = (i as isize - j as isize).clamp(-(max_rel as isize), max_rel as isize);
    (off + max_rel as isize) as usize
}

pub(crate) fn relative_backward_query(dims: [usize; 4], max_rel: usize, table: &[f64], g: &[f64], gq: &mut [f64]) {
    let [b, k, n, dh] = dims;
    for row in 0..b * k {
        for i in 0..n {
            let dst = &mut gq[(row * n + i) * dh..(row * n + i + 1) * dh];
            for j in 0..n {
                let gv = g[(row * n + i) * n + j];
                let e = relative_index(i, j, max_rel);
                axpy(gv, &table[e * dh..(e + 1) * dh], dst);
            }
        }
    }
}

pub(crate) fn relative_backward_table(dims: [usize; 4], max_rel: usize, q: &[f64], g: &[f64], gt: &mut [f64]) {
    let [b, k, n, dh] = dims;
    for row in 0..b * k {
        for i in 0..n {
            let qi = &q[(row * n + i) * dh..(row * n + i + 1) * dh];
            for j in 0..n {
                let gv = g[(row * n + i) * n + j];
                let e = relative_index(i, j, max_rel);
                axpy(gv, qi, &mut gt[e * dh..(e + 1) * dh]);
            }
        }
    }
}

impl Tape {
    /// Relative logits `R[b, k, i, j] = q[b, k, i] · table[clip(i − j)]`
    /// for queries `(B, K, N, d_h)` and a `(2·max_rel + 1, d_h)` table whose
    /// row `max_rel + o` holds the embedding of offset `o`.
    pub fn relative_logits_1d(&mut self, q: Var, table: Var, max_rel: usize) -> Result<Var> {
        let (sq, st) = (self.shape(q), self.shape(table));
        if sq.len() != 4 || st != [2 * max_rel + 1, sq[3]] {
            return Err(Error::Config(format!(
                "relative table {st:?} does not match queries {sq:?} with max distance {max_rel}"
            )));
        }
        let dims = [sq[0], sq[1], sq[2], sq[3]];
        let [b, k, n, dh] = dims;
        let rows = 2 * max_rel + 1;
        let (qd, td) = (self.data(q), self.data(table));
        let mut out = vec![0.0; b * k * n * n];
        let mut proj = vec![0.0; rows];
        for row in 0..b * k {
            for i in 0..n {
                let qi = &qd[(row * n + i) * dh..(row * n + i + 1) * dh];
                for (e, p) in proj.iter_mut().enumerate() {
                    *p = dot(qi, &td[e * dh..(e + 1) * dh]);
                }
                for j in 0..n {
                    out[(row * n + i) * n + j] = proj[relative_index(i, j, max_rel)];
                }
            }
        }
        let value = Tensor::from_parts(vec![b, k, n, n], out);
        Ok(self.push(value, Op::RelativeLogits { q, table, max_rel }))
    }
}

/// Relative logits for tables that are not on a tape; used by analysis code.
pub fn relative_logits_values(q: &Tensor, table: &Tensor, max_rel: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let tv = tape.constant(table.clone());
    let r = tape.relative_logits_1d(qv, tv, max_rel)?;
    Ok(tape.value(r).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;
    use alloc::vec::Vec;

    #[test]
    fn zero_table_gives_zero_logits() {
        let q = Tensor::full(&[1, 2, 3, 4], 0.7);
        let t = Tensor::zeros(&[5, 4]);
        let r = relative_logits_values(&q, &t, 2).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_token_hand_case() {
        // e_{-1} = 2, e_0 = 1, e_{+1} = 3; q = 1 everywhere
        let q = Tensor::full(&[1, 1, 2, 1], 1.0);
        let t = Tensor::new(&[3, 1], &[2.0, 1.0, 3.0]).unwrap();
        let r = relative_logits_values(&q, &t, 1).unwrap();
        assert_eq!(r.data(), &[1.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn offsets_are_clipped() {
        assert_eq!(relative_index(5, 0, 2), 4);
        assert_eq!(relative_index(0, 5, 2), 0);
        assert_eq!(relative_index(3, 3, 2), 2);
    }

    #[test]
    fn wrong_table_is_config_error() {
        let q = Tensor::full(&[1, 1, 2, 2], 1.0);
        let t = Tensor::zeros(&[3, 3]);
        assert!(matches!(relative_logits_values(&q, &t, 1), Err(Error::Config(_))));
    }

    #[test]
    fn sinusoidal_first_row() {
        let t = sinusoidal_table(3, 4);
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn grad_check_relative() {
        let q: Vec<f64> = (0..2 * 2 * 5 * 3).map(|i| ((i as f64) * 0.43).sin()).collect();
        let t: Vec<f64> = (0..5 * 3).map(|i| ((i as f64) * 0.71).cos()).collect();
        let w: Vec<f64> = (0..2 * 2 * 5 * 5).map(|i| ((i as f64) * 1.3).sin()).collect();
        let errs = grad_check_many(
            |tape, v| {
                let r = tape.relative_logits_1d(v[0], v[1], 2)?;
                let rw = tape.mul_const(r, w.clone())?;
                Ok(tape.sum(rw))
            },
            &[
                Tensor::new(&[2, 2, 5, 3], &q).unwrap(),
                Tensor::new(&[5, 3], &t).unwrap(),
            ],
            1e-5,
        );
        assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
    }
}
