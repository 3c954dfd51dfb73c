//! 3×3 convolution over per-head attention maps, with the three
//! sequence-to-sequence mask variants.
//!
//! Every variant is expressed as a list of [`Tap`]s: kernel position plus
//! the (row, column) read offset relative to the output pixel. The
//! down-right shift of the decoder mask and the one-column shift of the
//! encoder-decoder mask are folded into those offsets.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Which attention a convolution instance serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ConvMaskKind {
    /// Encoder self-attention: the full 3×3 window.
    #[default]
    Encoder,
    /// Decoder self-attention: six taps, shifted one pixel down and right.
    DecoderSelf,
    /// Encoder-decoder attention: full window shifted one pixel right.
    EncoderDecoder,
}

/// One active kernel position and the input offset it reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tap {
    /// Kernel position `row * 3 + col`.
    pub index: usize,
    pub dr: isize,
    pub dc: isize,
}

impl ConvMaskKind {
    pub const ALL: [ConvMaskKind; 3] = [Self::Encoder, Self::DecoderSelf, Self::EncoderDecoder];

    /// Whether kernel position (row `kr`, column `kc`), each in `0..3`, is
    /// trainable for this mask kind.
    pub fn tap_active(self, kr: usize, kc: usize) -> bool {
        match self {
            // upper-right triangle (row offset < column offset) is masked
            Self::DecoderSelf => kr >= kc,
            Self::Encoder | Self::EncoderDecoder => true,
        }
    }

    /// Active taps with their read offsets.
    pub fn taps(self) -> Vec<Tap> {
        let (shift_r, shift_c) = match self {
            Self::Encoder => (0, 0),
            Self::DecoderSelf => (1, 1),
            Self::EncoderDecoder => (0, 1),
        };
        let mut taps = Vec::with_capacity(9);
        for kr in 0..3 {
            for kc in 0..3 {
                if self.tap_active(kr, kc) {
                    taps.push(Tap {
                        index: kr * 3 + kc,
                        dr: kr as isize - 1 - shift_r,
                        dc: kc as isize - 1 - shift_c,
                    });
                }
            }
        }
        taps
    }

    /// 0/1 multiplier per kernel position; used to keep masked taps at zero.
    pub fn tap_mask(self) -> [f64; 9] {
        let mut m = [0.0; 9];
        for t in self.taps() {
            m[t.index] = 1.0;
        }
        m
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::DecoderSelf => "decoder-self",
            Self::EncoderDecoder => "encoder-decoder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub b: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn dims(shape: &[usize]) -> Dims {
    Dims {
        b: shape[0],
        k: shape[1],
        n: shape[2],
    }
}

const PAD: usize = 2;

// Planes are handled in a zero-bordered layout of row stride `n + 2·PAD`, so
// each tap becomes one flat shifted axpy or dot. Output planes keep `n` rows
// of that stride; only the interior columns are meaningful.
struct Padded {
    n: usize,
    w: usize,
}

impl Padded {
    fn new(n: usize) -> Self {
        Padded { n, w: n + 2 * PAD }
    }

    fn input_len(&self) -> usize {
        self.w * self.w
    }

    fn output_len(&self) -> usize {
        self.n * self.w
    }

    // Flat output positions that can hold interior columns.
    fn range(&self) -> core::ops::Range<usize> {
        PAD..self.output_len() - PAD
    }

    // Range of the padded input read by `tap` over `self.range()`.
    fn source(&self, tap: &Tap) -> core::ops::Range<usize> {
        assert!(tap.dr.unsigned_abs() <= PAD && tap.dc.unsigned_abs() <= PAD);
        let s = (PAD as isize + tap.dr) * self.w as isize + tap.dc;
        let r = self.range();
        (r.start as isize + s) as usize..(r.end as isize + s) as usize
    }

    fn pad_input(&self, plane: &[f64], dst: &mut [f64]) {
        for (i, row) in plane.chunks_exact(self.n).enumerate() {
            let at = (i + PAD) * self.w + PAD;
            dst[at..at + self.n].copy_from_slice(row);
        }
    }

    fn pad_output(&self, plane: &[f64], dst: &mut [f64]) {
        for (i, row) in plane.chunks_exact(self.n).enumerate() {
            let at = i * self.w + PAD;
            dst[at..at + self.n].copy_from_slice(row);
        }
    }

    fn unpad(&self, src: &[f64], row_offset: usize, dst: &mut [f64], add: bool) {
        for (i, row) in dst.chunks_exact_mut(self.n).enumerate() {
            let at = (i + row_offset) * self.w + PAD;
            let s = &src[at..at + self.n];
            if add {
                row.iter_mut().zip(s).for_each(|(d, v)| *d += v);
            } else {
                row.copy_from_slice(s);
            }
        }
    }
}

/// Pre-activation convolution `bias + Σ taps`, before the ReLU.
pub fn conv_maps_linear(x: &[f64], shape: [usize; 4], kernel: &[f64], bias: &[f64], taps: &[Tap]) -> Vec<f64> {
    let [b, k, n, n2] = shape;
    debug_assert_eq!(n, n2);
    let plane = n * n;
    let pd = Padded::new(n);
    let sources: Vec<_> = taps.iter().map(|t| pd.source(t)).collect();
    let range = pd.range();
    let mut xp = vec![0.0; k * pd.input_len()];
    let mut acc = vec![0.0; pd.output_len()];
    let mut out = vec![0.0; b * k * plane];
    for bi in 0..b {
        for c in 0..k {
            let src = &x[(bi * k + c) * plane..(bi * k + c + 1) * plane];
            pd.pad_input(src, &mut xp[c * pd.input_len()..(c + 1) * pd.input_len()]);
        }
        for o in 0..k {
            acc.iter_mut().for_each(|e| *e = bias[o]);
            for c in 0..k {
                let src = &xp[c * pd.input_len()..(c + 1) * pd.input_len()];
                for (tap, s) in taps.iter().zip(&sources) {
                    let w = kernel[(o * k + c) * 9 + tap.index];
                    axpy(w, &src[s.clone()], &mut acc[range.clone()]);
                }
            }
            pd.unpad(&acc, 0, &mut out[(bi * k + o) * plane..(bi * k + o + 1) * plane], false);
        }
    }
    out
}

pub(crate) fn relu_grad(g: &[f64], active: &[bool]) -> Vec<f64> {
    g.iter().zip(active).map(|(&v, &a)| if a { v } else { 0.0 }).collect()
}

pub(crate) fn backward_input(kind: ConvMaskKind, d: Dims, kernel: &[f64], gz: &[f64], gx: &mut [f64]) {
    let (k, n) = (d.k, d.n);
    let plane = n * n;
    let taps = kind.taps();
    let pd = Padded::new(n);
    let range = pd.range();
    let mut gp = vec![0.0; k * pd.output_len()];
    let mut acc = vec![0.0; pd.input_len()];
    for bi in 0..d.b {
        for o in 0..k {
            let go = &gz[(bi * k + o) * plane..(bi * k + o + 1) * plane];
            pd.pad_output(go, &mut gp[o * pd.output_len()..(o + 1) * pd.output_len()]);
        }
        for c in 0..k {
            acc.iter_mut().for_each(|e| *e = 0.0);
            for o in 0..k {
                let go = &gp[o * pd.output_len()..(o + 1) * pd.output_len()];
                for tap in &taps {
                    let s = pd.source(tap);
                    let w = kernel[(o * k + c) * 9 + tap.index];
                    axpy(w, &go[range.clone()], &mut acc[s]);
                }
            }
            pd.unpad(&acc, PAD, &mut gx[(bi * k + c) * plane..(bi * k + c + 1) * plane], true);
        }
    }
}

pub(crate) fn backward_kernel(kind: ConvMaskKind, d: Dims, x: &[f64], gz: &[f64], gk: &mut [f64]) {
    let (k, n) = (d.k, d.n);
    let plane = n * n;
    let taps = kind.taps();
    let pd = Padded::new(n);
    let range = pd.range();
    let mut xp = vec![0.0; pd.input_len()];
    let mut gp = vec![0.0; k * pd.output_len()];
    for bi in 0..d.b {
        for o in 0..k {
            let go = &gz[(bi * k + o) * plane..(bi * k + o + 1) * plane];
            pd.pad_output(go, &mut gp[o * pd.output_len()..(o + 1) * pd.output_len()]);
        }
        for c in 0..k {
            pd.pad_input(&x[(bi * k + c) * plane..(bi * k + c + 1) * plane], &mut xp);
            for o in 0..k {
                let go = &gp[o * pd.output_len()..(o + 1) * pd.output_len()];
                for tap in &taps {
                    let s = pd.source(tap);
                    gk[(o * k + c) * 9 + tap.index] += dot(&go[range.clone()], &xp[s]);
                }
            }
        }
    }
}

pub(crate) fn backward_bias(d: Dims, gz: &[f64], gb: &mut [f64]) {
    let plane = d.n * d.n;
    for bi in 0..d.b {
        for o in 0..d.k {
            gb[o] += gz[(bi * d.k + o) * plane..(bi * d.k + o + 1) * plane]
                .iter()
                .sum::<f64>();
        }
    }
}

impl Tape {
    /// `ReLU(conv(A) + bias)` over attention maps `A` of shape
    /// `(B, K, N, N)`, with a `(K, K, 3, 3)` kernel and zero padding.
    pub fn conv2d_maps(&mut self, x: Var, kernel: Var, bias: Var, kind: ConvMaskKind) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 || sx[2] != sx[3] {
            return Err(Error::Contract(format!("conv2d_maps expects (B, K, N, N), got {sx:?}")));
        }
        let k = sx[1];
        let sk = self.shape(kernel);
        if sk != [k, k, 3, 3] {
            return Err(Error::Config(format!(
                "attention-map kernel must be ({k}, {k}, 3, 3), got {sk:?}"
            )));
        }
        if self.shape(bias) != [k] {
            return Err(Error::Config(format!("attention-map bias must have length {k}")));
        }
        let shape = [sx[0], sx[1], sx[2], sx[3]];
        let pre = conv_maps_linear(self.data(x), shape, self.data(kernel), self.data(bias), &kind.taps());
        let active: Vec<bool> = pre.iter().map(|&v| v > 0.0).collect();
        let out: Vec<f64> = pre.into_iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::from_parts(shape.to_vec(), out);
        Ok(self.push(
            value,
            Op::Conv2dMaps {
                x,
                kernel,
                bias,
                kind,
                active,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;

    fn run(kind: ConvMaskKind, x: &Tensor, kernel: &Tensor, bias: &[f64]) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(kernel.clone());
        let bv = tape.constant(Tensor::new(&[bias.len()], bias).unwrap());
        let y = tape.conv2d_maps(xv, kv, bv, kind).unwrap();
        tape.value(y).clone()
    }

    fn center_identity() -> Tensor {
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        k
    }

    #[test]
    fn encoder_identity_on_nonnegative_maps() {
        let x = Tensor::new(&[1, 1, 3, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, 0.25]).unwrap();
        assert_eq!(run(ConvMaskKind::Encoder, &x, &center_identity(), &[0.0]), x);
    }

    #[test]
    fn encoder_all_ones_zero_padded() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = run(ConvMaskKind::Encoder, &x, &Tensor::full(&[1, 1, 3, 3], 1.0), &[0.0]);
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn decoder_keeps_six_taps() {
        let taps = ConvMaskKind::DecoderSelf.taps();
        assert_eq!(taps.len(), 6);
        // kernel-relative offsets (row, col) before the down-right shift
        let mut offsets: Vec<(isize, isize)> = taps.iter().map(|t| (t.dr + 1, t.dc + 1)).collect();
        offsets.sort();
        assert_eq!(offsets, [(-1, -1), (0, -1), (0, 0), (1, -1), (1, 0), (1, 1)]);
        assert_eq!(ConvMaskKind::Encoder.taps().len(), 9);
        assert_eq!(ConvMaskKind::EncoderDecoder.taps().len(), 9);
    }

    #[test]
    fn decoder_output_formula() {
        // O(i,j) = Σ_{dr ≥ dc} w[dr,dc] A(i−1+dr, j−1+dc), offsets in {−1,0,1}
        let n = 5;
        let a: Vec<f64> = (0..n * n).map(|i| ((i * 7 % 11) as f64) * 0.1 + 0.05).collect();
        let w: Vec<f64> = (0..9).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let y = run(
            ConvMaskKind::DecoderSelf,
            &Tensor::new(&[1, 1, n, n], &a).unwrap(),
            &Tensor::new(&[1, 1, 3, 3], &w).unwrap(),
            &[0.0],
        );
        for i in 0..n as isize {
            for j in 0..n as isize {
                let mut want = 0.0;
                for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        if dr < dc {
                            continue;
                        }
                        let (r, c) = (i - 1 + dr, j - 1 + dc);
                        if r >= 0 && c >= 0 && r < n as isize && c < n as isize {
                            want += w[((dr + 1) * 3 + dc + 1) as usize] * a[(r * n as isize + c) as usize];
                        }
                    }
                }
                assert!((y.data()[(i * n as isize + j) as usize] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_decoder_reads_shifted_window() {
        // standard conv evaluated at (i, j−1)
        let n = 4;
        let a: Vec<f64> = (0..n * n).map(|i| i as f64 * 0.25).collect();
        let ones = Tensor::full(&[1, 1, 3, 3], 1.0);
        let x = Tensor::new(&[1, 1, n, n], &a).unwrap();
        let enc = run(ConvMaskKind::Encoder, &x, &ones, &[0.0]);
        let ed = run(ConvMaskKind::EncoderDecoder, &x, &ones, &[0.0]);
        for i in 0..n {
            for j in 0..n {
                let want = if j == 0 {
                    // window centred on column −1: only column 0 is in range
                    (i.saturating_sub(1)..=(i + 1).min(n - 1)).map(|r| a[r * n]).sum()
                } else {
                    enc.data()[i * n + j - 1]
                };
                assert!((ed.data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_3x3_kernel_is_config_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(
            tape.conv2d_maps(x, k, b, ConvMaskKind::Encoder),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grad_check_every_kind() {
        let (b, k, n) = (2, 2, 4);
        let x: Vec<f64> = (0..b * k * n * n).map(|i| ((i as f64) * 0.913).sin()).collect();
        let kern: Vec<f64> = (0..k * k * 9).map(|i| ((i as f64) * 0.37).cos() * 0.5).collect();
        let bias = [0.2, -0.1];
        let w: Vec<f64> = (0..b * k * n * n).map(|i| ((i as f64) * 1.7).cos()).collect();
        for kind in ConvMaskKind::ALL {
            let errs = grad_check_many(
                |tape, v| {
                    let y = tape.conv2d_maps(v[0], v[1], v[2], kind)?;
                    let yw = tape.mul_const(y, w.clone())?;
                    Ok(tape.sum(yw))
                },
                &[
                    Tensor::new(&[b, k, n, n], &x).unwrap(),
                    Tensor::new(&[k, k, 3, 3], &kern).unwrap(),
                    Tensor::new(&[k], &bias).unwrap(),
                ],
                1e-5,
            );
            assert!(errs.iter().all(|&e| e < 1e-6), "{kind:?}: {errs:?}");
        }
    }

    #[test]
    fn masked_taps_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let k = tape.leaf(Tensor::full(&[1, 1, 3, 3], 0.5), true);
        let b = tape.leaf(Tensor::zeros(&[1]), true);
        let y = tape.conv2d_maps(x, k, b, ConvMaskKind::DecoderSelf).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        let gk = g.get(k).unwrap();
        for kr in 0..3 {
            for kc in 0..3 {
                if kr < kc {
                    assert_eq!(gk[kr * 3 + kc], 0.0);
                } else {
                    assert!(gk[kr * 3 + kc] > 0.0);
                }
            }
        }
    }
}
