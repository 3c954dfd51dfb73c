//! Width-3 dilated 1-D convolutions over `(B, T, C)` sequences.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// How the three taps of a dilated layer are placed around step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DilatedPadding {
    /// Taps at `t − s, t, t + s`; zero padding of `s` on both ends.
    #[default]
    Symmetric,
    /// Taps at `t − 2s, t − s, t`; zero padding of `2s` on the left.
    Causal,
}

impl DilatedPadding {
    fn offset(self, tap: usize, dilation: usize) -> isize {
        let s = dilation as isize;
        match self {
            Self::Symmetric => (tap as isize - 1) * s,
            Self::Causal => (tap as isize - 2) * s,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Symmetric => "symmetric",
            Self::Causal => "causal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Symmetric, Self::Causal].into_iter().find(|p| p.name() == s)
    }
}

/// Dilation of layer `l` (0-based): 1, 2, 4, …
pub fn dilation(layer: usize) -> usize {
    1 << layer
}

/// Number of input steps one output step can see after `layers` layers.
pub fn receptive_field(layers: usize) -> usize {
    1 + 2 * ((1 << layers) - 1)
}

pub(crate) struct Geometry {
    pub b: usize,
    pub t: usize,
    pub c_in: usize,
    pub c_out: usize,
    offsets: [isize; 3],
}

impl Geometry {
    pub(crate) fn new(x: &[usize], kernel: &[usize], dilation: usize, padding: DilatedPadding) -> Self {
        Geometry {
            b: x[0],
            t: x[1],
            c_in: x[2],
            c_out: kernel[0],
            offsets: [0, 1, 2].map(|k| padding.offset(k, dilation)),
        }
    }

    // (output t range, source start) for tap k
    fn range(&self, k: usize) -> Option<(usize, usize, usize)> {
        let off = self.offsets[k];
        let lo = (-off).max(0) as usize;
        let hi = (self.t as isize - off).clamp(0, self.t as isize) as usize;
        (lo < hi).then(|| (lo, hi, (lo as isize + off) as usize))
    }
}

// (C_out, C_in, 3) → per-tap (C_in, C_out) blocks
fn taps_major(kernel: &[f64], c_out: usize, c_in: usize) -> Vec<f64> {
    let mut w = vec![0.0; 3 * c_in * c_out];
    for o in 0..c_out {
        for c in 0..c_in {
            for k in 0..3 {
                w[(k * c_in + c) * c_out + o] = kernel[(o * c_in + c) * 3 + k];
            }
        }
    }
    w
}

fn forward(g: &Geometry, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let (t, ci, co) = (g.t, g.c_in, g.c_out);
    let w = taps_major(kernel, co, ci);
    let mut out = vec![0.0; g.b * t * co];
    for row in out.chunks_exact_mut(co) {
        row.copy_from_slice(bias);
    }
    for bi in 0..g.b {
        for k in 0..3 {
            let Some((lo, hi, src0)) = g.range(k) else { continue };
            let rows = hi - lo;
            let src = &x[(bi * t + src0) * ci..(bi * t + src0 + rows) * ci];
            let dst = &mut out[(bi * t + lo) * co..(bi * t + hi) * co];
            gemm_nn(rows, ci, co, src, &w[k * ci * co..(k + 1) * ci * co], dst);
        }
    }
    out
}

pub(crate) fn backward_input(g: &Geometry, kernel: &[f64], gy: &[f64], gx: &mut [f64]) {
    let (t, ci, co) = (g.t, g.c_in, g.c_out);
    let w = taps_major(kernel, co, ci);
    for bi in 0..g.b {
        for k in 0..3 {
            let Some((lo, hi, src0)) = g.range(k) else { continue };
            let rows = hi - lo;
            let go = &gy[(bi * t + lo) * co..(bi * t + hi) * co];
            let dst = &mut gx[(bi * t + src0) * ci..(bi * t + src0 + rows) * ci];
            gemm_nt(rows, co, ci, go, &w[k * ci * co..(k + 1) * ci * co], dst);
        }
    }
}

pub(crate) fn backward_kernel(g: &Geometry, x: &[f64], gy: &[f64], gk: &mut [f64]) {
    let (t, ci, co) = (g.t, g.c_in, g.c_out);
    let mut gw = vec![0.0; 3 * ci * co];
    for bi in 0..g.b {
        for k in 0..3 {
            let Some((lo, hi, src0)) = g.range(k) else { continue };
            let rows = hi - lo;
            let go = &gy[(bi * t + lo) * co..(bi * t + hi) * co];
            let src = &x[(bi * t + src0) * ci..(bi * t + src0 + rows) * ci];
            gemm_tn(ci, rows, co, src, go, &mut gw[k * ci * co..(k + 1) * ci * co]);
        }
    }
    for o in 0..co {
        for c in 0..ci {
            for k in 0..3 {
                gk[(o * ci + c) * 3 + k] += gw[(k * ci + c) * co + o];
            }
        }
    }
}

impl Tape {
    /// One width-3 dilated convolution: `x (B, T, C_in)`, kernel
    /// `(C_out, C_in, 3)`, bias `(C_out)`. Output length stays `T`.
    pub fn conv1d_dilated(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
        padding: DilatedPadding,
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 3 || sk.len() != 3 || sk[2] != 3 || sk[1] != sx[2] {
            return Err(Error::Config(format!(
                "dilated conv expects x (B, T, C_in) and kernel (C_out, C_in, 3); got {sx:?} and {sk:?}"
            )));
        }
        if self.shape(bias) != [sk[0]] || dilation == 0 {
            return Err(Error::Config(format!(
                "dilated conv bias/dilation invalid (dilation {dilation})"
            )));
        }
        let geom = Geometry::new(sx, sk, dilation, padding);
        let out = forward(&geom, self.data(x), self.data(kernel), self.data(bias));
        let value = Tensor::from_parts(vec![geom.b, geom.t, geom.c_out], out);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                kernel,
                bias,
                dilation,
                padding,
            },
        ))
    }
}

/// Stack of dilated layers with dilations 1, 2, 4, …; ReLU after every
/// layer but the last. `layers` holds `(kernel, bias)` per layer.
pub fn dilated_conv1d_stack(tape: &mut Tape, x: Var, layers: &[(Var, Var)], padding: DilatedPadding) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Config("dilated stack needs at least one layer".into()));
    }
    let mut h = x;
    for (l, &(kernel, bias)) in layers.iter().enumerate() {
        h = tape.conv1d_dilated(h, kernel, bias, dilation(l), padding)?;
        if l + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;

    struct Stack {
        kernels: Vec<Tensor>,
        biases: Vec<Tensor>,
    }

    fn stack(m: usize, c: usize, seed: f64) -> Stack {
        let kernels = (0..m)
            .map(|l| {
                let data: Vec<f64> = (0..c * c * 3).map(|i| ((i + l * 31) as f64 * seed).sin()).collect();
                Tensor::new(&[c, c, 3], &data).unwrap()
            })
            .collect();
        let biases = (0..m).map(|_| Tensor::zeros(&[c])).collect();
        Stack { kernels, biases }
    }

    fn run(x: &Tensor, s: &Stack, padding: DilatedPadding) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let layers: Vec<(Var, Var)> = s
            .kernels
            .iter()
            .zip(&s.biases)
            .map(|(k, b)| (tape.constant(k.clone()), tape.constant(b.clone())))
            .collect();
        let y = dilated_conv1d_stack(&mut tape, xv, &layers, padding).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn identity_center_tap() {
        let mut k = Tensor::zeros(&[1, 1, 3]);
        k.data_mut()[1] = 1.0;
        let s = Stack {
            kernels: vec![k],
            biases: vec![Tensor::zeros(&[1])],
        };
        let x = Tensor::new(&[1, 4, 1], &[-1.0, 2.0, -3.0, 4.0]).unwrap();
        assert_eq!(run(&x, &s, DilatedPadding::Symmetric), x);
    }

    #[test]
    fn receptive_field_formula() {
        assert_eq!(receptive_field(1), 3);
        assert_eq!(receptive_field(3), 15);
        assert_eq!((0..4).map(dilation).collect::<Vec<_>>(), [1, 2, 4, 8]);
    }

    // Steps of the output that change when input step `probe` is perturbed.
    fn reached(padding: DilatedPadding, probe: usize) -> Vec<usize> {
        let (t, c) = (32, 2);
        let mut s = stack(3, c, 0.77);
        // Positive weights keep every ReLU open so reachability is structural.
        for k in &mut s.kernels {
            k.data_mut().iter_mut().for_each(|w| *w = w.abs() + 0.1);
        }
        let base = Tensor::full(&[1, t, c], 1.0);
        let mut bumped = base.clone();
        bumped.data_mut()[probe * c] += 1.0;
        let (y0, y1) = (run(&base, &s, padding), run(&bumped, &s, padding));
        (0..t)
            .filter(|&ti| (0..c).any(|o| y0.data()[ti * c + o] != y1.data()[ti * c + o]))
            .collect()
    }

    #[test]
    fn causal_probe_reaches_fourteen_steps() {
        let r = reached(DilatedPadding::Causal, 0);
        assert!(r.contains(&14));
        assert!(!r.contains(&15));
        assert_eq!(r, (0..15).collect::<Vec<_>>());
    }

    #[test]
    fn symmetric_probe_reaches_seven_each_side() {
        let r = reached(DilatedPadding::Symmetric, 16);
        assert_eq!(r, (9..24).collect::<Vec<_>>());
        assert_eq!(r.len(), receptive_field(3));
    }

    #[test]
    fn translation_equivariant_in_interior() {
        let (t, c) = (40, 3);
        let s = stack(3, c, 0.41);
        let x: Vec<f64> = (0..(t + 1) * c).map(|i| ((i as f64) * 0.53).sin()).collect();
        let a = Tensor::new(&[1, t, c], &x[..t * c]).unwrap();
        let b = Tensor::new(&[1, t, c], &x[c..]).unwrap();
        for padding in [DilatedPadding::Symmetric, DilatedPadding::Causal] {
            let (ya, yb) = (run(&a, &s, padding), run(&b, &s, padding));
            // positions whose receptive field avoids both boundaries
            for ti in 15..t - 15 {
                for o in 0..c {
                    assert_eq!(ya.data()[(ti + 1) * c + o], yb.data()[ti * c + o]);
                }
            }
        }
    }

    #[test]
    fn grad_check_layer() {
        let (b, t, ci, co) = (2, 9, 3, 2);
        let x: Vec<f64> = (0..b * t * ci).map(|i| ((i as f64) * 0.61).sin()).collect();
        let k: Vec<f64> = (0..co * ci * 3).map(|i| ((i as f64) * 0.29).cos()).collect();
        let w: Vec<f64> = (0..b * t * co).map(|i| ((i as f64) * 1.9).sin()).collect();
        for padding in [DilatedPadding::Symmetric, DilatedPadding::Causal] {
            for dil in [1, 2, 4] {
                let errs = grad_check_many(
                    |tape, v| {
                        let y = tape.conv1d_dilated(v[0], v[1], v[2], dil, padding)?;
                        let yw = tape.mul_const(y, w.clone())?;
                        Ok(tape.sum(yw))
                    },
                    &[
                        Tensor::new(&[b, t, ci], &x).unwrap(),
                        Tensor::new(&[co, ci, 3], &k).unwrap(),
                        Tensor::new(&[co], &[0.1, -0.2]).unwrap(),
                    ],
                    1e-5,
                );
                assert!(errs.iter().all(|&e| e < 1e-6), "{padding:?} {dil}: {errs:?}");
            }
        }
    }
}
