use alloc::format;
use alloc::vec;

use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub(crate) fn backward_input(xhat: &[f64], inv_std: &[f64], gamma: &[f64], g: &[f64], gx: &mut [f64]) {
    let d = gamma.len();
    let inv_d = 1.0 / d as f64;
    for (row, ((h, gr), dst)) in xhat
        .chunks_exact(d)
        .zip(g.chunks_exact(d))
        .zip(gx.chunks_exact_mut(d))
        .enumerate()
    {
        let mut mean_dh = 0.0;
        let mut mean_dh_h = 0.0;
        for j in 0..d {
            let dh = gr[j] * gamma[j];
            mean_dh += dh;
            mean_dh_h += dh * h[j];
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        let s = inv_std[row];
        for j in 0..d {
            dst[j] += s * (gr[j] * gamma[j] - mean_dh - h[j] * mean_dh_h);
        }
    }
}

impl Tape {
    /// Normalizes each last-dimension row to zero mean and unit variance,
    /// then applies `gamma · x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        if d < 2 || eps <= 0.0 {
            return Err(Error::Contract(format!(
                "layer_norm needs d >= 2 and eps > 0 (d={d}, eps={eps})"
            )));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", v.shape(), self.shape(gamma)));
        }
        let rows = v.len() / d;
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; rows];
        for (r, (src, dst)) in v.data().chunks_exact(d).zip(xhat.chunks_exact_mut(d)).enumerate() {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / math::sqrt(var + eps);
            inv_std[r] = s;
            for j in 0..d {
                dst[j] = (src[j] - mean) * s;
            }
        }
        let (gm, bt) = (self.data(gamma), self.data(beta));
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(d) {
            for j in 0..d {
                row[j] = row[j] * gm[j] + bt[j];
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;

    fn run(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> alloc::vec::Vec<f64> {
        let d = gamma.len();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(&[x.len() / d, d], x).unwrap());
        let g = tape.constant(Tensor::new(&[d], gamma).unwrap());
        let b = tape.constant(Tensor::new(&[d], beta).unwrap());
        let y = tape.layer_norm(xv, g, b, eps).unwrap();
        tape.data(y).to_vec()
    }

    #[test]
    fn hand_cases() {
        assert_eq!(run(&[4.0, 4.0, 4.0], &[1.0; 3], &[0.0; 3], 1e-5), [0.0; 3]);
        let y = run(&[1.0, 3.0], &[1.0; 2], &[0.0; 2], 1e-12);
        assert!((y[0] + 1.0).abs() < 1e-9 && (y[1] - 1.0).abs() < 1e-9);
        assert_eq!(run(&[1.0, -2.0, 7.0], &[0.0; 3], &[5.0; 3], 1e-5), [5.0; 3]);
    }

    #[test]
    fn rejects_width_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 1], &[1.0, 2.0]).unwrap());
        let g = tape.constant(Tensor::new(&[1], &[1.0]).unwrap());
        assert!(tape.layer_norm(x, g, g, 1e-5).is_err());
    }

    #[test]
    fn grad_check_all_inputs() {
        let x = Tensor::new(&[2, 4], &[0.3, -1.2, 0.8, 2.0, 0.0, 0.5, -0.7, 1.1]).unwrap();
        let g = Tensor::new(&[4], &[1.1, 0.9, -0.5, 2.0]).unwrap();
        let b = Tensor::new(&[4], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let w = alloc::vec![0.2, -0.3, 1.5, 0.7, -1.1, 0.4, 0.9, -0.6];
        let errs = grad_check_many(
            |tape, v| {
                let y = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let yw = tape.mul_const(y, w.clone())?;
                Ok(tape.sum(yw))
            },
            &[x, g, b],
            1e-5,
        );
        assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
    }
}
