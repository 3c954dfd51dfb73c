use alloc::format;
use alloc::vec::Vec;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::SeedRng;

/// Whether a forward pass is training (dropout active, owning the
/// generator) or evaluating.
pub enum Phase<'a> {
    Eval,
    Train(&'a mut SeedRng),
}

impl Phase<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Phase::Train(_))
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Result<Var> {
        match self {
            Phase::Eval => Ok(x),
            Phase::Train(rng) => tape.dropout(x, rate, rng, true),
        }
    }
}

impl Tape {
    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut SeedRng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let threshold = libm::ceil(rate * 4_294_967_296.0) as u64;
        let factors: Vec<f64> = (0..self.value(x).len())
            .map(|_| {
                if u64::from(rng.next_u32()) < threshold {
                    0.0
                } else {
                    scale
                }
            })
            .collect();
        self.mul_const(x, factors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{seeded_rng, Tensor};

    #[test]
    fn identity_cases() {
        let mut rng = seeded_rng(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3], &[1.0, 2.0, 3.0]).unwrap());
        assert_eq!(tape.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.9, &mut rng, false).unwrap(), x);
        assert!(tape.dropout(x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn expectation_is_preserved() {
        // Monte-Carlo: mean over 10⁴ draws stays within 2% of the input.
        let mut rng = seeded_rng(7);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[10_000], 2.0));
        let y = tape.dropout(x, 0.5, &mut rng, true).unwrap();
        let mean = tape.data(y).iter().sum::<f64>() / 10_000.0;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
        assert!(tape.data(y).iter().all(|&v| v == 0.0 || v == 4.0));
    }
}
