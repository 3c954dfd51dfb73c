use crate::error::Result;
use crate::tape::{Tape, Var};

impl Tape {
    /// `x · w + b` with `w` of shape `(d_in, d_out)`, applied over the last
    /// dimension of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }
}
