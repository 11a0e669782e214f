use rand::Rng;

use super::{Mode, Result};
use crate::tensor::{GradTape, Scalar, Tensor, Var};

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        Self { rate }
    }

    /// Identity in eval mode or at rate zero; the mask comes from `rng`.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut GradTape<'_, T>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if mode == Mode::Eval || self.rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        let shape = tape.shape(x).to_vec();
        let n = tape.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < self.rate { T::zero() } else { keep })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        Ok(tape.mul(x, mask)?)
    }
}
