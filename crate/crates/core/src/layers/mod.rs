//! Parameterized layers built on the tape.
//!
//! Sequence layers consume and produce [`PackedSeq`]: the valid frames of a
//! batch of variable-length sequences stored back to back as one
//! `[sum(lengths) x dim]` matrix. Padding never enters a computation, so no
//! padded frame can influence a valid output.

mod conv;
mod dropout;
mod linear;
mod lstm;
mod norm;

pub use conv::Conv1d;
pub use dropout::Dropout;
pub use linear::Linear;
pub use lstm::{BiLstm, LstmDirection};
pub use norm::{BatchNorm, BatchStats, LayerNorm};

use rand::Rng;
use thiserror::Error;

use crate::tensor::{GradTape, Scalar, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{layer}: sequence of {len} frames is shorter than the required {needed}")]
    InputTooShort {
        layer: &'static str,
        len: usize,
        needed: usize,
    },
    #[error("{layer}: expected feature dim {expected}, got {found}")]
    DimMismatch {
        layer: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{layer}: {detail}")]
    Degenerate { layer: &'static str, detail: String },
}

pub type Result<T, E = LayerError> = std::result::Result<T, E>;

/// Valid frames of several sequences, stacked.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedSeq {
    pub data: Var,
    pub lengths: Vec<usize>,
}

impl PackedSeq {
    pub fn new(data: Var, lengths: Vec<usize>) -> Self {
        Self { data, lengths }
    }

    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// First row of each sequence.
    pub fn offsets(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .scan(0, |acc, &n| {
                let start = *acc;
                *acc += n;
                Some(start)
            })
            .collect()
    }

    pub fn with_data(&self, data: Var) -> Self {
        Self {
            data,
            lengths: self.lengths.clone(),
        }
    }

    pub fn dim<T: Scalar>(&self, tape: &GradTape<'_, T>) -> usize {
        tape.shape(self.data)[1]
    }

    /// Rows of sequence `b` as a `[len x dim]` view.
    pub fn sequence<T: Scalar>(&self, tape: &mut GradTape<'_, T>, b: usize) -> Result<Var> {
        let start: usize = self.lengths[..b].iter().sum();
        if start == 0 && self.lengths.len() == 1 {
            return Ok(self.data);
        }
        Ok(tape.narrow(self.data, 0, start, self.lengths[b])?)
    }
}

pub(crate) fn uniform_tensor<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    bound: f64,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("finite init")
}

/// Kaiming-uniform bound for ReLU layers with the given fan-in.
pub(crate) fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub(crate) fn check_dim(layer: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(LayerError::DimMismatch {
            layer,
            expected,
            found,
        })
    }
}
