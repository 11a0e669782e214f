use super::{check_dim, LayerError, Mode, Result};
use crate::tensor::{GradTape, ParamId, ParamStore, Scalar, Tensor, Var};

/// Per-channel batch statistics measured by one training forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (`n - 1`) variance.
    pub var: Vec<f64>,
}

/// Batch normalization over the rows of a `[rows x channels]` matrix.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gain: ParamId,
    pub shift: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(vec![channels], T::one()));
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(vec![channels]));
        Self {
            channels,
            gain,
            shift,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Train mode normalizes with batch statistics and returns them so the
    /// caller can fold them into the running estimates with [`Self::update`].
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut GradTape<'_, T>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = tape.shape(x).to_vec();
        check_dim("batch_norm", self.channels, shape[1])?;
        let rows = shape[0];
        let (xhat, stats) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(LayerError::Degenerate {
                        layer: "batch_norm",
                        detail: format!("training statistics need at least 2 frames, got {rows}"),
                    });
                }
                let mean = tape.mean(x, 0, true)?;
                let mean_r = tape.repeat_rows(mean, rows)?;
                let centred = tape.sub(x, mean_r)?;
                let sq = tape.square(centred)?;
                let var = tape.mean(sq, 0, true)?;
                let std = tape.add_scalar(var, T::from_f64(self.eps))?;
                let std = tape.sqrt(std)?;
                let std_r = tape.repeat_rows(std, rows)?;
                let xhat = tape.div(centred, std_r)?;
                let correction = rows as f64 / (rows - 1) as f64;
                let stats = BatchStats {
                    mean: tape.value(mean).iter().map(|v| v.as_f64()).collect(),
                    var: tape.value(var).iter().map(|v| v.as_f64() * correction).collect(),
                };
                (xhat, Some(stats))
            }
            Mode::Eval => {
                let mean = Tensor::from_f64(vec![1, self.channels], &self.running_mean)?;
                let std: Vec<f64> = self.running_var.iter().map(|v| (v + self.eps).sqrt()).collect();
                let std = Tensor::from_f64(vec![1, self.channels], &std)?;
                let mean = tape.constant(mean);
                let std = tape.constant(std);
                let mean_r = tape.repeat_rows(mean, rows)?;
                let std_r = tape.repeat_rows(std, rows)?;
                let centred = tape.sub(x, mean_r)?;
                (tape.div(centred, std_r)?, None)
            }
        };
        let gain = tape.param(self.gain);
        let gain = tape.repeat_rows(gain, rows)?;
        let shift = tape.param(self.shift);
        let shift = tape.repeat_rows(shift, rows)?;
        let y = tape.mul(xhat, gain)?;
        Ok((tape.add(y, shift)?, stats))
    }

    /// Exponential moving average of the running statistics.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Layer normalization of every row of a `[rows x dim]` matrix.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub dim: usize,
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(vec![dim], T::one()));
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(vec![dim]));
        Self {
            dim,
            gain,
            shift,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut GradTape<'_, T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        check_dim("layer_norm", self.dim, shape[1])?;
        let rows = shape[0];
        let mean = tape.mean(x, 1, true)?;
        let mean = tape.repeat_cols(mean, self.dim)?;
        let centred = tape.sub(x, mean)?;
        let sq = tape.square(centred)?;
        let var = tape.mean(sq, 1, true)?;
        let std = tape.add_scalar(var, T::from_f64(self.eps))?;
        let std = tape.sqrt(std)?;
        let std = tape.repeat_cols(std, self.dim)?;
        let xhat = tape.div(centred, std)?;
        let gain = tape.param(self.gain);
        let gain = tape.repeat_rows(gain, rows)?;
        let shift = tape.param(self.shift);
        let shift = tape.repeat_rows(shift, rows)?;
        let y = tape.mul(xhat, gain)?;
        Ok(tape.add(y, shift)?)
    }
}
