use rand::Rng;

use super::{check_dim, kaiming_bound, uniform_tensor, LayerError, PackedSeq, Result};
use crate::tensor::{GradTape, ParamId, ParamStore, Scalar, Tensor};

/// 1-D convolution over time, applied to each packed sequence separately.
/// Weight layout is `[out x in x kernel]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel > 0 && stride > 0, "kernel and stride must be positive");
        let fan_in = in_channels * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_tensor(rng, &[out_channels, in_channels, kernel], kaiming_bound(fan_in)),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]));
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        }
    }

    /// `floor((len + 2p - k) / s) + 1`, or `None` when the input does not
    /// cover one kernel.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        (len + 2 * self.padding >= self.kernel)
            .then(|| (len + 2 * self.padding - self.kernel) / self.stride + 1)
    }

    /// Smallest input length that yields one output frame.
    pub fn min_input_len(&self) -> usize {
        self.kernel.saturating_sub(2 * self.padding).max(1)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut GradTape<'_, T>, x: &PackedSeq) -> Result<PackedSeq> {
        check_dim("conv1d", self.in_channels, x.dim(tape))?;
        if let Some(&len) = x.lengths.iter().find(|&&n| self.output_len(n).is_none()) {
            return Err(LayerError::InputTooShort {
                layer: "conv1d",
                len,
                needed: self.min_input_len(),
            });
        }
        let (cols, lengths) = if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            (x.data, x.lengths.clone())
        } else {
            tape.unfold(x.data, &x.lengths, self.kernel, self.stride, self.padding)?
        };
        let w = tape.param(self.weight);
        let w = tape.reshape(w, &[self.out_channels, self.in_channels * self.kernel])?;
        let y = tape.matmul_nt(cols, w)?;
        let b = tape.param(self.bias);
        let b = tape.repeat_rows(b, tape.shape(y)[0])?;
        let y = tape.add(y, b)?;
        Ok(PackedSeq::new(y, lengths))
    }
}
