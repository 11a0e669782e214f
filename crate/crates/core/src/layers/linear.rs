use rand::Rng;

use super::{check_dim, kaiming_bound, uniform_tensor, Result};
use crate::tensor::{GradTape, ParamId, ParamStore, Scalar, Tensor, Var};

/// `y = x W^T + b` applied to every row of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_tensor(rng, &[out_features, in_features], kaiming_bound(in_features)),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_features]));
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut GradTape<'_, T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        check_dim("linear", self.in_features, *shape.last().unwrap_or(&0))?;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul_nt(x, w)?;
        let rows = tape.shape(y)[0];
        let b = tape.repeat_rows(b, rows)?;
        Ok(tape.add(y, b)?)
    }
}
