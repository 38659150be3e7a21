use candle_core::{Tensor, Var};
use candle_nn::{Init, VarBuilder};

use crate::error::Result;
use crate::params::ParamStore;

const MOMENTUM: f64 = 0.1;
const EPS: f64 = 1e-5;

/// Batch norm over `[B, n]`. Training batches of two or more use batch
/// statistics and update the running estimates; everything else (evaluation
/// and single-example batches) uses the running estimates.
pub struct BatchNorm1d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm1d {
    pub fn new(n: usize, vb: VarBuilder, store: &ParamStore) -> Result<Self> {
        let prefix = vb.prefix();
        Ok(BatchNorm1d {
            weight: vb.get_with_hints(n, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(n, "bias", Init::Const(0.0))?,
            running_mean: store.buffer(&format!("{prefix}.running_mean"), n, 0.0)?,
            running_var: store.buffer(&format!("{prefix}.running_var"), n, 1.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let b = x.dim(0)?;
        let (mean, var) = if training && b > 1 {
            let mean = x.mean_keepdim(0)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?;
            let unbiased = (var.detach() * (b as f64 / (b as f64 - 1.0)))?;
            let rm = ((self.running_mean.as_tensor() * (1.0 - MOMENTUM))?
                + (mean.detach().squeeze(0)? * MOMENTUM)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - MOMENTUM))?
                + (unbiased.squeeze(0)? * MOMENTUM)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().detach().unsqueeze(0)?,
                self.running_var.as_tensor().detach().unsqueeze(0)?,
            )
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + EPS)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.weight.unsqueeze(0)?)?
            .broadcast_add(&self.bias.unsqueeze(0)?)?)
    }
}
