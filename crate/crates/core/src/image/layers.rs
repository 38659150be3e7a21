use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Init, VarBuilder};

use crate::error::Result;
use crate::params::ParamStore;

/// Batch norm over `[B, C, H, W]` with stored statistics (inference form).
/// Running statistics are buffers, never trained.
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    mean: Tensor,
    var: Tensor,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(
        channels: usize,
        vb: VarBuilder,
        store: &ParamStore,
        zero_weight: bool,
    ) -> Result<Self> {
        let prefix = vb.prefix();
        let w_init = Init::Const(if zero_weight { 0.0 } else { 1.0 });
        Ok(BatchNorm2d {
            weight: vb.get_with_hints(channels, "weight", w_init)?,
            bias: vb.get_with_hints(channels, "bias", Init::Const(0.0))?,
            mean: store
                .buffer(&format!("{prefix}.running_mean"), channels, 0.0)?
                .as_tensor()
                .to_dtype(vb.dtype())?,
            var: store
                .buffer(&format!("{prefix}.running_var"), channels, 1.0)?
                .as_tensor()
                .to_dtype(vb.dtype())?,
            eps: 1e-5,
        })
    }
}

impl Module for BatchNorm2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let shape = (1, (), 1, 1);
        let scale = (self.weight.clone() / (self.var.clone() + self.eps)?.sqrt()?)?;
        let shift = (&self.bias - (&self.mean * &scale)?)?;
        x.broadcast_mul(&scale.reshape(shape)?)?
            .broadcast_add(&shift.reshape(shape)?)
    }
}

pub fn conv(
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    bias: bool,
    vb: VarBuilder,
) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    Ok(if bias {
        candle_nn::conv2d(c_in, c_out, kernel, cfg, vb)?
    } else {
        candle_nn::conv2d_no_bias(c_in, c_out, kernel, cfg, vb)?
    })
}

/// 3x3 stride-2 max pool with one pixel of padding. Inputs are post-ReLU, so
/// zero padding is equivalent to negative-infinity padding.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    Ok(x.pad_with_zeros(2, 1, 1)?
        .pad_with_zeros(3, 1, 1)?
        .max_pool2d_with_stride(3, 2)?)
}

/// Spatial mean of `[B, C, H, W]`, giving `[B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}
