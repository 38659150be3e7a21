//! Bottleneck ResNet with torchvision parameter names.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, VarBuilder};

use crate::error::Result;
use crate::image::layers::{conv, global_avg_pool, max_pool_3x3_s2, BatchNorm2d};
use crate::image::{ImageBackbone, ImageFeatures};
use crate::params::ParamStore;

const EXPANSION: usize = 4;

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(
        c_in: usize,
        planes: usize,
        stride: usize,
        vb: VarBuilder,
        store: &ParamStore,
    ) -> Result<Self> {
        let out = planes * EXPANSION;
        // Zero-init the last norm of each residual branch when seeding so the
        // untrained network starts near identity.
        let zero = !store.contains(&format!("{}.bn3.weight", vb.prefix()));
        let downsample = if stride != 1 || c_in != out {
            Some((
                conv(c_in, out, 1, stride, 0, false, vb.pp("downsample").pp("0"))?,
                BatchNorm2d::new(out, vb.pp("downsample").pp("1"), store, false)?,
            ))
        } else {
            None
        };
        Ok(Bottleneck {
            conv1: conv(c_in, planes, 1, 1, 0, false, vb.pp("conv1"))?,
            bn1: BatchNorm2d::new(planes, vb.pp("bn1"), store, false)?,
            conv2: conv(planes, planes, 3, stride, 1, false, vb.pp("conv2"))?,
            bn2: BatchNorm2d::new(planes, vb.pp("bn2"), store, false)?,
            conv3: conv(planes, out, 1, 1, 0, false, vb.pp("conv3"))?,
            bn3: BatchNorm2d::new(out, vb.pp("bn3"), store, zero)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?)?;
        let skip = match &self.downsample {
            Some((c, bn)) => bn.forward(&c.forward(x)?)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

pub struct ResNet {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    stages: Vec<Vec<Bottleneck>>,
    params: ParamStore,
}

impl ResNet {
    /// Block counts per stage; `[3, 8, 36, 3]` is ResNet-152.
    pub fn new(blocks: [usize; 4], params: ParamStore) -> Result<Self> {
        let vb = params.var_builder();
        let conv1 = conv(3, 64, 7, 2, 3, false, vb.pp("conv1"))?;
        let bn1 = BatchNorm2d::new(64, vb.pp("bn1"), &params, false)?;
        let mut c_in = 64;
        let mut stages = Vec::with_capacity(4);
        for (i, (&n, planes)) in blocks.iter().zip([64, 128, 256, 512]).enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let layer_vb = vb.pp(format!("layer{}", i + 1));
            let mut blocks = Vec::with_capacity(n);
            for b in 0..n {
                blocks.push(Bottleneck::new(
                    c_in,
                    planes,
                    if b == 0 { stride } else { 1 },
                    layer_vb.pp(b),
                    &params,
                )?);
                c_in = planes * EXPANSION;
            }
            stages.push(blocks);
        }
        Ok(ResNet {
            conv1,
            bn1,
            stages,
            params,
        })
    }

    pub fn resnet152(params: ParamStore) -> Result<Self> {
        Self::new([3, 8, 36, 3], params)
    }
}

impl ImageBackbone for ResNet {
    fn feature_dim(&self) -> usize {
        512 * EXPANSION
    }

    /// Output channels of the second stage (`layer2`).
    fn intermediate_dim(&self) -> usize {
        128 * EXPANSION
    }

    fn forward(&self, x: &Tensor) -> Result<ImageFeatures> {
        let mut y = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        y = max_pool_3x3_s2(&y)?;
        let mut intermediate = None;
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                y = block.forward(&y)?;
            }
            if i == 1 {
                intermediate = Some(global_avg_pool(&y)?);
            }
        }
        Ok(ImageFeatures {
            last_conv: y,
            intermediate: intermediate.expect("four stages"),
        })
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }
}
