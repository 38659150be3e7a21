//! DenseNet with torchvision parameter names (`features.denseblock1...`).

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, VarBuilder};

use crate::error::Result;
use crate::image::layers::{conv, global_avg_pool, max_pool_3x3_s2, BatchNorm2d};
use crate::image::{ImageBackbone, ImageFeatures};
use crate::params::ParamStore;

struct DenseLayer {
    norm1: BatchNorm2d,
    conv1: Conv2d,
    norm2: BatchNorm2d,
    conv2: Conv2d,
}

impl DenseLayer {
    fn new(
        c_in: usize,
        growth: usize,
        bn_size: usize,
        vb: VarBuilder,
        store: &ParamStore,
    ) -> Result<Self> {
        let mid = bn_size * growth;
        Ok(DenseLayer {
            norm1: BatchNorm2d::new(c_in, vb.pp("norm1"), store, false)?,
            conv1: conv(c_in, mid, 1, 1, 0, false, vb.pp("conv1"))?,
            norm2: BatchNorm2d::new(mid, vb.pp("norm2"), store, false)?,
            conv2: conv(mid, growth, 3, 1, 1, false, vb.pp("conv2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv1.forward(&self.norm1.forward(x)?.relu()?)?;
        let y = self.conv2.forward(&self.norm2.forward(&y)?.relu()?)?;
        Ok(Tensor::cat(&[x, &y], 1)?)
    }
}

struct Transition {
    norm: BatchNorm2d,
    conv: Conv2d,
}

impl Transition {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(&self.norm.forward(x)?.relu()?)?;
        Ok(y.avg_pool2d(2)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseNetConfig {
    pub growth: usize,
    pub blocks: [usize; 4],
    pub init_features: usize,
    pub bn_size: usize,
}

impl DenseNetConfig {
    pub const DENSENET161: DenseNetConfig = DenseNetConfig {
        growth: 48,
        blocks: [6, 12, 36, 24],
        init_features: 96,
        bn_size: 4,
    };

    /// Channels leaving each dense block (before its transition).
    pub fn block_channels(&self) -> [usize; 4] {
        let mut out = [0; 4];
        let mut c = self.init_features;
        for (i, &n) in self.blocks.iter().enumerate() {
            c += n * self.growth;
            out[i] = c;
            c /= 2;
        }
        out
    }
}

pub struct DenseNet {
    config: DenseNetConfig,
    conv0: Conv2d,
    norm0: BatchNorm2d,
    blocks: Vec<(Vec<DenseLayer>, Option<Transition>)>,
    norm5: BatchNorm2d,
    params: ParamStore,
}

impl DenseNet {
    pub fn new(config: DenseNetConfig, params: ParamStore) -> Result<Self> {
        let vb = params.var_builder().pp("features");
        let conv0 = conv(3, config.init_features, 7, 2, 3, false, vb.pp("conv0"))?;
        let norm0 = BatchNorm2d::new(config.init_features, vb.pp("norm0"), &params, false)?;
        let mut c = config.init_features;
        let mut blocks = Vec::with_capacity(4);
        for (i, &n) in config.blocks.iter().enumerate() {
            let bvb = vb.pp(format!("denseblock{}", i + 1));
            let mut layers = Vec::with_capacity(n);
            for j in 0..n {
                layers.push(DenseLayer::new(
                    c + j * config.growth,
                    config.growth,
                    config.bn_size,
                    bvb.pp(format!("denselayer{}", j + 1)),
                    &params,
                )?);
            }
            c += n * config.growth;
            let transition = if i < 3 {
                let tvb = vb.pp(format!("transition{}", i + 1));
                let t = Transition {
                    norm: BatchNorm2d::new(c, tvb.pp("norm"), &params, false)?,
                    conv: conv(c, c / 2, 1, 1, 0, false, tvb.pp("conv"))?,
                };
                c /= 2;
                Some(t)
            } else {
                None
            };
            blocks.push((layers, transition));
        }
        let norm5 = BatchNorm2d::new(c, vb.pp("norm5"), &params, false)?;
        Ok(DenseNet {
            config,
            conv0,
            norm0,
            blocks,
            norm5,
            params,
        })
    }

    pub fn densenet161(params: ParamStore) -> Result<Self> {
        Self::new(DenseNetConfig::DENSENET161, params)
    }
}

impl ImageBackbone for DenseNet {
    fn feature_dim(&self) -> usize {
        self.config.block_channels()[3]
    }

    /// Channels leaving the second dense block (768 for DenseNet-161).
    fn intermediate_dim(&self) -> usize {
        self.config.block_channels()[1]
    }

    fn forward(&self, x: &Tensor) -> Result<ImageFeatures> {
        let mut y = self.norm0.forward(&self.conv0.forward(x)?)?.relu()?;
        y = max_pool_3x3_s2(&y)?;
        let mut intermediate = None;
        for (i, (layers, transition)) in self.blocks.iter().enumerate() {
            for l in layers {
                y = l.forward(&y)?;
            }
            if i == 1 {
                intermediate = Some(global_avg_pool(&y)?);
            }
            if let Some(t) = transition {
                y = t.forward(&y)?;
            }
        }
        let last_conv = self.norm5.forward(&y)?.relu()?;
        Ok(ImageFeatures {
            last_conv,
            intermediate: intermediate.expect("four blocks"),
        })
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densenet161_channel_bookkeeping() {
        assert_eq!(
            DenseNetConfig::DENSENET161.block_channels(),
            [384, 768, 2112, 2208]
        );
    }
}
