use candle_core::{Module, Tensor};
use candle_nn::Conv2d;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::layers::{conv, global_avg_pool};
use crate::image::{ImageBackbone, ImageFeatures};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// 2x2 max pool after the activation.
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StandinCnnConfig {
    pub in_channels: usize,
    pub stages: Vec<ConvStage>,
    /// Stage whose pooled output is the intermediate representation.
    pub intermediate_stage: usize,
}

impl StandinCnnConfig {
    /// Five conv stages, 224 -> 7 spatially, with a 512-channel 28x28 stage in
    /// the position of ResNet's second block.
    pub fn default_224() -> Self {
        let s = |out_channels, kernel, stride, padding, pool| ConvStage {
            out_channels,
            kernel,
            stride,
            padding,
            pool,
        };
        StandinCnnConfig {
            in_channels: 3,
            stages: vec![
                s(16, 3, 2, 1, true),
                s(32, 3, 2, 1, false),
                s(512, 1, 1, 0, false),
                s(64, 3, 2, 1, false),
                s(128, 3, 2, 1, false),
            ],
            intermediate_stage: 2,
        }
    }
}

/// Small seed-initialised CNN with the same output contract as the large
/// backbones: a final conv feature map and a pooled intermediate stage.
pub struct StandinCnn {
    config: StandinCnnConfig,
    convs: Vec<Conv2d>,
    params: ParamStore,
}

impl StandinCnn {
    pub fn new(config: StandinCnnConfig, params: ParamStore) -> Result<Self> {
        if config.stages.is_empty() || config.intermediate_stage >= config.stages.len() {
            return Err(Error::Config(
                "stand-in CNN needs stages and a valid intermediate stage".into(),
            ));
        }
        let vb = params.var_builder().pp("stages");
        let mut c = config.in_channels;
        let mut convs = Vec::with_capacity(config.stages.len());
        for (i, s) in config.stages.iter().enumerate() {
            convs.push(conv(
                c,
                s.out_channels,
                s.kernel,
                s.stride,
                s.padding,
                true,
                vb.pp(i),
            )?);
            c = s.out_channels;
        }
        Ok(StandinCnn {
            config,
            convs,
            params,
        })
    }
}

impl ImageBackbone for StandinCnn {
    fn feature_dim(&self) -> usize {
        self.config.stages.last().expect("non-empty").out_channels
    }

    fn intermediate_dim(&self) -> usize {
        self.config.stages[self.config.intermediate_stage].out_channels
    }

    fn forward(&self, x: &Tensor) -> Result<ImageFeatures> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Dimension {
                what: "image channels",
                expected: self.config.in_channels,
                got: c,
            });
        }
        let mut y = x.clone();
        let mut intermediate = None;
        for (i, (conv, stage)) in self.convs.iter().zip(&self.config.stages).enumerate() {
            y = conv.forward(&y)?.relu()?;
            if stage.pool {
                y = y.max_pool2d(2)?;
            }
            if i == self.config.intermediate_stage {
                intermediate = Some(global_avg_pool(&y)?);
            }
        }
        Ok(ImageFeatures {
            last_conv: y,
            intermediate: intermediate.expect("validated stage index"),
        })
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }
}
