//! Image encoder: preprocessing, CNN backbones and the 768-d projection.

mod densenet;
mod layers;
mod preprocess;
mod resnet;
mod standin;

pub use densenet::{DenseNet, DenseNetConfig};
pub use layers::global_avg_pool;
pub use preprocess::{
    load_image, preprocess_image, ImageTensor, Normalization, CROP_SOURCE, IMAGE_SIZE,
};
pub use resnet::ResNet;
pub use standin::{ConvStage, StandinCnn, StandinCnnConfig};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{linear, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const IMAGE_DIM: usize = 768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageBackboneKind {
    #[serde(rename = "resnet152")]
    Resnet152,
    #[serde(rename = "densenet161")]
    Densenet161,
    #[serde(rename = "standin")]
    Standin,
}

impl ImageBackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageBackboneKind::Resnet152 => "resnet152",
            ImageBackboneKind::Densenet161 => "densenet161",
            ImageBackboneKind::Standin => "standin",
        }
    }

    /// Channels of the pooled intermediate stage, which sizes MFAS fusion.
    pub fn intermediate_dim(self) -> usize {
        match self {
            ImageBackboneKind::Resnet152 => 512,
            ImageBackboneKind::Densenet161 => DenseNetConfig::DENSENET161.block_channels()[1],
            ImageBackboneKind::Standin => {
                let c = StandinCnnConfig::default_224();
                c.stages[c.intermediate_stage].out_channels
            }
        }
    }
}

impl fmt::Display for ImageBackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImageBackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet152" => Ok(ImageBackboneKind::Resnet152),
            "densenet161" => Ok(ImageBackboneKind::Densenet161),
            "standin" => Ok(ImageBackboneKind::Standin),
            other => Err(Error::Config(format!("unknown image_backbone {other:?}"))),
        }
    }
}

/// Raw backbone outputs for a batch.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    /// Last convolutional feature map `[B, C, h, w]`.
    pub last_conv: Tensor,
    /// Spatially pooled intermediate stage `[B, C_mid]`.
    pub intermediate: Tensor,
}

impl ImageFeatures {
    /// Penultimate feature vector: global average pool of the last feature map.
    pub fn penultimate(&self) -> Result<Tensor> {
        global_avg_pool(&self.last_conv)
    }
}

pub trait ImageBackbone: Send + Sync {
    /// Channels of the last feature map (the penultimate vector's size).
    fn feature_dim(&self) -> usize;
    fn intermediate_dim(&self) -> usize;
    /// `x` is `[B, 3, H, W]`.
    fn forward(&self, x: &Tensor) -> Result<ImageFeatures>;
    fn params(&self) -> &ParamStore;
}

/// Dense layer from the penultimate features to the 768-d image vector, with ReLU.
pub struct ImageProjection {
    dense: Linear,
    out_dim: usize,
}

impl ImageProjection {
    pub fn new(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(ImageProjection {
            dense: linear(in_dim, out_dim, vb)?,
            out_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, penultimate: &Tensor) -> Result<Tensor> {
        let w_dtype = self.dense.weight().dtype();
        Ok(self
            .dense
            .forward(&penultimate.to_dtype(w_dtype)?)?
            .relu()?)
    }
}

/// Final (projected) and intermediate image vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRepr {
    pub final_: Vec<f64>,
    pub intermediate: Vec<f64>,
}

fn row(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Runs the backbone on one image and projects the penultimate features.
pub fn encode_image(
    image: &ImageTensor,
    backbone: &dyn ImageBackbone,
    projection: &ImageProjection,
) -> Result<ImageRepr> {
    let x = image
        .to_tensor(backbone.params().device())?
        .to_dtype(backbone.params().dtype())?;
    let feats = backbone.forward(&x)?;
    let repr = ImageRepr {
        final_: row(&projection.forward(&feats.penultimate()?)?)?,
        intermediate: row(&feats.intermediate)?,
    };
    if repr
        .final_
        .iter()
        .chain(&repr.intermediate)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Training(
            "image encoder produced non-finite values".into(),
        ));
    }
    Ok(repr)
}

/// Constructs a backbone, seed-initialised or loaded from a safetensors file
/// with torchvision parameter names.
pub fn build_image_backbone(
    kind: ImageBackboneKind,
    weights: Option<&Path>,
    seed: u64,
    dtype: DType,
    trainable: bool,
) -> Result<Box<dyn ImageBackbone>> {
    let store = match weights {
        Some(path) => {
            let raw = candle_core::safetensors::load(path, &Device::Cpu)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
            ParamStore::from_tensors(raw, seed, dtype, trainable, true)
        }
        None => ParamStore::seeded(seed, dtype, trainable),
    };
    Ok(match kind {
        ImageBackboneKind::Resnet152 => Box::new(ResNet::resnet152(store)?),
        ImageBackboneKind::Densenet161 => Box::new(DenseNet::densenet161(store)?),
        ImageBackboneKind::Standin => {
            Box::new(StandinCnn::new(StandinCnnConfig::default_224(), store)?)
        }
    })
}

/// Backbone plus preprocessing settings.
pub struct ImageEncoder {
    pub kind: ImageBackboneKind,
    pub backbone: Box<dyn ImageBackbone>,
    pub normalization: Normalization,
    pub augment: bool,
}

impl ImageEncoder {
    pub fn new(
        kind: ImageBackboneKind,
        weights: Option<&Path>,
        seed: u64,
        dtype: DType,
        trainable: bool,
    ) -> Result<Self> {
        Ok(ImageEncoder {
            kind,
            backbone: build_image_backbone(kind, weights, seed, dtype, trainable)?,
            normalization: Normalization::default(),
            augment: true,
        })
    }

    pub fn features(&self, images: &[&ImageTensor]) -> Result<ImageFeatures> {
        let x = ImageTensor::batch(images, self.backbone.params().device())?
            .to_dtype(self.backbone.params().dtype())?;
        self.backbone.forward(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{DynamicImage, RgbImage};
    use rand::{Rng, SeedableRng};
    use std::collections::HashMap;
    use std::sync::OnceLock;

    fn standin() -> &'static (Box<dyn ImageBackbone>, ImageProjection) {
        static B: OnceLock<(Box<dyn ImageBackbone>, ImageProjection)> = OnceLock::new();
        B.get_or_init(|| {
            let bb = build_image_backbone(ImageBackboneKind::Standin, None, 5, DType::F32, false)
                .unwrap();
            let head = ParamStore::seeded(5, DType::F64, false);
            let proj = ImageProjection::new(
                bb.feature_dim(),
                IMAGE_DIM,
                head.var_builder().pp("image_projection"),
            )
            .unwrap();
            (bb, proj)
        })
    }

    fn noise_image(seed: u64) -> DynamicImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DynamicImage::ImageRgb8(RgbImage::from_fn(96, 80, |_, _| {
            image::Rgb([rng.random(), rng.random(), rng.random()])
        }))
    }

    #[test]
    fn standin_output_dims() {
        let (bb, proj) = standin();
        let t = preprocess_image(&noise_image(1), false, 0, &Normalization::default()).unwrap();
        let r = encode_image(&t, bb.as_ref(), proj).unwrap();
        assert_eq!((r.final_.len(), r.intermediate.len()), (768, 512));
        assert_eq!(ImageBackboneKind::Standin.intermediate_dim(), 512);
    }

    #[test]
    fn eval_encoding_is_bitwise_deterministic() {
        let (bb, proj) = standin();
        let t = preprocess_image(&noise_image(2), false, 0, &Normalization::default()).unwrap();
        assert_eq!(
            encode_image(&t, bb.as_ref(), proj).unwrap(),
            encode_image(&t, bb.as_ref(), proj).unwrap()
        );
    }

    #[test]
    fn horizontal_flip_changes_features() {
        let (bb, proj) = standin();
        let img = noise_image(3);
        let flipped = DynamicImage::ImageRgb8(image::imageops::flip_horizontal(&img.to_rgb8()));
        let n = Normalization::default();
        let a = encode_image(
            &preprocess_image(&img, false, 0, &n).unwrap(),
            bb.as_ref(),
            proj,
        )
        .unwrap();
        let b = encode_image(
            &preprocess_image(&flipped, false, 0, &n).unwrap(),
            bb.as_ref(),
            proj,
        )
        .unwrap();
        assert_ne!(a.final_, b.final_);
    }

    #[test]
    fn random_tensors_give_finite_features() {
        let (bb, proj) = standin();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let data: Vec<f32> = (0..3 * 224 * 224)
                .map(|_| rng.random_range(-3.0..3.0))
                .collect();
            let r = encode_image(&ImageTensor::from_chw(data).unwrap(), bb.as_ref(), proj).unwrap();
            assert!(r.final_.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_image_with_zero_conv_bias_yields_projection_bias() {
        let store = ParamStore::seeded(1, DType::F64, true);
        let bb = StandinCnn::new(StandinCnnConfig::default_224(), store.clone()).unwrap();
        for name in store.names().into_iter().filter(|n| n.ends_with("bias")) {
            let t = store.get(&name).unwrap();
            store.set(&name, &t.zeros_like().unwrap()).unwrap();
        }
        let head = ParamStore::seeded(1, DType::F64, true);
        let proj = ImageProjection::new(bb.feature_dim(), 6, head.var_builder().pp("p")).unwrap();
        let bias: Vec<f64> = vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5];
        head.set(
            "p.bias",
            &Tensor::new(bias.as_slice(), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let r = encode_image(&ImageTensor::zeros(), &bb, &proj).unwrap();
        assert_eq!(r.final_, bias);
        assert!(r.intermediate.iter().all(|&v| v == 0.0));
    }

    /// Two 1x1 conv stages on a 2x2 input, computed by hand.
    #[test]
    fn tiny_standin_matches_hand_forward() {
        let dev = Device::Cpu;
        let mut m = HashMap::new();
        // stage 0: 3 -> 2
        let w0 = [[1.0, 0.0, -1.0], [0.5, 0.5, 0.5]];
        let b0 = [0.0, -0.25];
        // stage 1: 2 -> 2
        let w1 = [[1.0, 1.0], [-1.0, 2.0]];
        let b1 = [0.1, 0.0];
        let flat = |w: &[[f64; 3]; 2]| w.iter().flatten().copied().collect::<Vec<_>>();
        m.insert(
            "stages.0.weight".to_string(),
            Tensor::from_vec(flat(&w0), (2, 3, 1, 1), &dev).unwrap(),
        );
        m.insert("stages.0.bias".to_string(), Tensor::new(&b0, &dev).unwrap());
        m.insert(
            "stages.1.weight".to_string(),
            Tensor::from_vec(
                w1.iter().flatten().copied().collect::<Vec<_>>(),
                (2, 2, 1, 1),
                &dev,
            )
            .unwrap(),
        );
        m.insert("stages.1.bias".to_string(), Tensor::new(&b1, &dev).unwrap());
        let one = |out_channels| ConvStage {
            out_channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            pool: false,
        };
        let cfg = StandinCnnConfig {
            in_channels: 3,
            stages: vec![one(2), one(2)],
            intermediate_stage: 0,
        };
        let bb =
            StandinCnn::new(cfg, ParamStore::from_tensors(m, 0, DType::F64, false, true)).unwrap();

        // pixels: (r, g, b) at the four positions
        let px = [
            [1.0, 2.0, 0.5],
            [0.0, -1.0, 1.0],
            [2.0, 0.0, 0.0],
            [-1.0, 1.0, 1.0],
        ];
        let mut chw = vec![0.0; 12];
        for (p, v) in px.iter().enumerate() {
            for c in 0..3 {
                chw[c * 4 + p] = v[c];
            }
        }
        let x = Tensor::from_vec(chw, (1, 3, 2, 2), &dev).unwrap();
        let feats = bb.forward(&x).unwrap();

        let relu = |v: f64| v.max(0.0);
        let mut h0 = [[0.0; 2]; 4];
        let mut h1 = [[0.0; 2]; 4];
        for p in 0..4 {
            for o in 0..2 {
                h0[p][o] = relu((0..3).map(|c| w0[o][c] * px[p][c]).sum::<f64>() + b0[o]);
            }
            for o in 0..2 {
                h1[p][o] = relu((0..2).map(|c| w1[o][c] * h0[p][c]).sum::<f64>() + b1[o]);
            }
        }
        let mean = |h: &[[f64; 2]; 4], o: usize| h.iter().map(|r| r[o]).sum::<f64>() / 4.0;
        let inter = feats
            .intermediate
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let pen = feats
            .penultimate()
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for o in 0..2 {
            assert!((inter[o] - mean(&h0, o)).abs() < 1e-12);
            assert!((pen[o] - mean(&h1, o)).abs() < 1e-12);
        }

        // Projection 2 -> 2 with ReLU.
        let head = ParamStore::from_tensors(
            HashMap::from([
                (
                    "p.weight".to_string(),
                    Tensor::new(&[[1.0, -2.0], [0.5, 0.25]], &dev).unwrap(),
                ),
                (
                    "p.bias".to_string(),
                    Tensor::new(&[0.0, 0.1], &dev).unwrap(),
                ),
            ]),
            0,
            DType::F64,
            false,
            true,
        );
        let proj = ImageProjection::new(2, 2, head.var_builder().pp("p")).unwrap();
        let out = proj
            .forward(&feats.penultimate().unwrap())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let (a, b) = (mean(&h1, 0), mean(&h1, 1));
        assert!((out[0] - relu(a - 2.0 * b)).abs() < 1e-12);
        assert!((out[1] - relu(0.5 * a + 0.25 * b + 0.1)).abs() < 1e-12);
    }
}
