//! Joint encoder/decoder and classifier head over the fused vector F.

mod norm;

pub use norm::BatchNorm1d;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::ops::log_softmax;
use candle_nn::{linear, Linear};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fusion::{Fusion, FusionDims, FusionInputs, FusionKind};
use crate::image::ImageProjection;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Binary,
    Multiclass,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Binary => 2,
            Task::Multiclass => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Binary => "binary",
            Task::Multiclass => "multiclass",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Task::Binary),
            "multiclass" => Ok(Task::Multiclass),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fusion: FusionKind,
    pub task: Task,
    pub dims: FusionDims,
    /// Size of the image backbone's penultimate vector (projection input).
    pub image_feature_dim: usize,
    pub dropout: f64,
    /// Batch norm at the joint-encoder and classifier inputs.
    pub batch_norm: bool,
    pub encoder_hidden: usize,
    pub code_dim: usize,
    pub decoder_hidden: usize,
    pub classifier_hidden: usize,
    /// Stop gradients through the reconstruction target F.
    pub detach_target: bool,
}

impl ModelConfig {
    /// Head sizes 768/384 (encoder), 768/|F| (decoder), 128 (classifier), dropout 0.2.
    pub fn new(
        fusion: FusionKind,
        task: Task,
        image_feature_dim: usize,
        image_inter_dim: usize,
    ) -> Self {
        ModelConfig {
            fusion,
            task,
            dims: FusionDims::with_image_inter(image_inter_dim),
            image_feature_dim,
            dropout: 0.2,
            batch_norm: true,
            encoder_hidden: 768,
            code_dim: 384,
            decoder_hidden: 768,
            classifier_hidden: 128,
            detach_target: false,
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.dims.output_dim(self.fusion)
    }

    pub fn num_classes(&self) -> usize {
        self.task.num_classes()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        let sizes = [
            self.dims.text,
            self.dims.image,
            self.dims.text_inter,
            self.dims.image_inter,
            self.dims.sketch,
            self.image_feature_dim,
            self.encoder_hidden,
            self.code_dim,
            self.decoder_hidden,
            self.classifier_hidden,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Forward-pass mode. Training draws dropout masks from the given stream and
/// uses batch statistics in batch norm.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout with a mask drawn from the mode's stream.
pub fn dropout(x: &Tensor, p: f64, mode: &mut Mode) -> Result<Tensor> {
    let rng = match mode {
        Mode::Train(rng) if p > 0.0 => rng,
        _ => return Ok(x.clone()),
    };
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Batched modality tensors entering the head, `[B, dim]` each.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub text_final: Tensor,
    pub text_inter: Tensor,
    /// Penultimate image backbone vector, before the 768-d projection.
    pub image_penultimate: Tensor,
    pub image_inter: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Fused vector F (the reconstruction target).
    pub fused: Tensor,
    /// Joint code J.
    pub code: Tensor,
    /// Decoder output F-hat.
    pub reconstruction: Tensor,
    pub log_probs: Tensor,
}

/// Image projection, fusion, joint encoder/decoder and classifier.
pub struct MultimodalModel {
    config: ModelConfig,
    store: ParamStore,
    fusion: Fusion,
    projection: ImageProjection,
    enc_norm: Option<BatchNorm1d>,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
    cls_norm: Option<BatchNorm1d>,
    cls1: Linear,
    cls2: Linear,
}

impl MultimodalModel {
    /// Builds the head in `store` (which should be `f64`).
    pub fn new(config: ModelConfig, fusion: Fusion, store: ParamStore) -> Result<Self> {
        config.validate()?;
        if fusion.kind() != config.fusion || fusion.dims() != &config.dims {
            return Err(Error::Config("fusion does not match model config".into()));
        }
        let vb = store.var_builder();
        let f = config.fused_dim();
        let norm = |n, name: &str| -> Result<Option<BatchNorm1d>> {
            if config.batch_norm {
                Ok(Some(BatchNorm1d::new(n, vb.pp(name), &store)?))
            } else {
                Ok(None)
            }
        };
        Ok(MultimodalModel {
            projection: ImageProjection::new(
                config.image_feature_dim,
                config.dims.image,
                vb.pp("image_projection"),
            )?,
            enc_norm: norm(f, "encoder.norm")?,
            enc1: linear(f, config.encoder_hidden, vb.pp("encoder.dense1"))?,
            enc2: linear(
                config.encoder_hidden,
                config.code_dim,
                vb.pp("encoder.dense2"),
            )?,
            dec1: linear(
                config.code_dim,
                config.decoder_hidden,
                vb.pp("decoder.dense1"),
            )?,
            dec2: linear(config.decoder_hidden, f, vb.pp("decoder.dense2"))?,
            cls_norm: norm(config.code_dim, "classifier.norm")?,
            cls1: linear(
                config.code_dim,
                config.classifier_hidden,
                vb.pp("classifier.dense1"),
            )?,
            cls2: linear(
                config.classifier_hidden,
                config.num_classes(),
                vb.pp("classifier.dense2"),
            )?,
            config,
            store,
            fusion,
        })
    }

    /// Fresh seed-initialised head with its own fusion.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        let fusion = Fusion::new(config.fusion, config.dims, seed)?;
        Self::new(config, fusion, ParamStore::seeded(seed, DType::F64, true))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn projection(&self) -> &ImageProjection {
        &self.projection
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// 768-d image vector I from the penultimate backbone features.
    pub fn project_image(&self, penultimate: &Tensor) -> Result<Tensor> {
        check_dim(
            "image penultimate features",
            self.config.image_feature_dim,
            penultimate.dim(1)?,
        )?;
        self.projection.forward(penultimate)
    }

    pub fn fuse(&self, x: &ModelInputs) -> Result<Tensor> {
        let dt = self.dtype();
        self.fusion.forward(&FusionInputs {
            text_final: x.text_final.to_dtype(dt)?,
            text_inter: x.text_inter.to_dtype(dt)?,
            image_final: self.project_image(&x.image_penultimate)?,
            image_inter: x.image_inter.to_dtype(dt)?,
        })
    }

    /// `J = Dense_384(dropout(ReLU(Dense_768(BN(F)))))`.
    pub fn joint_encode(&self, fused: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        check_dim(
            "fused representation",
            self.config.fused_dim(),
            fused.dim(1)?,
        )?;
        let x = match &self.enc_norm {
            Some(bn) => bn.forward(fused, mode.is_train())?,
            None => fused.clone(),
        };
        let h = self.enc1.forward(&x)?.relu()?;
        let h = dropout(&h, self.config.dropout, mode)?;
        Ok(self.enc2.forward(&h)?)
    }

    /// `F_hat = Dense_|F|(dropout(ReLU(Dense_768(J))))`, linear output.
    pub fn joint_decode(&self, code: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        check_dim("joint code", self.config.code_dim, code.dim(1)?)?;
        let h = self.dec1.forward(code)?.relu()?;
        let h = dropout(&h, self.config.dropout, mode)?;
        Ok(self.dec2.forward(&h)?)
    }

    /// Log-softmax over classes of `Dense_C(dropout(ReLU(Dense_128(BN(J)))))`.
    pub fn classify(&self, code: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        Ok(log_softmax(&self.logits(code, mode)?, D::Minus1)?)
    }

    pub fn logits(&self, code: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        check_dim("joint code", self.config.code_dim, code.dim(1)?)?;
        let x = match &self.cls_norm {
            Some(bn) => bn.forward(code, mode.is_train())?,
            None => code.clone(),
        };
        let h = self.cls1.forward(&x)?.relu()?;
        let h = dropout(&h, self.config.dropout, mode)?;
        Ok(self.cls2.forward(&h)?)
    }

    /// Runs the head from an already fused batch.
    pub fn forward_fused(&self, fused: &Tensor, mode: &mut Mode) -> Result<ModelOutput> {
        let code = self.joint_encode(fused, mode)?;
        let reconstruction = self.joint_decode(&code, mode)?;
        let log_probs = self.classify(&code, mode)?;
        let fused = if self.config.detach_target {
            fused.detach()
        } else {
            fused.clone()
        };
        Ok(ModelOutput {
            fused,
            code,
            reconstruction,
            log_probs,
        })
    }

    pub fn forward(&self, x: &ModelInputs, mode: &mut Mode) -> Result<ModelOutput> {
        let fused = self.fuse(x)?;
        self.forward_fused(&fused, mode)
    }

    /// Batch-mean of the combined loss.
    pub fn loss(&self, out: &ModelOutput, labels: &[usize]) -> Result<Tensor> {
        combined_loss_tensor(&out.fused, &out.reconstruction, &out.log_probs, labels)
    }
}

/// `mean_j (F_j - F_hat_j)^2 - log_probs[label]` for one example.
pub fn combined_loss(
    fused: &[f64],
    reconstruction: &[f64],
    log_probs: &[f64],
    label: usize,
) -> Result<f64> {
    check_dim("reconstruction", fused.len(), reconstruction.len())?;
    if label >= log_probs.len() {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            log_probs.len()
        )));
    }
    if fused.is_empty() {
        return Err(Error::Data("empty fused vector".into()));
    }
    let mse = fused
        .iter()
        .zip(reconstruction)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / fused.len() as f64;
    Ok(mse - log_probs[label])
}

/// Batch mean of [`combined_loss`] over `[B, |F|]` and `[B, C]` tensors.
pub fn combined_loss_tensor(
    fused: &Tensor,
    reconstruction: &Tensor,
    log_probs: &Tensor,
    labels: &[usize],
) -> Result<Tensor> {
    let (b, c) = log_probs.dims2()?;
    check_dim("label batch", b, labels.len())?;
    if fused.dims() != reconstruction.dims() {
        return Err(Error::Dimension {
            what: "reconstruction",
            expected: fused.elem_count(),
            got: reconstruction.elem_count(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mse = (fused - reconstruction)?.sqr()?.mean(D::Minus1)?;
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (b, 1), &Device::Cpu)?;
    let picked = log_probs.gather(&idx, 1)?.squeeze(1)?;
    Ok((mse - picked)?.mean_all()?)
}

#[cfg(test)]
mod tests;
