use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::data::{resolve_image, UnlabeledPost};
use crate::error::{Error, Result};
use crate::image::{load_image, preprocess_image, ImageEncoder, ImageTensor};
use crate::model::ModelInputs;
use crate::params::{fnv1a, ParamStore};
use crate::text::{TextEncoder, TokenSequence};

/// Text and image backbones built from an experiment configuration.
pub struct Encoders {
    pub text: TextEncoder,
    pub image: ImageEncoder,
}

impl Encoders {
    /// Builds both backbones. Stand-ins are seeded from the config seed;
    /// pretrained ones load from the configured path or the cache directory.
    pub fn from_config(cfg: &ExperimentConfig, trainable: bool) -> Result<Self> {
        let dtype = cfg.dtype();
        let mut text = match cfg.resolved_text_weights() {
            Some(dir) => TextEncoder::pretrained(cfg.text_backbone, &dir, dtype, trainable)?,
            None => TextEncoder::standin(cfg.seed ^ fnv1a(b"text_backbone"), dtype, trainable)?,
        };
        text.max_len = cfg.max_len;
        text.truncation = cfg.truncation;
        let weights = cfg.resolved_image_weights();
        let mut image = ImageEncoder::new(
            cfg.image_backbone,
            weights.as_deref(),
            cfg.seed ^ fnv1a(b"image_backbone"),
            dtype,
            trainable,
        )?;
        image.normalization = cfg.normalization;
        image.augment = cfg.augment;
        Ok(Encoders { text, image })
    }

    pub fn text_store(&self) -> &ParamStore {
        self.text.backbone.params()
    }

    pub fn image_store(&self) -> &ParamStore {
        self.image.backbone.params()
    }

    /// Overwrites backbone tensors (e.g. fine-tuned values from a checkpoint).
    /// The stores must have been built trainable.
    pub fn load_tensors(
        &self,
        text: &HashMap<String, Tensor>,
        image: &HashMap<String, Tensor>,
    ) -> Result<()> {
        for (name, t) in text {
            self.text_store().set(name, t)?;
        }
        for (name, t) in image {
            self.image_store().set(name, t)?;
        }
        Ok(())
    }

    pub fn prepare(&self, post: &UnlabeledPost) -> Result<TokenSequence> {
        self.text.prepare(&post.text, &post.ocr_text)
    }

    /// Loads and preprocesses one post image. `augment` carries the epoch seed
    /// when training-time augmentation applies.
    pub fn image_tensor(
        &self,
        post: &UnlabeledPost,
        image_root: &Path,
        augment: Option<u64>,
    ) -> Result<ImageTensor> {
        let img = load_image(&resolve_image(image_root, &post.image_path))?;
        let (train, seed) = match augment {
            Some(s) if self.image.augment => (true, s ^ fnv1a(post.id.as_bytes())),
            _ => (false, 0),
        };
        preprocess_image(&img, train, seed, &self.image.normalization)
    }

    /// All four modality tensors for a batch, attached to the backbone graphs.
    pub fn inputs(
        &self,
        posts: &[&UnlabeledPost],
        seqs: &[&TokenSequence],
        image_root: &Path,
        augment: Option<u64>,
    ) -> Result<ModelInputs> {
        let mut finals = Vec::with_capacity(seqs.len());
        let mut inters = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let f = self.text.features(seq)?;
            finals.push(f.final_);
            inters.push(f.intermediate);
        }
        let images = posts
            .iter()
            .map(|p| self.image_tensor(p, image_root, augment))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageTensor> = images.iter().collect();
        let feats = self.image.features(&refs)?;
        Ok(ModelInputs {
            text_final: Tensor::cat(&finals, 0)?,
            text_inter: Tensor::cat(&inters, 0)?,
            image_penultimate: feats.penultimate()?,
            image_inter: feats.intermediate,
        })
    }
}

/// Supplies batched model inputs for examples addressed by index.
pub trait FeatureSource: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn image_feature_dim(&self) -> usize;

    fn image_inter_dim(&self) -> usize;

    /// Inputs for `idx`. `augment` is the epoch seed during training.
    fn inputs(&self, idx: &[usize], augment: Option<u64>) -> Result<ModelInputs>;

    /// Backbone stores whose parameters are optimized with the head.
    fn trainable_stores(&self) -> Vec<ParamStore> {
        Vec::new()
    }
}

/// Precomputed frozen-backbone features, one row per post.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    text_final: Tensor,
    text_inter: Tensor,
    image_penultimate: Tensor,
    image_inter: Tensor,
}

fn stack(rows: Vec<Tensor>) -> Result<Tensor> {
    Ok(Tensor::cat(&rows, 0)?.to_dtype(DType::F32)?)
}

impl FeatureTable {
    /// Runs both backbones in evaluation mode over every post, in parallel.
    pub fn extract(
        encoders: &Encoders,
        posts: &[UnlabeledPost],
        image_root: &Path,
    ) -> Result<Self> {
        if posts.is_empty() {
            return Err(Error::Data("no posts to encode".into()));
        }
        let rows = posts
            .par_iter()
            .map(|p| {
                let seq = encoders.prepare(p)?;
                let x = encoders.inputs(&[p], &[&seq], image_root, None)?;
                for t in [
                    &x.text_final,
                    &x.text_inter,
                    &x.image_penultimate,
                    &x.image_inter,
                ] {
                    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Training(format!(
                            "post {}: backbone produced non-finite features",
                            p.id
                        )));
                    }
                }
                Ok(x)
            })
            .collect::<Result<Vec<ModelInputs>>>()?;
        let pick =
            |f: fn(&ModelInputs) -> &Tensor| stack(rows.iter().map(|r| f(r).detach()).collect());
        Ok(FeatureTable {
            ids: posts.iter().map(|p| p.id.clone()).collect(),
            text_final: pick(|r| &r.text_final)?,
            text_inter: pick(|r| &r.text_inter)?,
            image_penultimate: pick(|r| &r.image_penultimate)?,
            image_inter: pick(|r| &r.image_inter)?,
        })
    }

    /// Builds a table from explicit rows, `[N, dim]` each.
    pub fn from_tensors(
        ids: Vec<String>,
        text_final: Tensor,
        text_inter: Tensor,
        image_penultimate: Tensor,
        image_inter: Tensor,
    ) -> Result<Self> {
        let n = ids.len();
        for t in [&text_final, &text_inter, &image_penultimate, &image_inter] {
            crate::error::check_dim("feature rows", n, t.dim(0)?)?;
        }
        Ok(FeatureTable {
            ids,
            text_final,
            text_inter,
            image_penultimate,
            image_inter,
        })
    }
}

impl FeatureSource for FeatureTable {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn image_feature_dim(&self) -> usize {
        self.image_penultimate.dims()[1]
    }

    fn image_inter_dim(&self) -> usize {
        self.image_inter.dims()[1]
    }

    fn inputs(&self, idx: &[usize], _augment: Option<u64>) -> Result<ModelInputs> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!("example index {bad} out of range")));
        }
        let ix: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
        let ix = Tensor::from_vec(ix, idx.len(), &Device::Cpu)?;
        Ok(ModelInputs {
            text_final: self.text_final.index_select(&ix, 0)?,
            text_inter: self.text_inter.index_select(&ix, 0)?,
            image_penultimate: self.image_penultimate.index_select(&ix, 0)?,
            image_inter: self.image_inter.index_select(&ix, 0)?,
        })
    }
}

/// Runs the backbones on every batch. Used when backbones are fine-tuned or
/// images are augmented.
pub struct LiveFeatures {
    encoders: Encoders,
    posts: Vec<UnlabeledPost>,
    seqs: Vec<TokenSequence>,
    image_root: PathBuf,
}

impl LiveFeatures {
    pub fn new(encoders: Encoders, posts: Vec<UnlabeledPost>, image_root: &Path) -> Result<Self> {
        let seqs = posts
            .iter()
            .map(|p| encoders.prepare(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(LiveFeatures {
            encoders,
            posts,
            seqs,
            image_root: image_root.to_path_buf(),
        })
    }

    pub fn encoders(&self) -> &Encoders {
        &self.encoders
    }
}

impl FeatureSource for LiveFeatures {
    fn len(&self) -> usize {
        self.posts.len()
    }

    fn image_feature_dim(&self) -> usize {
        self.encoders.image.backbone.feature_dim()
    }

    fn image_inter_dim(&self) -> usize {
        self.encoders.image.backbone.intermediate_dim()
    }

    fn inputs(&self, idx: &[usize], augment: Option<u64>) -> Result<ModelInputs> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!("example index {bad} out of range")));
        }
        let posts: Vec<&UnlabeledPost> = idx.iter().map(|&i| &self.posts[i]).collect();
        let seqs: Vec<&TokenSequence> = idx.iter().map(|&i| &self.seqs[i]).collect();
        self.encoders
            .inputs(&posts, &seqs, &self.image_root, augment)
    }

    fn trainable_stores(&self) -> Vec<ParamStore> {
        [self.encoders.text_store(), self.encoders.image_store()]
            .into_iter()
            .filter(|s| s.is_trainable())
            .cloned()
            .collect()
    }
}
