use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{CountSketchParams, Fusion};
use crate::model::{ModelConfig, MultimodalModel};
use crate::params::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "semfuse";
const HEAD: &str = "head.";
const TEXT: &str = "text.";
const IMAGE: &str = "image.";

/// Everything besides tensors needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    /// Resolved experiment configuration, `key = value` lines.
    pub config: String,
    pub model: ModelConfig,
    pub seed: u64,
    pub fold: usize,
    pub text_backbone: String,
    pub image_backbone: String,
    pub sketches: Option<(CountSketchParams, CountSketchParams)>,
}

/// Head parameters plus, for fine-tuned runs, backbone parameters.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub head: HashMap<String, Tensor>,
    pub text: HashMap<String, Tensor>,
    pub image: HashMap<String, Tensor>,
}

fn tensors(store: &ParamStore) -> Result<HashMap<String, Tensor>> {
    store
        .named_tensors()
        .into_iter()
        .map(|(n, t)| Ok((n, t.copy()?)))
        .collect()
}

impl Checkpoint {
    /// Captures the model head; pass backbone stores to include fine-tuned weights.
    pub fn capture(
        model: &MultimodalModel,
        config: String,
        fold: usize,
        text_backbone: &str,
        image_backbone: &str,
        backbones: Option<(&ParamStore, &ParamStore)>,
    ) -> Result<Self> {
        let (text, image) = match backbones {
            Some((t, i)) => (tensors(t)?, tensors(i)?),
            None => (HashMap::new(), HashMap::new()),
        };
        Ok(Checkpoint {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                config,
                model: *model.config(),
                seed: model.fusion().seed(),
                fold,
                text_backbone: text_backbone.to_owned(),
                image_backbone: image_backbone.to_owned(),
                sketches: model.fusion().sketches().cloned(),
            },
            head: tensors(model.store())?,
            text,
            image,
        })
    }

    pub fn has_backbones(&self) -> bool {
        !self.text.is_empty() || !self.image.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named: Vec<(String, Tensor)> = Vec::new();
        for (prefix, map) in [(HEAD, &self.head), (TEXT, &self.text), (IMAGE, &self.image)] {
            for (n, t) in map {
                named.push((format!("{prefix}{n}"), t.contiguous()?));
            }
        }
        named.sort_by(|a, b| a.0.cmp(&b.0));
        let meta = HashMap::from([(META_KEY.to_owned(), serde_json::to_string(&self.meta)?)]);
        safetensors::serialize_to_file(named.iter().map(|(n, t)| (n.as_str(), t)), Some(meta), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: String| Error::Checkpoint(format!("{}: {e}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| bad("missing checkpoint metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {}",
                meta.version
            )));
        }
        let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut ck = Checkpoint {
            meta,
            head: HashMap::new(),
            text: HashMap::new(),
            image: HashMap::new(),
        };
        for (name, t) in all {
            if let Some(n) = name.strip_prefix(HEAD) {
                ck.head.insert(n.to_owned(), t);
            } else if let Some(n) = name.strip_prefix(TEXT) {
                ck.text.insert(n.to_owned(), t);
            } else if let Some(n) = name.strip_prefix(IMAGE) {
                ck.image.insert(n.to_owned(), t);
            } else {
                return Err(bad(format!("unexpected tensor {name}")));
            }
        }
        Ok(ck)
    }

    /// Rebuilds the head; every parameter must be present.
    pub fn model(&self) -> Result<MultimodalModel> {
        let m = &self.meta;
        let fusion =
            Fusion::with_sketches(m.model.fusion, m.model.dims, m.seed, m.sketches.clone())?;
        let store = ParamStore::from_tensors(self.head.clone(), m.seed, DType::F64, true, true);
        MultimodalModel::new(m.model, fusion, store)
    }
}
