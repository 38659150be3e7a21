//! Text + OCR encoder: cleaning, pair layout and transformer encoding.

mod clean;
mod sequence;
mod tokenizer;
mod transformer;

pub use clean::{clean_text, clean_tokens};
pub use sequence::{build_joint_sequence, TokenSequence, Truncation};
pub use tokenizer::{
    HashingTokenizer, HfTokenizer, PretrainedStyle, SequenceLayout, TextTokenizer,
};
pub use transformer::{TransformerConfig, TransformerEncoder, TransformerOutput};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const TEXT_DIM: usize = 768;
pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextBackboneKind {
    #[serde(rename = "bert-base")]
    BertBase,
    #[serde(rename = "roberta-base")]
    RobertaBase,
    #[serde(rename = "standin")]
    Standin,
}

impl TextBackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TextBackboneKind::BertBase => "bert-base",
            TextBackboneKind::RobertaBase => "roberta-base",
            TextBackboneKind::Standin => "standin",
        }
    }
}

impl fmt::Display for TextBackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TextBackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bert-base" => Ok(TextBackboneKind::BertBase),
            "roberta-base" => Ok(TextBackboneKind::RobertaBase),
            "standin" => Ok(TextBackboneKind::Standin),
            other => Err(Error::Config(format!("unknown text_backbone {other:?}"))),
        }
    }
}

/// CLS vectors of the last layer (`final`, the fusion input T) and of the
/// intermediate layer used by MFAS.
#[derive(Debug, Clone, PartialEq)]
pub struct TextRepr {
    pub final_: Vec<f64>,
    pub intermediate: Vec<f64>,
}

/// Tensor form of [`TextRepr`], `[1, hidden]` each, still attached to the graph.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    pub final_: Tensor,
    pub intermediate: Tensor,
}

/// A transformer that maps a token sequence to per-layer CLS vectors.
pub trait TextBackbone: Send + Sync {
    fn hidden_size(&self) -> usize;
    fn num_layers(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn forward(&self, seq: &TokenSequence) -> Result<TransformerOutput>;
    fn params(&self) -> &ParamStore;

    /// 1-based layer whose CLS vector is the intermediate representation.
    fn intermediate_layer(&self) -> usize {
        self.num_layers().div_ceil(2).max(1)
    }
}

impl TextBackbone for TransformerEncoder {
    fn hidden_size(&self) -> usize {
        self.config().hidden_size
    }

    fn num_layers(&self) -> usize {
        self.config().num_hidden_layers
    }

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn forward(&self, seq: &TokenSequence) -> Result<TransformerOutput> {
        TransformerEncoder::forward(self, &seq.ids, &seq.segment_ids)
    }

    fn params(&self) -> &ParamStore {
        TransformerEncoder::params(self)
    }
}

/// Runs the backbone and keeps the two CLS vectors as graph tensors.
pub fn text_features(seq: &TokenSequence, backbone: &dyn TextBackbone) -> Result<TextFeatures> {
    if let Some(&bad) = seq
        .ids
        .iter()
        .find(|&&i| i as usize >= backbone.vocab_size())
    {
        return Err(Error::TokenOutOfRange {
            id: bad,
            vocab: backbone.vocab_size(),
        });
    }
    let out = backbone.forward(seq)?;
    let inter = backbone.intermediate_layer();
    Ok(TextFeatures {
        final_: out.cls_per_layer.last().expect("non-empty").clone(),
        intermediate: out.cls_per_layer[inter - 1].clone(),
    })
}

fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Encodes a token sequence into the final and intermediate CLS vectors.
pub fn encode_text(seq: &TokenSequence, backbone: &dyn TextBackbone) -> Result<TextRepr> {
    let f = text_features(seq, backbone)?;
    let repr = TextRepr {
        final_: to_vec(&f.final_)?,
        intermediate: to_vec(&f.intermediate)?,
    };
    if repr
        .final_
        .iter()
        .chain(&repr.intermediate)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Training(
            "text encoder produced non-finite values".into(),
        ));
    }
    Ok(repr)
}

/// Backbone plus tokenizer and pair-layout settings.
pub struct TextEncoder {
    pub kind: TextBackboneKind,
    pub backbone: Box<dyn TextBackbone>,
    pub tokenizer: Box<dyn TextTokenizer>,
    pub max_len: usize,
    pub truncation: Truncation,
}

impl TextEncoder {
    /// Seed-initialised stand-in: hashed word vocabulary, two 768-wide layers.
    pub fn standin(seed: u64, dtype: DType, trainable: bool) -> Result<Self> {
        let cfg = TransformerConfig::standin();
        let tokenizer = HashingTokenizer::new(cfg.vocab_size)?;
        let backbone = TransformerEncoder::new(cfg, ParamStore::seeded(seed, dtype, trainable))?;
        Ok(TextEncoder {
            kind: TextBackboneKind::Standin,
            backbone: Box::new(backbone),
            tokenizer: Box::new(tokenizer),
            max_len: DEFAULT_MAX_LEN,
            truncation: Truncation::PostFirst,
        })
    }

    /// Loads a pretrained model directory holding `config.json`,
    /// `model.safetensors` and `tokenizer.json`.
    pub fn pretrained(
        kind: TextBackboneKind,
        dir: &Path,
        dtype: DType,
        trainable: bool,
    ) -> Result<Self> {
        let style = match kind {
            TextBackboneKind::BertBase => PretrainedStyle::Bert,
            TextBackboneKind::RobertaBase => PretrainedStyle::Roberta,
            TextBackboneKind::Standin => {
                return Err(Error::Config(
                    "the stand-in backbone has no pretrained form".into(),
                ))
            }
        };
        let tokenizer = HfTokenizer::from_file(&dir.join("tokenizer.json"), style)?;
        let backbone = TransformerEncoder::from_pretrained(dir, dtype, trainable)?;
        Ok(TextEncoder {
            kind,
            backbone: Box::new(backbone),
            tokenizer: Box::new(tokenizer),
            max_len: DEFAULT_MAX_LEN,
            truncation: Truncation::PostFirst,
        })
    }

    /// Cleans both texts and builds the joint sequence.
    pub fn prepare(&self, post_text: &str, ocr_text: &str) -> Result<TokenSequence> {
        build_joint_sequence(
            &clean_text(post_text),
            &clean_text(ocr_text),
            self.tokenizer.as_ref(),
            self.max_len,
            self.truncation,
        )
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<TextRepr> {
        encode_text(seq, self.backbone.as_ref())
    }

    pub fn features(&self, seq: &TokenSequence) -> Result<TextFeatures> {
        text_features(seq, self.backbone.as_ref())
    }

    pub fn hidden_size(&self) -> usize {
        self.backbone.hidden_size()
    }
}
