//! BERT-style transformer encoder.
//!
//! Parameter names follow the Hugging Face layout (`embeddings.*`,
//! `encoder.layer.{i}.*`) so pretrained BERT and RoBERTa safetensors load
//! directly. The same code, seed-initialised at small depth, is the stand-in
//! backbone.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{embedding, linear, Embedding, Init, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Layer normalization over the last dimension, written with plain tensor ops
/// so gradients reach its input (candle's fused kernel has no backward pass).
struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

fn layer_norm(size: usize, eps: f64, vb: VarBuilder) -> candle_core::Result<LayerNorm> {
    Ok(LayerNorm {
        weight: vb.get_with_hints(size, "weight", Init::Const(1.0))?,
        bias: vb.get_with_hints(size, "bias", Init::Const(0.0))?,
        eps,
    })
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let centred = x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        centred
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

fn yes() -> bool {
    true
}

fn default_eps() -> f64 {
    1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "one")]
    pub type_vocab_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    /// First position id; RoBERTa reserves ids up to its padding index.
    #[serde(default)]
    pub position_offset: usize,
    /// Residual connection around self-attention.
    #[serde(default = "yes")]
    pub attention_residual: bool,
    /// Layer norms after the embeddings and each sub-block.
    #[serde(default = "yes")]
    pub layer_norm: bool,
}

fn one() -> usize {
    1
}

impl TransformerConfig {
    /// 12-layer, 768-wide BERT base.
    pub fn bert_base() -> Self {
        TransformerConfig {
            vocab_size: 30522,
            hidden_size: 768,
            num_hidden_layers: 12,
            num_attention_heads: 12,
            intermediate_size: 3072,
            max_position_embeddings: 512,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            position_offset: 0,
            attention_residual: true,
            layer_norm: true,
        }
    }

    pub fn roberta_base() -> Self {
        TransformerConfig {
            vocab_size: 50265,
            max_position_embeddings: 514,
            type_vocab_size: 1,
            layer_norm_eps: 1e-5,
            position_offset: 2,
            ..Self::bert_base()
        }
    }

    /// Two-layer, 768-wide encoder with a hashed word vocabulary.
    pub fn standin() -> Self {
        TransformerConfig {
            vocab_size: 8192,
            hidden_size: 768,
            num_hidden_layers: 2,
            num_attention_heads: 12,
            intermediate_size: 1536,
            max_position_embeddings: 512,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            position_offset: 0,
            attention_residual: true,
            layer_norm: true,
        }
    }

    /// Reads a Hugging Face `config.json`.
    pub fn from_hf_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Hf {
            #[serde(default)]
            model_type: String,
            #[serde(default)]
            pad_token_id: Option<usize>,
            #[serde(flatten)]
            cfg: TransformerConfig,
        }
        let hf: Hf = serde_json::from_str(text)?;
        let mut cfg = hf.cfg;
        if hf.model_type == "roberta" || hf.model_type == "xlm-roberta" {
            cfg.position_offset = hf.pad_token_id.unwrap_or(1) + 1;
        }
        Ok(cfg)
    }

    /// 1-based index of the layer whose CLS vector is the intermediate output.
    pub fn intermediate_layer(&self) -> usize {
        self.num_hidden_layers.div_ceil(2).max(1)
    }

    fn validate(&self) -> Result<()> {
        if self.num_hidden_layers == 0 || self.num_attention_heads == 0 {
            return Err(Error::Config(
                "transformer needs at least one layer and one head".into(),
            ));
        }
        if !self.hidden_size.is_multiple_of(self.num_attention_heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_attention_heads
            )));
        }
        Ok(())
    }
}

struct SelfAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    output_norm: Option<LayerNorm>,
    heads: usize,
    head_dim: usize,
    residual: bool,
}

impl SelfAttention {
    fn new(cfg: &TransformerConfig, vb: VarBuilder) -> Result<Self> {
        let h = cfg.hidden_size;
        let sa = vb.pp("self");
        Ok(SelfAttention {
            query: linear(h, h, sa.pp("query"))?,
            key: linear(h, h, sa.pp("key"))?,
            value: linear(h, h, sa.pp("value"))?,
            output: linear(h, h, vb.pp("output").pp("dense"))?,
            output_norm: cfg
                .layer_norm
                .then(|| layer_norm(h, cfg.layer_norm_eps, vb.pp("output").pp("LayerNorm")))
                .transpose()?,
            heads: cfg.num_attention_heads,
            head_dim: h / cfg.num_attention_heads,
            residual: cfg.attention_residual,
        })
    }

    /// Returns the block output and the attention probabilities `[B, heads, L, L]`.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, l, h) = x.dims3()?;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, l, self.heads, self.head_dim))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.query.forward(x)?)?;
        let k = split(self.key.forward(x)?)?;
        let v = split(self.value.forward(x)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, l, h))?;
        let mut out = self.output.forward(&ctx)?;
        if self.residual {
            out = (out + x)?;
        }
        if let Some(n) = &self.output_norm {
            out = n.forward(&out)?;
        }
        Ok((out, probs))
    }
}

struct EncoderLayer {
    attention: SelfAttention,
    intermediate: Linear,
    output: Linear,
    output_norm: Option<LayerNorm>,
}

impl EncoderLayer {
    fn new(cfg: &TransformerConfig, vb: VarBuilder) -> Result<Self> {
        Ok(EncoderLayer {
            attention: SelfAttention::new(cfg, vb.pp("attention"))?,
            intermediate: linear(
                cfg.hidden_size,
                cfg.intermediate_size,
                vb.pp("intermediate").pp("dense"),
            )?,
            output: linear(
                cfg.intermediate_size,
                cfg.hidden_size,
                vb.pp("output").pp("dense"),
            )?,
            output_norm: cfg
                .layer_norm
                .then(|| {
                    layer_norm(
                        cfg.hidden_size,
                        cfg.layer_norm_eps,
                        vb.pp("output").pp("LayerNorm"),
                    )
                })
                .transpose()?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (a, probs) = self.attention.forward(x)?;
        let f = self
            .output
            .forward(&self.intermediate.forward(&a)?.gelu_erf()?)?;
        let mut out = (f + &a)?;
        if let Some(n) = &self.output_norm {
            out = n.forward(&out)?;
        }
        Ok((out, probs))
    }
}

/// Outputs of one forward pass over a single sequence.
#[derive(Debug, Clone)]
pub struct TransformerOutput {
    /// CLS vector `[1, hidden]` after each layer.
    pub cls_per_layer: Vec<Tensor>,
    /// Last-layer attention probabilities `[1, heads, L, L]`.
    pub last_attention: Tensor,
}

pub struct TransformerEncoder {
    config: TransformerConfig,
    word_embeddings: Embedding,
    position_embeddings: Embedding,
    token_type_embeddings: Embedding,
    embedding_norm: Option<LayerNorm>,
    layers: Vec<EncoderLayer>,
    params: ParamStore,
}

impl TransformerEncoder {
    pub fn new(config: TransformerConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let vb = params.var_builder();
        let emb = vb.pp("embeddings");
        let h = config.hidden_size;
        let word_embeddings = embedding(config.vocab_size, h, emb.pp("word_embeddings"))?;
        let position_embeddings = embedding(
            config.max_position_embeddings,
            h,
            emb.pp("position_embeddings"),
        )?;
        let token_type_embeddings = embedding(
            config.type_vocab_size.max(1),
            h,
            emb.pp("token_type_embeddings"),
        )?;
        let embedding_norm = config
            .layer_norm
            .then(|| layer_norm(h, config.layer_norm_eps, emb.pp("LayerNorm")))
            .transpose()?;
        let layers = (0..config.num_hidden_layers)
            .map(|i| EncoderLayer::new(&config, vb.pp("encoder").pp("layer").pp(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TransformerEncoder {
            config,
            word_embeddings,
            position_embeddings,
            token_type_embeddings,
            embedding_norm,
            layers,
            params,
        })
    }

    /// Loads `config.json` and `model.safetensors` from a Hugging Face model
    /// directory. A leading `bert.` / `roberta.` prefix on tensor names is
    /// stripped.
    pub fn from_pretrained(dir: &Path, dtype: DType, trainable: bool) -> Result<Self> {
        let cfg_path = dir.join("config.json");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config = TransformerConfig::from_hf_json(&text)?;
        let weights_path = dir.join("model.safetensors");
        let raw = candle_core::safetensors::load(&weights_path, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", weights_path.display())))?;
        let mut tensors = HashMap::with_capacity(raw.len());
        for (name, t) in raw {
            let name = ["bert.", "roberta."]
                .iter()
                .find_map(|p| name.strip_prefix(p))
                .map(str::to_string)
                .unwrap_or(name);
            tensors.insert(name, t);
        }
        Self::new(
            config,
            ParamStore::from_tensors(tensors, 0, dtype, trainable, true),
        )
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn forward(&self, ids: &[u32], segment_ids: &[u32]) -> Result<TransformerOutput> {
        let l = ids.len();
        if l == 0 {
            return Err(Error::Data("empty token sequence".into()));
        }
        if l + self.config.position_offset > self.config.max_position_embeddings {
            return Err(Error::Data(format!(
                "sequence of {l} tokens exceeds {} positions",
                self.config.max_position_embeddings
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: self.config.vocab_size,
            });
        }
        let dev = self.params.device();
        let ids_t = Tensor::new(ids, dev)?.unsqueeze(0)?;
        let pos: Vec<u32> = (0..l)
            .map(|p| (p + self.config.position_offset) as u32)
            .collect();
        let pos_t = Tensor::new(pos.as_slice(), dev)?.unsqueeze(0)?;
        let types: Vec<u32> = if self.config.type_vocab_size > 1 {
            segment_ids
                .iter()
                .map(|&s| s.min(self.config.type_vocab_size as u32 - 1))
                .collect()
        } else {
            vec![0; l]
        };
        let types_t = Tensor::new(types.as_slice(), dev)?.unsqueeze(0)?;
        let mut x = ((self.word_embeddings.forward(&ids_t)?
            + self.position_embeddings.forward(&pos_t)?)?
            + self.token_type_embeddings.forward(&types_t)?)?;
        if let Some(n) = &self.embedding_norm {
            x = n.forward(&x)?;
        }
        let mut cls_per_layer = Vec::with_capacity(self.layers.len());
        let mut last_attention = None;
        for layer in &self.layers {
            let (out, probs) = layer.forward(&x)?;
            cls_per_layer.push(out.narrow(1, 0, 1)?.squeeze(1)?);
            last_attention = Some(probs);
            x = out;
        }
        Ok(TransformerOutput {
            cls_per_layer,
            last_attention: last_attention.expect("at least one layer"),
        })
    }
}
