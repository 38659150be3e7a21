use std::path::Path;

use crate::error::{Error, Result};
use crate::params::fnv1a;

/// Special-token frame a backbone expects around a text pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub cls: (u32, String),
    /// Tokens between the two segments; `[SEP]` for BERT, `</s></s>` for RoBERTa.
    pub separator: Vec<(u32, String)>,
    pub terminal: Option<(u32, String)>,
    /// Whether the second segment gets token-type id 1.
    pub segment_ids: bool,
}

impl SequenceLayout {
    pub fn special_count(&self) -> usize {
        1 + self.separator.len() + usize::from(self.terminal.is_some())
    }
}

pub trait TextTokenizer: Send + Sync {
    /// Sub-word tokens of `text`, without special tokens.
    fn tokenize(&self, text: &str) -> Result<Vec<(u32, String)>>;
    fn layout(&self) -> &SequenceLayout;
    fn vocab_size(&self) -> usize;
}

/// Word-level tokenizer for the stand-in backbone: lowercase words hashed
/// into a fixed vocabulary. Ids 0..4 are `[PAD] [CLS] [SEP] [UNK]`.
#[derive(Debug, Clone)]
pub struct HashingTokenizer {
    vocab_size: usize,
    layout: SequenceLayout,
}

pub const HASH_RESERVED: usize = 4;

impl HashingTokenizer {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size <= HASH_RESERVED {
            return Err(Error::Config(format!(
                "hashing vocabulary must exceed {HASH_RESERVED}, got {vocab_size}"
            )));
        }
        Ok(HashingTokenizer {
            vocab_size,
            layout: SequenceLayout {
                cls: (1, "[CLS]".into()),
                separator: vec![(2, "[SEP]".into())],
                terminal: None,
                segment_ids: true,
            },
        })
    }

    pub fn word_id(&self, word: &str) -> u32 {
        let span = (self.vocab_size - HASH_RESERVED) as u64;
        (HASH_RESERVED as u64 + fnv1a(word.as_bytes()) % span) as u32
    }
}

impl TextTokenizer for HashingTokenizer {
    fn tokenize(&self, text: &str) -> Result<Vec<(u32, String)>> {
        Ok(text
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                (self.word_id(&w), w)
            })
            .collect())
    }

    fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainedStyle {
    Bert,
    Roberta,
}

/// Wrapper over a Hugging Face `tokenizer.json`.
pub struct HfTokenizer {
    inner: tokenizers::Tokenizer,
    layout: SequenceLayout,
}

impl HfTokenizer {
    pub fn from_file(path: &Path, style: PretrainedStyle) -> Result<Self> {
        let inner = tokenizers::Tokenizer::from_file(path)
            .map_err(|e| Error::Tokenizer(format!("{}: {e}", path.display())))?;
        let id = |tok: &str| {
            inner
                .token_to_id(tok)
                .map(|i| (i, tok.to_string()))
                .ok_or_else(|| {
                    Error::Tokenizer(format!("special token {tok} missing from vocabulary"))
                })
        };
        let layout = match style {
            PretrainedStyle::Bert => SequenceLayout {
                cls: id("[CLS]")?,
                separator: vec![id("[SEP]")?],
                terminal: Some(id("[SEP]")?),
                segment_ids: true,
            },
            PretrainedStyle::Roberta => SequenceLayout {
                cls: id("<s>")?,
                separator: vec![id("</s>")?, id("</s>")?],
                terminal: Some(id("</s>")?),
                segment_ids: false,
            },
        };
        Ok(HfTokenizer { inner, layout })
    }
}

impl TextTokenizer for HfTokenizer {
    fn tokenize(&self, text: &str) -> Result<Vec<(u32, String)>> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        let enc = self
            .inner
            .encode(text, false)
            .map_err(|e| Error::Tokenizer(e.to_string()))?;
        Ok(enc
            .get_ids()
            .iter()
            .copied()
            .zip(enc.get_tokens().iter().cloned())
            .collect())
    }

    fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    fn vocab_size(&self) -> usize {
        self.inner.get_vocab_size(true)
    }
}
