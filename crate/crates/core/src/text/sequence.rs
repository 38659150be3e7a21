use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenizer::TextTokenizer;

/// Which segment gives way first when the pair exceeds `max_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Shorten the post text and keep the OCR text whole while it fits.
    #[default]
    PostFirst,
    OcrFirst,
}

/// `[CLS] post [SEP] ocr` (plus any terminal token), ready for a backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub tokens: Vec<String>,
    pub segment_ids: Vec<u32>,
    /// Index of the first separator token.
    pub sep_index: usize,
    pub post_len: usize,
    pub ocr_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lays out two already-cleaned texts in the backbone's pair frame and
/// truncates to `max_len` (leading tokens of each segment are kept).
pub fn build_joint_sequence(
    post_text: &str,
    ocr_text: &str,
    tokenizer: &dyn TextTokenizer,
    max_len: usize,
    truncation: Truncation,
) -> Result<TokenSequence> {
    let layout = tokenizer.layout();
    let specials = layout.special_count();
    if max_len < specials {
        return Err(Error::Config(format!(
            "max_len {max_len} cannot hold the {specials} special tokens"
        )));
    }
    let mut post = tokenizer.tokenize(post_text)?;
    let mut ocr = tokenizer.tokenize(ocr_text)?;
    let budget = max_len - specials;
    let (post_keep, ocr_keep) = match truncation {
        Truncation::PostFirst => {
            let o = ocr.len().min(budget);
            (post.len().min(budget - o), o)
        }
        Truncation::OcrFirst => {
            let p = post.len().min(budget);
            (p, ocr.len().min(budget - p))
        }
    };
    post.truncate(post_keep);
    ocr.truncate(ocr_keep);

    let n = specials + post_keep + ocr_keep;
    let mut ids = Vec::with_capacity(n);
    let mut tokens = Vec::with_capacity(n);
    let mut segment_ids = Vec::with_capacity(n);
    let second = u32::from(layout.segment_ids);
    let mut push = |(id, tok): (u32, String), seg: u32| {
        ids.push(id);
        tokens.push(tok);
        segment_ids.push(seg);
    };
    push(layout.cls.clone(), 0);
    for t in post {
        push(t, 0);
    }
    let sep_index = 1 + post_keep;
    for t in layout.separator.iter().cloned() {
        push(t, 0);
    }
    for t in ocr {
        push(t, second);
    }
    if let Some(t) = layout.terminal.clone() {
        push(t, second);
    }
    Ok(TokenSequence {
        ids,
        tokens,
        segment_ids,
        sep_index,
        post_len: post_keep,
        ocr_len: ocr_keep,
    })
}
