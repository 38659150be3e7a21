use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::data::{BinaryLabel, Category, PostRecord};
use crate::text::clean_tokens;

static STOPWORDS: LazyLock<HashSet<&'static str>> = LazyLock::new(|| {
    include_str!("../../assets/stopwords_en.txt")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
});

pub const TOP_NGRAMS: usize = 10;

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(token)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramCount {
    pub ngram: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CategoryNgrams {
    pub unigrams: Vec<NgramCount>,
    pub bigrams: Vec<NgramCount>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub non_antisemitic: usize,
    pub antisemitic: usize,
    pub political: usize,
    pub economic: usize,
    pub religious: usize,
    pub racial: usize,
    /// Keyed by lowercase category name.
    pub ngrams: BTreeMap<String, CategoryNgrams>,
    /// Mean cleaned word count of post text over all records.
    pub avg_text_words: f64,
    /// Mean cleaned word count of OCR text over records whose OCR text is non-empty.
    pub avg_ocr_words: f64,
    /// Percentage of records whose OCR text is non-empty after cleaning.
    pub pct_images_with_text: f64,
}

impl CorpusStats {
    pub fn category_count(&self, c: Category) -> usize {
        match c {
            Category::Political => self.political,
            Category::Economic => self.economic,
            Category::Religious => self.religious,
            Category::Racial => self.racial,
        }
    }
}

fn top(counts: HashMap<String, usize>, k: usize) -> Vec<NgramCount> {
    let mut v: Vec<NgramCount> = counts
        .into_iter()
        .map(|(ngram, count)| NgramCount { ngram, count })
        .collect();
    v.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.ngram.cmp(&b.ngram)));
    v.truncate(k);
    v
}

/// Class counts, per-category frequent n-grams and length statistics.
///
/// N-grams come from cleaned, lowercased post text. Unigrams skip stopwords;
/// bigrams are adjacent token pairs in which neither token is a stopword.
/// Ties in frequency are ordered alphabetically.
pub fn dataset_stats(records: &[PostRecord]) -> CorpusStats {
    let mut s = CorpusStats {
        total: records.len(),
        ..CorpusStats::default()
    };
    let mut uni: HashMap<Category, HashMap<String, usize>> = HashMap::new();
    let mut bi: HashMap<Category, HashMap<String, usize>> = HashMap::new();
    let mut text_words = 0usize;
    let mut ocr_words = 0usize;
    let mut with_ocr = 0usize;

    for r in records {
        match r.binary_label {
            BinaryLabel::NonAntisemitic => s.non_antisemitic += 1,
            BinaryLabel::Antisemitic => s.antisemitic += 1,
        }
        let tokens = clean_tokens(&r.text);
        text_words += tokens.len();
        let ocr = clean_tokens(&r.ocr_text);
        if !ocr.is_empty() {
            with_ocr += 1;
            ocr_words += ocr.len();
        }
        let Some(cat) = r.category_label else {
            continue;
        };
        match cat {
            Category::Political => s.political += 1,
            Category::Economic => s.economic += 1,
            Category::Religious => s.religious += 1,
            Category::Racial => s.racial += 1,
        }
        let u = uni.entry(cat).or_default();
        for t in tokens.iter().filter(|t| !is_stopword(t)) {
            *u.entry(t.clone()).or_default() += 1;
        }
        let b = bi.entry(cat).or_default();
        for w in tokens.windows(2) {
            if !is_stopword(&w[0]) && !is_stopword(&w[1]) {
                *b.entry(format!("{} {}", w[0], w[1])).or_default() += 1;
            }
        }
    }

    for cat in Category::ALL {
        s.ngrams.insert(
            cat.as_str().to_string(),
            CategoryNgrams {
                unigrams: top(uni.remove(&cat).unwrap_or_default(), TOP_NGRAMS),
                bigrams: top(bi.remove(&cat).unwrap_or_default(), TOP_NGRAMS),
            },
        );
    }
    if s.total > 0 {
        s.avg_text_words = text_words as f64 / s.total as f64;
        s.pct_images_with_text = 100.0 * with_ocr as f64 / s.total as f64;
    }
    if with_ocr > 0 {
        s.avg_ocr_words = ocr_words as f64 / with_ocr as f64;
    }
    s
}
