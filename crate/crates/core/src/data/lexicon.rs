use std::collections::HashSet;
use std::path::Path;

use crate::data::PostRecord;
use crate::error::{Error, Result};
use crate::text::clean_tokens;

/// Seed terms used to collect candidate posts. Not the original collection
/// lexicon, which also contained slurs; override with a lexicon file.
pub const DEFAULT_LEXICON: &str = include_str!("../../assets/default_lexicon.txt");

/// Case-insensitive set of terms. A term may span several tokens
/// ("star of david"); matching is always on whole tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    terms: Vec<Vec<String>>,
}

impl Lexicon {
    pub fn new<I, S>(terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for t in terms {
            let toks = clean_tokens(t.as_ref());
            if toks.is_empty() {
                return Err(Error::Data(format!(
                    "lexicon term {:?} is empty after normalisation",
                    t.as_ref()
                )));
            }
            if seen.insert(toks.clone()) {
                out.push(toks);
            }
        }
        if out.is_empty() {
            return Err(Error::Data("lexicon is empty".into()));
        }
        Ok(Lexicon { terms: out })
    }

    /// Parses one term per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn default_terms() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn matches(&self, text: &str) -> bool {
        let tokens = clean_tokens(text);
        self.terms.iter().any(|term| {
            tokens
                .windows(term.len())
                .any(|w| w.iter().zip(term).all(|(a, b)| a == b))
        })
    }
}

/// Keeps the records whose post text contains at least one lexicon term.
pub fn lexicon_filter(records: &[PostRecord], lexicon: &Lexicon) -> Vec<PostRecord> {
    records
        .iter()
        .filter(|r| lexicon.matches(&r.text))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BinaryLabel, Source};
    use proptest::prelude::*;

    fn post(text: &str) -> PostRecord {
        PostRecord {
            id: text.to_string(),
            text: text.to_string(),
            image_path: "x.png".into(),
            ocr_text: String::new(),
            binary_label: BinaryLabel::NonAntisemitic,
            category_label: None,
            source: Source::Twitter,
        }
    }

    #[test]
    fn whole_token_membership() {
        let lex = Lexicon::new(["Jewish"]).unwrap();
        let kept = lexicon_filter(
            &[
                post("Shabbat shalom to my jewish friends"),
                post("hello world"),
            ],
            &lex,
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].text, "Shabbat shalom to my jewish friends");
    }

    #[test]
    fn whole_token_differs_from_substring_matching() {
        let lex = Lexicon::new(["jew"]).unwrap();
        let text = "a shiny jewel";
        let substring_oracle = text.to_lowercase().contains("jew");
        assert!(substring_oracle);
        assert!(lexicon_filter(&[post(text)], &lex).is_empty());
    }

    #[test]
    fn multi_token_terms_match_in_sequence() {
        let lex = Lexicon::new(["star of david"]).unwrap();
        assert!(lex.matches("The Star-of-David flag"));
        assert!(!lex.matches("david of star"));
    }

    #[test]
    fn empty_lexicon_rejected() {
        assert!(Lexicon::new(Vec::<&str>::new()).is_err());
        assert!(Lexicon::new(["  "]).is_err());
        assert!(Lexicon::parse("# only a comment\n").is_err());
    }

    #[test]
    fn bundled_lexicon_loads() {
        assert_eq!(Lexicon::default_terms().len(), 8);
    }

    proptest! {
        #[test]
        fn filtering_is_idempotent(texts in proptest::collection::vec("(jewish|hebrew|foo|bar| |!){0,6}", 0..12)) {
            let lex = Lexicon::default_terms();
            let records: Vec<_> = texts.iter().map(|t| post(t)).collect();
            let once = lexicon_filter(&records, &lex);
            let twice = lexicon_filter(&once, &lex);
            prop_assert_eq!(once, twice);
        }
    }
}
