use std::sync::LazyLock;

use regex::Regex;

static URL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)(?:https?://|ftp://|www\.)\S*").expect("valid url regex"));

/// Strips URLs and every non-alphanumeric character, collapsing whitespace.
///
/// Letters and digits of any script survive; punctuation, including `#` and
/// `@`, becomes a word break. Case is preserved.
pub fn clean_text(raw: &str) -> String {
    let without_urls = URL.replace_all(raw, " ");
    let mut out = String::with_capacity(without_urls.len());
    let mut pending_space = false;
    for ch in without_urls.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(ch);
        } else {
            pending_space = true;
        }
    }
    out
}

/// Lowercased whitespace tokens of [`clean_text`].
pub fn clean_tokens(raw: &str) -> Vec<String> {
    clean_text(raw)
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent reference: drop URL tokens by prefix, then map each char
    /// through an explicit class table.
    fn reference(raw: &str) -> String {
        let mut kept = String::new();
        let mut rest = raw;
        while !rest.is_empty() {
            let lower = rest.to_lowercase();
            let url_len = ["http://", "https://", "ftp://", "www."]
                .iter()
                .find(|p| lower.starts_with(*p) && rest.is_char_boundary(p.len()))
                .map(|_| rest.find(char::is_whitespace).unwrap_or(rest.len()));
            match url_len {
                Some(n) => {
                    kept.push(' ');
                    rest = &rest[n..];
                }
                None => {
                    let c = rest.chars().next().unwrap();
                    kept.push(if c.is_alphanumeric() { c } else { ' ' });
                    rest = &rest[c.len_utf8()..];
                }
            }
        }
        kept.split(' ')
            .filter(|w| !w.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn strips_urls_and_punctuation() {
        assert_eq!(clean_text("Check http://x.com this!!"), "Check this");
        assert_eq!(clean_text(""), "");
        assert_eq!(clean_text("a  b\tc https://t.co/Ab1 d"), "a b c d");
        assert_eq!(reference("a  b\tc https://t.co/Ab1 d"), "a b c d");
    }

    #[test]
    fn hashtags_and_mentions_become_words() {
        assert_eq!(clean_text("#Shabbat @user_1 ok"), "Shabbat user 1 ok");
    }

    proptest! {
        #[test]
        fn idempotent(s in "\\PC{0,80}") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once.clone());
        }

        #[test]
        fn matches_reference(s in "[a-zA-Z0-9 .,!?#@:/\\t]{0,60}|(https?://[a-z./]{1,10} [a-z]{1,5})") {
            prop_assert_eq!(clean_text(&s), reference(&s));
        }
    }
}
