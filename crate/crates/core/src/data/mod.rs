//! Dataset schema, ingestion and corpus-level utilities.
//!
//! A dataset is a UTF-8 file with one JSON object per line:
//!
//! ```text
//! {"id": "g-1", "text": "...", "image_path": "img/g-1.jpg", "ocr_text": "...",
//!  "binary_label": 1, "category_label": "racial", "source": "gab"}
//! ```

mod folds;
mod kappa;
mod lexicon;
mod stats;

pub use folds::{make_fold_plan, Fold, FoldPlan};
pub use kappa::{fleiss_kappa, AnnotationMatrix};
pub use lexicon::{lexicon_filter, Lexicon, DEFAULT_LEXICON};
pub use stats::{dataset_stats, CategoryNgrams, CorpusStats, NgramCount};

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum BinaryLabel {
    NonAntisemitic = 0,
    Antisemitic = 1,
}

impl TryFrom<u8> for BinaryLabel {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            0 => Ok(BinaryLabel::NonAntisemitic),
            1 => Ok(BinaryLabel::Antisemitic),
            other => Err(format!("binary_label must be 0 or 1, got {other}")),
        }
    }
}

impl From<BinaryLabel> for u8 {
    fn from(v: BinaryLabel) -> u8 {
        v as u8
    }
}

/// The four antisemitism categories, in the column order used by the
/// published confusion matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Political,
    Economic,
    Religious,
    Racial,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Political,
        Category::Economic,
        Category::Religious,
        Category::Racial,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Category> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Political => "political",
            Category::Economic => "economic",
            Category::Religious => "religious",
            Category::Racial => "racial",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Twitter,
    Gab,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostRecord {
    pub id: String,
    pub text: String,
    pub image_path: String,
    #[serde(default)]
    pub ocr_text: String,
    pub binary_label: BinaryLabel,
    pub category_label: Option<Category>,
    pub source: Source,
}

impl PostRecord {
    /// Checks the label invariant: a category is present iff the post is antisemitic.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        match (self.binary_label, self.category_label) {
            (BinaryLabel::Antisemitic, None) => Err(format!(
                "record {}: antisemitic post without category_label",
                self.id
            )),
            (BinaryLabel::NonAntisemitic, Some(c)) => Err(format!(
                "record {}: category_label {c} on a non-antisemitic post",
                self.id
            )),
            _ => Ok(()),
        }
    }
}

/// A post with no labels, as consumed by prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledPost {
    pub id: String,
    pub text: String,
    pub image_path: String,
    #[serde(default)]
    pub ocr_text: String,
}

impl From<&PostRecord> for UnlabeledPost {
    fn from(r: &PostRecord) -> Self {
        UnlabeledPost {
            id: r.id.clone(),
            text: r.text.clone(),
            image_path: r.image_path.clone(),
            ocr_text: r.ocr_text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub records: Vec<PostRecord>,
    /// Lines rejected in lenient mode. Always empty after a strict load.
    pub skipped: Vec<SkippedLine>,
}

pub fn resolve_image(image_root: &Path, image_path: &str) -> PathBuf {
    image_root.join(image_path)
}

fn check_image(path: &Path) -> std::result::Result<(), String> {
    image::ImageReader::open(path)
        .map_err(|e| format!("image {} unreadable: {e}", path.display()))?
        .with_guessed_format()
        .map_err(|e| format!("image {} unreadable: {e}", path.display()))?
        .decode()
        .map(|_| ())
        .map_err(|e| format!("image {} not decodable: {e}", path.display()))
}

/// Reads a line-delimited dataset file.
///
/// In strict mode the first invalid line aborts the load with its line number.
/// In lenient mode invalid lines are skipped and reported in
/// [`LoadedDataset::skipped`]. Image files are decoded only when
/// `check_images` is set.
pub fn load_dataset_with(
    path: &Path,
    image_root: &Path,
    strict: bool,
    check_images: bool,
) -> Result<LoadedDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let outcome = serde_json::from_str::<PostRecord>(&line)
            .map_err(|e| format!("malformed record: {e}"))
            .and_then(|r| r.validate().map(|_| r))
            .and_then(|r| {
                if seen.contains(&r.id) {
                    Err(format!("duplicate id {}", r.id))
                } else {
                    Ok(r)
                }
            })
            .and_then(|r| {
                if check_images {
                    check_image(&resolve_image(image_root, &r.image_path))?;
                }
                Ok(r)
            });
        match outcome {
            Ok(r) => {
                seen.insert(r.id.clone());
                records.push(r);
            }
            Err(msg) if strict => return Err(Error::Record { line: line_no, msg }),
            Err(reason) => skipped.push(SkippedLine {
                line: line_no,
                reason,
            }),
        }
    }
    Ok(LoadedDataset { records, skipped })
}

/// Loads a dataset; strict mode also requires every image to decode.
pub fn load_dataset(path: &Path, image_root: &Path, strict: bool) -> Result<LoadedDataset> {
    load_dataset_with(path, image_root, strict, true)
}

pub fn save_dataset(records: &[PostRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads posts for prediction. Label fields, if present, are ignored.
pub fn load_unlabeled(path: &Path) -> Result<Vec<UnlabeledPost>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let post: UnlabeledPost = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            msg: format!("malformed record: {e}"),
        })?;
        if !seen.insert(post.id.clone()) {
            return Err(Error::Record {
                line: i + 1,
                msg: format!("duplicate id {}", post.id),
            });
        }
        out.push(post);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, binary: u8, cat: &str) -> String {
        format!(
            r#"{{"id":"{id}","text":"t","image_path":"a.png","ocr_text":"","binary_label":{binary},"category_label":{cat},"source":"gab"}}"#
        )
    }

    fn write(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn two_good_lines_give_two_records() {
        let f = write(&[line("a", 0, "null"), line("b", 1, "\"racial\"")]);
        let d = load_dataset_with(f.path(), Path::new("."), true, false).unwrap();
        assert_eq!(d.records.len(), 2);
        assert_eq!(d.records[1].category_label, Some(Category::Racial));
    }

    #[test]
    fn category_on_negative_post_is_rejected() {
        let f = write(&[line("a", 0, "\"political\"")]);
        let err = load_dataset_with(f.path(), Path::new("."), true, false).unwrap_err();
        assert!(matches!(err, Error::Record { line: 1, .. }), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write(&[line("a", 0, "null"), "{not json".into()]);
        match load_dataset_with(f.path(), Path::new("."), true, false) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected_strict_and_skipped_lenient() {
        let f = write(&[line("a", 0, "null"), line("a", 0, "null")]);
        assert!(load_dataset_with(f.path(), Path::new("."), true, false).is_err());
        let d = load_dataset_with(f.path(), Path::new("."), false, false).unwrap();
        assert_eq!(d.records.len(), 1);
        assert_eq!(d.skipped.len(), 1);
        assert_eq!(d.skipped[0].line, 2);
    }

    #[test]
    fn missing_image_fails_strict_load() {
        let f = write(&[line("a", 0, "null")]);
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(f.path(), dir.path(), true).is_err());
        let lenient = load_dataset(f.path(), dir.path(), false).unwrap();
        assert!(lenient.records.is_empty());
        assert_eq!(lenient.skipped.len(), 1);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err =
            load_dataset(Path::new("/nonexistent/x.jsonl"), Path::new("."), true).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn unlabeled_reader_ignores_labels() {
        let f = write(&[
            line("a", 1, "\"racial\""),
            r#"{"id":"b","text":"x","image_path":"b.png"}"#.into(),
        ]);
        let posts = load_unlabeled(f.path()).unwrap();
        assert_eq!(posts.len(), 2);
        assert_eq!(posts[1].ocr_text, "");
    }
}
