//! Small labelled corpora that are separable by construction, for fixtures,
//! examples and smoke runs.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_dataset, BinaryLabel, Category, PostRecord, Source};
use crate::error::{Error, Result};

const NEUTRAL_WORDS: &[&str] = &[
    "garden", "coffee", "weekend", "football", "sunset", "recipe", "music", "travel",
];
const CATEGORY_WORDS: [&[&str]; 4] = [
    &["control", "government", "puppet", "regime"],
    &["bankers", "money", "greedy", "finance"],
    &["synagogue", "ritual", "talmud", "deicide"],
    &["blood", "inferior", "race", "vermin"],
];

/// Side of the generated square images.
pub const SYNTHETIC_IMAGE_SIZE: u32 = 48;

/// Base colour and stripe period of a class. Each label (and each category)
/// gets its own colour so frozen random features separate them.
fn palette(label: BinaryLabel, category: Option<Category>) -> ([u8; 3], u32) {
    match (label, category) {
        (BinaryLabel::NonAntisemitic, _) => ([40, 90, 220], 0),
        (_, Some(Category::Political)) => ([230, 40, 40], 4),
        (_, Some(Category::Economic)) => ([230, 200, 30], 6),
        (_, Some(Category::Religious)) => ([40, 200, 80], 8),
        _ => ([200, 40, 220], 12),
    }
}

fn render(label: BinaryLabel, category: Option<Category>, rng: &mut ChaCha8Rng) -> RgbImage {
    let (base, period) = palette(label, category);
    RgbImage::from_fn(SYNTHETIC_IMAGE_SIZE, SYNTHETIC_IMAGE_SIZE, |x, y| {
        let stripe = period > 0 && (x + y) / period % 2 == 0;
        let px = base.map(|c| {
            let v = if stripe { c / 2 } else { c } as i32 + rng.random_range(-12..=12);
            v.clamp(0, 255) as u8
        });
        Rgb(px)
    })
}

fn sentence(words: &[&str], rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n)
        .map(|_| *words.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `n` records alternating between classes; antisemitic records cycle
/// through the four categories. Images are referenced as `images/<id>.png`.
pub fn synthetic_records(n: usize, seed: u64) -> Vec<PostRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let antisemitic = i % 2 == 1;
            let category = antisemitic.then(|| Category::ALL[(i / 2) % 4]);
            let words = match category {
                Some(c) => CATEGORY_WORDS[c.index()],
                None => NEUTRAL_WORDS,
            };
            let id = format!("syn-{i:04}");
            PostRecord {
                text: sentence(words, &mut rng, 6),
                ocr_text: sentence(words, &mut rng, 2),
                image_path: format!("images/{id}.png"),
                binary_label: if antisemitic {
                    BinaryLabel::Antisemitic
                } else {
                    BinaryLabel::NonAntisemitic
                },
                category_label: category,
                source: if i % 3 == 0 {
                    Source::Twitter
                } else {
                    Source::Gab
                },
                id,
            }
        })
        .collect()
}

/// Writes `dataset.jsonl` and `images/*.png` under `dir`; returns the dataset path.
pub fn write_synthetic_corpus(dir: &Path, n: usize, seed: u64) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::Data(
            "synthetic corpus needs at least one record".into(),
        ));
    }
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let records = synthetic_records(n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for r in &records {
        render(r.binary_label, r.category_label, &mut rng).save(dir.join(&r.image_path))?;
    }
    let path = dir.join("dataset.jsonl");
    save_dataset(&records, &path)?;
    Ok(path)
}
