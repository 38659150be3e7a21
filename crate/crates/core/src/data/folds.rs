use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryLabel, PostRecord};
use crate::error::{Error, Result};

/// Share of each fold's non-test ids that goes to validation (16 of 80).
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: FoldPlan = serde_json::from_str(&text)?;
        if plan.folds.len() != plan.k {
            return Err(Error::Data(format!(
                "fold plan declares k={} but lists {} folds",
                plan.k,
                plan.folds.len()
            )));
        }
        Ok(plan)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Every id that appears in some test set.
    pub fn all_ids(&self) -> HashSet<&str> {
        self.folds
            .iter()
            .flat_map(|f| f.test.iter().map(String::as_str))
            .collect()
    }

    /// Checks disjointness and coverage of the plan against `ids`.
    pub fn check(&self, ids: &[&str]) -> std::result::Result<(), String> {
        let universe: HashSet<&str> = ids.iter().copied().collect();
        let mut tested = HashSet::new();
        for (i, f) in self.folds.iter().enumerate() {
            let mut in_fold = HashSet::new();
            for id in f.train.iter().chain(&f.val).chain(&f.test) {
                if !in_fold.insert(id.as_str()) {
                    return Err(format!("fold {i}: id {id} appears twice"));
                }
            }
            if in_fold != universe {
                return Err(format!("fold {i}: train/val/test do not cover the id set"));
            }
            for id in &f.test {
                if !tested.insert(id.as_str()) {
                    return Err(format!("id {id} is in more than one test set"));
                }
            }
        }
        if tested != universe {
            return Err("test sets do not cover the id set".into());
        }
        Ok(())
    }
}

/// Builds a k-fold plan stratified by binary label.
///
/// Ids of each class are shuffled, laid out class after class, and dealt
/// round-robin into k buckets, so bucket sizes differ by at most one and each
/// bucket holds a proportional share of both classes. Bucket i is fold i's
/// test set. Validation takes `round(0.2 * rest)` ids from the remaining
/// buckets by systematic sampling over the same layout, which keeps it
/// stratified too.
pub fn make_fold_plan(records: &[PostRecord], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Data(format!("k must be at least 2, got {k}")));
    }
    if records.len() < k {
        return Err(Error::Data(format!(
            "k={k} exceeds the number of records ({})",
            records.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layout: Vec<&str> = Vec::with_capacity(records.len());
    for label in [BinaryLabel::NonAntisemitic, BinaryLabel::Antisemitic] {
        let mut group: Vec<&str> = records
            .iter()
            .filter(|r| r.binary_label == label)
            .map(|r| r.id.as_str())
            .collect();
        group.shuffle(&mut rng);
        layout.extend(group);
    }
    let bucket_of = |pos: usize| pos % k;

    let folds = (0..k)
        .map(|fold| {
            let test: Vec<String> = layout
                .iter()
                .enumerate()
                .filter(|(p, _)| bucket_of(*p) == fold)
                .map(|(_, id)| id.to_string())
                .collect();
            let rest: Vec<&str> = layout
                .iter()
                .enumerate()
                .filter(|(p, _)| bucket_of(*p) != fold)
                .map(|(_, id)| *id)
                .collect();
            let n_val = (VAL_FRACTION * rest.len() as f64).round() as usize;
            let mut train = Vec::with_capacity(rest.len() - n_val);
            let mut val = Vec::with_capacity(n_val);
            let r = rest.len();
            for (j, id) in rest.iter().enumerate() {
                if (j + 1) * n_val / r > j * n_val / r {
                    val.push(id.to_string());
                } else {
                    train.push(id.to_string());
                }
            }
            Fold { train, val, test }
        })
        .collect();
    Ok(FoldPlan { k, seed, folds })
}
