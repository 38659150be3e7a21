use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[i][c]` = number of annotators who put item `i` in category `c`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationMatrix {
    counts: Vec<Vec<u32>>,
    raters: u32,
}

impl AnnotationMatrix {
    pub fn new(counts: Vec<Vec<u32>>) -> Result<Self> {
        let first = counts
            .first()
            .ok_or_else(|| Error::Data("annotation matrix has no items".into()))?;
        let categories = first.len();
        if categories == 0 {
            return Err(Error::Data("annotation matrix has no categories".into()));
        }
        let raters: u32 = first.iter().sum();
        if raters < 2 {
            return Err(Error::Data(format!(
                "need at least 2 annotators per item, got {raters}"
            )));
        }
        for (i, row) in counts.iter().enumerate() {
            if row.len() != categories {
                return Err(Error::Data(format!(
                    "item {i} has {} categories, expected {categories}",
                    row.len()
                )));
            }
            let s: u32 = row.iter().sum();
            if s != raters {
                return Err(Error::Data(format!(
                    "item {i} has {s} ratings, expected {raters}"
                )));
            }
        }
        Ok(AnnotationMatrix { counts, raters })
    }

    /// Builds the matrix from per-item label lists (one label per annotator).
    pub fn from_labels(items: &[Vec<usize>], categories: usize) -> Result<Self> {
        let mut counts = Vec::with_capacity(items.len());
        for (i, labels) in items.iter().enumerate() {
            let mut row = vec![0u32; categories];
            for &l in labels {
                *row.get_mut(l).ok_or_else(|| {
                    Error::Data(format!("item {i}: label {l} >= {categories} categories"))
                })? += 1;
            }
            counts.push(row);
        }
        Self::new(counts)
    }

    pub fn items(&self) -> usize {
        self.counts.len()
    }

    pub fn categories(&self) -> usize {
        self.counts[0].len()
    }

    pub fn raters(&self) -> u32 {
        self.raters
    }

    pub fn counts(&self) -> &[Vec<u32>] {
        &self.counts
    }
}

/// Fleiss' kappa for a fixed number of raters per item.
///
/// Returns [`Error::AgreementUndefined`] when chance agreement is 1, i.e.
/// every rating in the matrix falls in a single category.
pub fn fleiss_kappa(m: &AnnotationMatrix) -> Result<f64> {
    let n = f64::from(m.raters);
    let items = m.items() as f64;
    let mut marginals = vec![0f64; m.categories()];
    let mut p_bar = 0.0;
    for row in &m.counts {
        let sq: f64 = row.iter().map(|&c| f64::from(c) * f64::from(c)).sum();
        p_bar += (sq - n) / (n * (n - 1.0));
        for (acc, &c) in marginals.iter_mut().zip(row) {
            *acc += f64::from(c);
        }
    }
    p_bar /= items;
    let p_e: f64 = marginals
        .iter()
        .map(|&c| {
            let p = c / (items * n);
            p * p
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Err(Error::AgreementUndefined);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}
