use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Count-sketch projection `R^d -> R^D`: coordinate `i` is added to bucket
/// `h[i]` with sign `s[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountSketchParams {
    pub input_dim: usize,
    pub sketch_dim: usize,
    pub h: Vec<u32>,
    pub s: Vec<i8>,
    pub seed: u64,
}

impl CountSketchParams {
    pub fn new(input_dim: usize, sketch_dim: usize, seed: u64) -> Result<Self> {
        if sketch_dim == 0 || input_dim == 0 {
            return Err(Error::Config(
                "count sketch needs input_dim >= 1 and sketch_dim >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = Vec::with_capacity(input_dim);
        let mut s = Vec::with_capacity(input_dim);
        for _ in 0..input_dim {
            h.push(rng.random_range(0..sketch_dim as u32));
            s.push(if rng.random::<bool>() { 1 } else { -1 });
        }
        Ok(CountSketchParams {
            input_dim,
            sketch_dim,
            h,
            s,
            seed,
        })
    }

    /// Rebuilds from explicit maps, checking they are fully populated and in range.
    pub fn from_maps(sketch_dim: usize, h: Vec<u32>, s: Vec<i8>, seed: u64) -> Result<Self> {
        check_dim("count sketch sign map", h.len(), s.len())?;
        if sketch_dim == 0 || h.is_empty() {
            return Err(Error::Config("empty count sketch".into()));
        }
        if h.iter().any(|&j| j as usize >= sketch_dim) || s.iter().any(|&v| v != 1 && v != -1) {
            return Err(Error::Config("count sketch maps out of range".into()));
        }
        Ok(CountSketchParams {
            input_dim: h.len(),
            sketch_dim,
            h,
            s,
            seed,
        })
    }

    /// Dense `[d, D]` matrix with `M[i, h[i]] = s[i]`, so that `x @ M` sketches rows of `x`.
    pub fn matrix(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let mut m = vec![0.0f64; self.input_dim * self.sketch_dim];
        for i in 0..self.input_dim {
            m[i * self.sketch_dim + self.h[i] as usize] = self.s[i] as f64;
        }
        Ok(Tensor::from_vec(m, (self.input_dim, self.sketch_dim), device)?.to_dtype(dtype)?)
    }
}

pub fn count_sketch(x: &[f64], p: &CountSketchParams) -> Result<Vec<f64>> {
    check_dim("count sketch input", p.input_dim, x.len())?;
    let mut out = vec![0.0; p.sketch_dim];
    for (i, &v) in x.iter().enumerate() {
        out[p.h[i] as usize] += p.s[i] as f64 * v;
    }
    Ok(out)
}
