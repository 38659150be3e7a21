//! Text/image fusion: concatenation, gated compact bilinear pooling, and the
//! two-stage MFAS topology.

mod circconv;
mod sketch;

pub use circconv::{circular_convolution, circular_convolution_tensor};
pub use sketch::{count_sketch, CountSketchParams};

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use candle_nn::ops::sigmoid;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::params::fnv1a;

pub const SKETCH_DIM: usize = 1536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Concat,
    GatedMcb,
    Mfas,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [FusionKind::Concat, FusionKind::GatedMcb, FusionKind::Mfas];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Concat => "concat",
            FusionKind::GatedMcb => "gated_mcb",
            FusionKind::Mfas => "mfas",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionKind::Concat),
            "gated_mcb" => Ok(FusionKind::GatedMcb),
            "mfas" => Ok(FusionKind::Mfas),
            other => Err(Error::Config(format!("unknown fusion {other:?}"))),
        }
    }
}

/// Sizes of the four modality vectors and of the MCB sketch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionDims {
    pub text: usize,
    pub image: usize,
    pub text_inter: usize,
    pub image_inter: usize,
    pub sketch: usize,
}

impl FusionDims {
    /// 768-d text and image vectors with the given intermediate image size.
    pub fn with_image_inter(image_inter: usize) -> Self {
        FusionDims {
            text: 768,
            image: 768,
            text_inter: 768,
            image_inter,
            sketch: SKETCH_DIM,
        }
    }

    pub fn output_dim(&self, kind: FusionKind) -> usize {
        match kind {
            FusionKind::Concat => self.text + self.image,
            FusionKind::GatedMcb => self.sketch,
            FusionKind::Mfas => self.text + self.image + self.text_inter + self.image_inter,
        }
    }
}

impl Default for FusionDims {
    /// ResNet-152 layout: |F| is 1536 for concat/MCB and 2816 for MFAS.
    fn default() -> Self {
        Self::with_image_inter(512)
    }
}

/// Fused vector F tagged with the fusion that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepr {
    kind: FusionKind,
    values: Vec<f64>,
}

impl FusedRepr {
    pub fn new(kind: FusionKind, values: Vec<f64>, dims: &FusionDims) -> Result<Self> {
        check_dim("fused representation", dims.output_dim(kind), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training("fusion produced non-finite values".into()));
        }
        Ok(FusedRepr { kind, values })
    }

    pub fn kind(&self) -> FusionKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `[T ; I]`.
pub fn fuse_concat(t: &[f64], i: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.len() + i.len());
    out.extend_from_slice(t);
    out.extend_from_slice(i);
    out
}

/// Pre-sigmoid compact bilinear pooling: the circular convolution of the two
/// count sketches, which equals a count sketch of the outer product `T I^T`.
pub fn mcb(
    t: &[f64],
    i: &[f64],
    pt: &CountSketchParams,
    pi: &CountSketchParams,
) -> Result<Vec<f64>> {
    check_dim("MCB sketch size", pt.sketch_dim, pi.sketch_dim)?;
    circular_convolution(&count_sketch(t, pt)?, &count_sketch(i, pi)?)
}

/// `sigmoid(conv(sketch(T), sketch(I)))`.
pub fn fuse_gated_mcb(
    t: &[f64],
    i: &[f64],
    pt: &CountSketchParams,
    pi: &CountSketchParams,
) -> Result<Vec<f64>> {
    Ok(mcb(t, i, pt, pi)?.into_iter().map(sig).collect())
}

/// `sigmoid([T_final ; I_final ; sigmoid([T_inter ; I_inter])])`.
pub fn fuse_mfas(t_final: &[f64], t_inter: &[f64], i_final: &[f64], i_inter: &[f64]) -> Vec<f64> {
    let inner: Vec<f64> = t_inter.iter().chain(i_inter).map(|&v| sig(v)).collect();
    t_final
        .iter()
        .chain(i_final)
        .chain(&inner)
        .map(|&v| sig(v))
        .collect()
}

pub fn fuse_concat_tensor(t: &Tensor, i: &Tensor) -> Result<Tensor> {
    Ok(Tensor::cat(&[t, i], 1)?)
}

/// Batched gated MCB; `mt`, `mi` are the dense sketch matrices.
pub fn fuse_gated_mcb_tensor(t: &Tensor, i: &Tensor, mt: &Tensor, mi: &Tensor) -> Result<Tensor> {
    let st = t.matmul(mt)?;
    let si = i.matmul(mi)?;
    Ok(sigmoid(&circular_convolution_tensor(&st, &si)?)?)
}

pub fn fuse_mfas_tensor(
    t_final: &Tensor,
    t_inter: &Tensor,
    i_final: &Tensor,
    i_inter: &Tensor,
) -> Result<Tensor> {
    let inner = sigmoid(&Tensor::cat(&[t_inter, i_inter], 1)?)?;
    Ok(sigmoid(&Tensor::cat(&[t_final, i_final, &inner], 1)?)?)
}

/// One example's modality vectors.
#[derive(Debug, Clone, Copy)]
pub struct ModalityVectors<'a> {
    pub text_final: &'a [f64],
    pub text_inter: &'a [f64],
    pub image_final: &'a [f64],
    pub image_inter: &'a [f64],
}

/// Batched modality tensors, `[B, dim]` each.
#[derive(Debug, Clone)]
pub struct FusionInputs {
    pub text_final: Tensor,
    pub text_inter: Tensor,
    pub image_final: Tensor,
    pub image_inter: Tensor,
}

/// A configured fusion with its fixed sketch parameters.
#[derive(Debug, Clone)]
pub struct Fusion {
    kind: FusionKind,
    dims: FusionDims,
    seed: u64,
    sketches: Option<(CountSketchParams, CountSketchParams)>,
    matrices: Option<(Tensor, Tensor)>,
}

impl Fusion {
    /// Sketch parameters, when needed, are drawn from `seed` (one stream per modality).
    pub fn new(kind: FusionKind, dims: FusionDims, seed: u64) -> Result<Self> {
        let sketches = match kind {
            FusionKind::GatedMcb => Some((
                CountSketchParams::new(dims.text, dims.sketch, seed ^ fnv1a(b"sketch.text"))?,
                CountSketchParams::new(dims.image, dims.sketch, seed ^ fnv1a(b"sketch.image"))?,
            )),
            _ => None,
        };
        Self::build(kind, dims, seed, sketches)
    }

    /// Restores a fusion from saved sketch parameters.
    pub fn with_sketches(
        kind: FusionKind,
        dims: FusionDims,
        seed: u64,
        sketches: Option<(CountSketchParams, CountSketchParams)>,
    ) -> Result<Self> {
        if kind == FusionKind::GatedMcb {
            let (st, si) = sketches.as_ref().ok_or_else(|| {
                Error::Checkpoint("gated_mcb fusion without sketch parameters".into())
            })?;
            check_dim("text sketch input", dims.text, st.input_dim)?;
            check_dim("image sketch input", dims.image, si.input_dim)?;
            check_dim("text sketch size", dims.sketch, st.sketch_dim)?;
            check_dim("image sketch size", dims.sketch, si.sketch_dim)?;
        }
        Self::build(kind, dims, seed, sketches)
    }

    fn build(
        kind: FusionKind,
        dims: FusionDims,
        seed: u64,
        sketches: Option<(CountSketchParams, CountSketchParams)>,
    ) -> Result<Self> {
        let matrices = match &sketches {
            Some((st, si)) if kind == FusionKind::GatedMcb => Some((
                st.matrix(DType::F64, &Device::Cpu)?,
                si.matrix(DType::F64, &Device::Cpu)?,
            )),
            _ => None,
        };
        Ok(Fusion {
            kind,
            dims,
            seed,
            sketches: if kind == FusionKind::GatedMcb {
                sketches
            } else {
                None
            },
            matrices,
        })
    }

    pub fn kind(&self) -> FusionKind {
        self.kind
    }

    pub fn dims(&self) -> &FusionDims {
        &self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sketches(&self) -> Option<&(CountSketchParams, CountSketchParams)> {
        self.sketches.as_ref()
    }

    pub fn output_dim(&self) -> usize {
        self.dims.output_dim(self.kind)
    }

    fn check_inputs(&self, v: &ModalityVectors) -> Result<()> {
        check_dim("text vector", self.dims.text, v.text_final.len())?;
        check_dim("image vector", self.dims.image, v.image_final.len())?;
        if self.kind == FusionKind::Mfas {
            check_dim(
                "intermediate text vector",
                self.dims.text_inter,
                v.text_inter.len(),
            )?;
            check_dim(
                "intermediate image vector",
                self.dims.image_inter,
                v.image_inter.len(),
            )?;
        }
        Ok(())
    }

    pub fn fuse(&self, v: &ModalityVectors) -> Result<FusedRepr> {
        self.check_inputs(v)?;
        let values = match self.kind {
            FusionKind::Concat => fuse_concat(v.text_final, v.image_final),
            FusionKind::GatedMcb => {
                let (st, si) = self.sketches.as_ref().expect("built with sketches");
                fuse_gated_mcb(v.text_final, v.image_final, st, si)?
            }
            FusionKind::Mfas => fuse_mfas(v.text_final, v.text_inter, v.image_final, v.image_inter),
        };
        FusedRepr::new(self.kind, values, &self.dims)
    }

    /// Batched, differentiable fusion; returns `[B, |F|]`.
    pub fn forward(&self, x: &FusionInputs) -> Result<Tensor> {
        check_dim("text vector", self.dims.text, x.text_final.dim(1)?)?;
        check_dim("image vector", self.dims.image, x.image_final.dim(1)?)?;
        let out = match self.kind {
            FusionKind::Concat => fuse_concat_tensor(&x.text_final, &x.image_final)?,
            FusionKind::GatedMcb => {
                let (mt, mi) = self.matrices.as_ref().expect("built with sketches");
                let dt = x.text_final.dtype();
                fuse_gated_mcb_tensor(
                    &x.text_final,
                    &x.image_final,
                    &mt.to_dtype(dt)?,
                    &mi.to_dtype(dt)?,
                )?
            }
            FusionKind::Mfas => {
                check_dim(
                    "intermediate text vector",
                    self.dims.text_inter,
                    x.text_inter.dim(1)?,
                )?;
                check_dim(
                    "intermediate image vector",
                    self.dims.image_inter,
                    x.image_inter.dim(1)?,
                )?;
                fuse_mfas_tensor(&x.text_final, &x.text_inter, &x.image_final, &x.image_inter)?
            }
        };
        check_dim("fused representation", self.output_dim(), out.dim(1)?)?;
        Ok(out)
    }
}
