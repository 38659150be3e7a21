//! GradCAM heatmaps for the image pathway and attention exports for the text
//! pathway.

use std::path::{Path, PathBuf};

use candle_core::{DType, IndexOp, Tensor, Var};
use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{global_avg_pool, ImageBackbone, ImageTensor, IMAGE_SIZE};
use crate::model::{Mode, ModelInputs, MultimodalModel};
use crate::text::{TextBackbone, TextFeatures, TokenSequence};

/// A non-negative `224 x 224` map, max-normalized to 1 unless all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    values: Vec<f64>,
}

/// Bilinear resize of a row-major `h x w` map, sampling at pixel centres
/// (the `align_corners = false` convention).
pub fn bilinear_resize(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

impl Heatmap {
    /// ReLU, upsampling to 224x224 and max-normalization of an `h x w` map.
    pub fn from_map(map: &[f64], h: usize, w: usize) -> Result<Self> {
        crate::error::check_dim("class activation map", h * w, map.len())?;
        if h == 0 || w == 0 {
            return Err(Error::Unsupported("empty class activation map".into()));
        }
        let relu: Vec<f64> = map.iter().map(|v| v.max(0.0)).collect();
        let mut values = bilinear_resize(&relu, h, w, IMAGE_SIZE, IMAGE_SIZE);
        let max = values.iter().cloned().fold(0.0, f64::max);
        if !max.is_finite() {
            return Err(Error::Training("non-finite class activation map".into()));
        }
        if max > 0.0 {
            values.iter_mut().for_each(|v| *v = (*v / max).max(0.0));
        }
        Ok(Heatmap { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * IMAGE_SIZE + x]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values
            .chunks(IMAGE_SIZE)
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn to_gray_image(&self) -> GrayImage {
        let side = IMAGE_SIZE as u32;
        GrayImage::from_fn(side, side, |x, y| {
            Luma([(self.at(y as usize, x as usize) * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8])
        })
    }
}

/// GradCAM over a given last-conv map `[1, C, h, w]`. `score` maps the map to
/// a scalar class score; its gradient weights the channels.
pub fn grad_cam_from_map<F>(last_conv: &Tensor, score: F) -> Result<Heatmap>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let (b, c, h, w) = match last_conv.dims() {
        &[b, c, h, w] => (b, c, h, w),
        _ => {
            return Err(Error::Unsupported(
                "image backbone exposes no convolutional feature map".into(),
            ))
        }
    };
    crate::error::check_dim("grad-cam batch", 1, b)?;
    let a = Var::from_tensor(&last_conv.detach())?;
    let s = score(a.as_tensor())?;
    if s.elem_count() != 1 {
        return Err(Error::Data("class score must be a scalar".into()));
    }
    let grads = s.sum_all()?.backward()?;
    let g = match grads.get(a.as_tensor()) {
        Some(g) => g.to_dtype(DType::F64)?,
        None => Tensor::zeros((1, c, h, w), DType::F64, last_conv.device())?,
    };
    let weights = g.mean_keepdim(3)?.mean_keepdim(2)?;
    let cam = a
        .as_tensor()
        .to_dtype(DType::F64)?
        .broadcast_mul(&weights)?
        .sum(1)?;
    let map = cam.flatten_all()?.to_vec1::<f64>()?;
    Heatmap::from_map(&map, h, w)
}

/// GradCAM of `target_class` for one post. The class score is the
/// pre-softmax logit of the evaluation-mode head.
pub fn grad_cam(
    model: &MultimodalModel,
    backbone: &dyn ImageBackbone,
    image: &ImageTensor,
    text: &TextFeatures,
    target_class: usize,
) -> Result<Heatmap> {
    let classes = model.config().num_classes();
    if target_class >= classes {
        return Err(Error::Data(format!(
            "target class {target_class} out of range for {classes} classes"
        )));
    }
    let x = image
        .to_tensor(backbone.params().device())?
        .to_dtype(backbone.params().dtype())?;
    let feats = backbone.forward(&x)?;
    let text_final = text.final_.detach();
    let text_inter = text.intermediate.detach();
    let image_inter = feats.intermediate.detach();
    grad_cam_from_map(&feats.last_conv, |a| {
        let inputs = ModelInputs {
            text_final: text_final.clone(),
            text_inter: text_inter.clone(),
            image_penultimate: global_avg_pool(a)?,
            image_inter: image_inter.clone(),
        };
        let code = model.joint_encode(&model.fuse(&inputs)?, &mut Mode::Eval)?;
        Ok(model.logits(&code, &mut Mode::Eval)?.i((0, target_class))?)
    })
}

/// Last-layer attention probabilities with the tokens they refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub tokens: Vec<String>,
    /// `heads x L x L`; row `i` of a head is the distribution of token `i`'s attention.
    pub weights: Vec<Vec<Vec<f64>>>,
}

impl AttentionDump {
    pub fn heads(&self) -> usize {
        self.weights.len()
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        self.weights
            .iter()
            .flatten()
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub fn export_attention(backbone: &dyn TextBackbone, seq: &TokenSequence) -> Result<AttentionDump> {
    let out = backbone.forward(seq)?;
    let att = out.last_attention.to_dtype(DType::F64)?;
    let (_, heads, l, l2) = att.dims4()?;
    crate::error::check_dim("attention matrix", l, l2)?;
    crate::error::check_dim("token alignment", seq.tokens.len(), l)?;
    let weights = (0..heads)
        .map(|h| att.i((0, h))?.to_vec2::<f64>().map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionDump {
        tokens: seq.tokens.clone(),
        weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCamFile {
    pub post_id: String,
    pub target_class: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<Vec<f64>>,
}

/// File-name-safe form of a post id.
pub fn file_stem(post_id: &str) -> String {
    let s: String = post_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() || s.chars().all(|c| c == '.') {
        format!("_{s}")
    } else {
        s
    }
}

/// Writes `<id>.gradcam.png`, `<id>.gradcam.json` and `<id>.attention.json`.
pub fn write_explanation(
    dir: &Path,
    post_id: &str,
    target_class: usize,
    heatmap: &Heatmap,
    attention: &AttentionDump,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = file_stem(post_id);
    let png = dir.join(format!("{stem}.gradcam.png"));
    heatmap.to_gray_image().save(&png)?;
    let cam = dir.join(format!("{stem}.gradcam.json"));
    let file = GradCamFile {
        post_id: post_id.to_owned(),
        target_class,
        height: IMAGE_SIZE,
        width: IMAGE_SIZE,
        values: heatmap.rows(),
    };
    std::fs::write(&cam, serde_json::to_string(&file)?).map_err(|e| Error::io(&cam, e))?;
    let att = dir.join(format!("{stem}.attention.json"));
    std::fs::write(&att, serde_json::to_string(attention)?).map_err(|e| Error::io(&att, e))?;
    Ok(vec![png, cam, att])
}
