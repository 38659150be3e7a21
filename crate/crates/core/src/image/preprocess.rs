use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 224;
/// Side of the square resize that random 224 crops are taken from.
pub const CROP_SOURCE: u32 = 256;

/// Per-channel mean/std applied to pixel values scaled to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    /// ImageNet statistics, as used when the CNN backbones were pretrained.
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// A normalised `3 x 224 x 224` image, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Vec<f32>,
}

impl ImageTensor {
    pub const SHAPE: (usize, usize, usize) = (3, IMAGE_SIZE, IMAGE_SIZE);

    pub fn from_chw(data: Vec<f32>) -> Result<Self> {
        let expected = 3 * IMAGE_SIZE * IMAGE_SIZE;
        if data.len() != expected {
            return Err(Error::Dimension {
                what: "image tensor",
                expected,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(
                "image tensor contains non-finite values".into(),
            ));
        }
        Ok(ImageTensor { data })
    }

    pub fn zeros() -> Self {
        ImageTensor {
            data: vec![0.0; 3 * IMAGE_SIZE * IMAGE_SIZE],
        }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Value at channel `c`, row `y`, column `x`.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * IMAGE_SIZE + y) * IMAGE_SIZE + x]
    }

    /// `[1, 3, 224, 224]` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (1, 3, IMAGE_SIZE, IMAGE_SIZE),
            device,
        )?)
    }

    /// Stacks several images into a `[B, 3, 224, 224]` batch.
    pub fn batch(images: &[&ImageTensor], device: &Device) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * 3 * IMAGE_SIZE * IMAGE_SIZE);
        for im in images {
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::from_vec(
            data,
            (images.len(), 3, IMAGE_SIZE, IMAGE_SIZE),
            device,
        )?)
    }
}

pub fn load_image(path: &Path) -> Result<DynamicImage> {
    Ok(image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?)
}

/// Resizes to 224x224 and normalises per channel.
///
/// In training mode the image is resized to 256x256, a 224x224 window is
/// cropped at a random offset and mirrored with probability 1/2; the draw is
/// a pure function of `seed`. Evaluation mode ignores `seed`.
pub fn preprocess_image(
    image: &DynamicImage,
    train_mode: bool,
    seed: u64,
    norm: &Normalization,
) -> Result<ImageTensor> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Data("image has zero size".into()));
    }
    let rgb = image.to_rgb8();
    let size = IMAGE_SIZE as u32;
    let prepared: RgbImage = if train_mode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let big = image::imageops::resize(&rgb, CROP_SOURCE, CROP_SOURCE, FilterType::Triangle);
        let x0 = rng.random_range(0..=CROP_SOURCE - size);
        let y0 = rng.random_range(0..=CROP_SOURCE - size);
        let flip = rng.random_bool(0.5);
        let mut crop = image::imageops::crop_imm(&big, x0, y0, size, size).to_image();
        if flip {
            image::imageops::flip_horizontal_in_place(&mut crop);
        }
        crop
    } else {
        image::imageops::resize(&rgb, size, size, FilterType::Triangle)
    };
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![0f32; 3 * plane];
    for (x, y, px) in prepared.enumerate_pixels() {
        let idx = y as usize * IMAGE_SIZE + x as usize;
        for c in 0..3 {
            data[c * plane + idx] = (f32::from(px[c]) / 255.0 - norm.mean[c]) / norm.std[c];
        }
    }
    ImageTensor::from_chw(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, Rgba, RgbaImage};

    fn gradient(w: u32, h: u32) -> DynamicImage {
        DynamicImage::ImageRgb8(RgbImage::from_fn(w, h, |x, y| {
            Rgb([
                (x * 255 / w) as u8,
                (y * 255 / h) as u8,
                ((x + y) % 256) as u8,
            ])
        }))
    }

    #[test]
    fn eval_shape_and_finiteness() {
        let t = preprocess_image(&gradient(500, 300), false, 0, &Normalization::default()).unwrap();
        assert_eq!(t.as_slice().len(), 3 * 224 * 224);
        assert!(t.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn train_mode_is_seed_deterministic() {
        let img = gradient(320, 240);
        let n = Normalization::default();
        let a = preprocess_image(&img, true, 42, &n).unwrap();
        let b = preprocess_image(&img, true, 42, &n).unwrap();
        assert_eq!(a, b);
        let differs = (0..20).any(|s| preprocess_image(&img, true, s, &n).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn eval_mode_ignores_seed() {
        let img = gradient(64, 64);
        let n = Normalization::default();
        assert_eq!(
            preprocess_image(&img, false, 1, &n).unwrap(),
            preprocess_image(&img, false, 2, &n).unwrap()
        );
    }

    #[test]
    fn constant_gray_normalises_to_closed_form() {
        let g = 128u8;
        let img = DynamicImage::ImageLuma8(GrayImage::from_pixel(37, 53, Luma([g])));
        let n = Normalization::default();
        let t = preprocess_image(&img, false, 0, &n).unwrap();
        for c in 0..3 {
            let expected = (f32::from(g) / 255.0 - n.mean[c]) / n.std[c];
            for (y, x) in [(0, 0), (111, 57), (223, 223)] {
                assert!((t.at(c, y, x) - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rgba_converted_to_three_channels() {
        let img = DynamicImage::ImageRgba8(RgbaImage::from_pixel(10, 10, Rgba([10, 20, 30, 0])));
        let t = preprocess_image(&img, false, 0, &Normalization::default()).unwrap();
        let n = Normalization::default();
        assert!((t.at(2, 5, 5) - (30.0 / 255.0 - n.mean[2]) / n.std[2]).abs() < 1e-6);
    }

    #[test]
    fn undecodable_file_errors() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, b"not an image").unwrap();
        assert!(load_image(f.path()).is_err());
    }
}
