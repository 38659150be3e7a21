//! Preprocesses an image and encodes it with a seeded backbone:
//! `cargo run --example image_encoding -- [image.png] [standin|resnet152|densenet161]`.
//! Without an image a gradient test pattern is used.

use candle_core::DType;
use image::{DynamicImage, Rgb, RgbImage};
use semfuse::image::{
    build_image_backbone, encode_image, load_image, preprocess_image, ImageBackboneKind,
    ImageProjection, Normalization, IMAGE_DIM,
};
use semfuse::params::ParamStore;

fn main() -> semfuse::Result<()> {
    let mut args = std::env::args().skip(1);
    let img = match args.next() {
        Some(p) => load_image(p.as_ref())?,
        None => DynamicImage::ImageRgb8(RgbImage::from_fn(300, 200, |x, y| {
            Rgb([x as u8, y as u8, 128])
        })),
    };
    let kind: ImageBackboneKind = args.next().as_deref().unwrap_or("standin").parse()?;

    let norm = Normalization::default();
    let eval = preprocess_image(&img, false, 0, &norm)?;
    let augmented = preprocess_image(&img, true, 42, &norm)?;
    println!(
        "eval tensor {:?}, augmented pixel differs: {}",
        (3, 224, 224),
        eval.at(0, 0, 0) != augmented.at(0, 0, 0)
    );

    let backbone = build_image_backbone(kind, None, 1, DType::F32, false)?;
    let head = ParamStore::seeded(2, DType::F32, false);
    let projection = ImageProjection::new(
        backbone.feature_dim(),
        IMAGE_DIM,
        head.var_builder().pp("projection"),
    )?;
    let repr = encode_image(&eval, backbone.as_ref(), &projection)?;
    println!(
        "{kind}: penultimate {} -> projected {}, intermediate {}",
        backbone.feature_dim(),
        repr.final_.len(),
        repr.intermediate.len()
    );
    Ok(())
}
