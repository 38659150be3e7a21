//! GradCAM heat map and attention dump for one synthetic post, using a seeded
//! head over stand-in backbones: `cargo run --release --example explain_post -- [out_dir]`.

use std::path::PathBuf;

use semfuse::config::ExperimentConfig;
use semfuse::data::{load_dataset, UnlabeledPost};
use semfuse::explain::{export_attention, grad_cam, write_explanation};
use semfuse::model::MultimodalModel;
use semfuse::train::Encoders;

fn main() -> semfuse::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "explain-out".into()),
    );
    let dir = std::env::temp_dir().join("semfuse-explain");
    let path = semfuse::synthetic::write_synthetic_corpus(&dir, 2, 0)?;
    let post = UnlabeledPost::from(&load_dataset(&path, &dir, true)?.records[1]);

    let cfg = ExperimentConfig::default();
    let enc = Encoders::from_config(&cfg, false)?;
    let model = MultimodalModel::seeded(
        cfg.model_config(
            enc.image.backbone.feature_dim(),
            enc.image.backbone.intermediate_dim(),
        ),
        cfg.seed,
    )?;

    let seq = enc.prepare(&post)?;
    let text = enc.text.features(&seq)?;
    let image = enc.image_tensor(&post, &dir, None)?;
    let heatmap = grad_cam(&model, enc.image.backbone.as_ref(), &image, &text, 1)?;
    let attention = export_attention(enc.text.backbone.as_ref(), &seq)?;
    println!(
        "heat map range [{:.3}, {:.3}], {} attention heads",
        heatmap.min(),
        heatmap.max(),
        attention.heads()
    );
    for p in write_explanation(&out, &post.id, 1, &heatmap, &attention)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
