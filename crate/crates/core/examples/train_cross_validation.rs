//! Five-fold cross-validation of a fusion head over frozen stand-in backbones
//! on a synthetic corpus: `cargo run --release --example train_cross_validation -- [fusion]`.

use std::sync::Arc;

use semfuse::config::ExperimentConfig;
use semfuse::data::{load_dataset, make_fold_plan, UnlabeledPost};
use semfuse::eval::Report;
use semfuse::train::{run_cross_validation, task_records, Encoders, FeatureSource, FeatureTable};

fn main() -> semfuse::Result<()> {
    let fusion = std::env::args().nth(1).unwrap_or_else(|| "mfas".into());
    let dir = std::env::temp_dir().join("semfuse-cv");
    let path = semfuse::synthetic::write_synthetic_corpus(&dir, 30, 0)?;
    let records = load_dataset(&path, &dir, true)?.records;

    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&[
        format!("fusion={fusion}"),
        "lr=1e-3".into(),
        "max_epochs=60".into(),
        "patience=10".into(),
        "encoder_hidden=64".into(),
        "code_dim=32".into(),
        "decoder_hidden=64".into(),
        "classifier_hidden=16".into(),
    ])?;
    let records = task_records(&records, cfg.task);
    let plan = make_fold_plan(&records, 5, cfg.seed)?;

    let posts: Vec<UnlabeledPost> = records.iter().map(UnlabeledPost::from).collect();
    let table: Arc<dyn FeatureSource> = Arc::new(FeatureTable::extract(
        &Encoders::from_config(&cfg, false)?,
        &posts,
        &dir,
    )?);
    let model_cfg = cfg.model_config(table.image_feature_dim(), table.image_inter_dim());
    let factory = |_: usize| Ok(table.clone());
    let outcomes = run_cross_validation(
        &records,
        &plan,
        &model_cfg,
        &cfg.train_config(),
        &factory,
        1,
    )?;

    for o in &outcomes {
        println!(
            "fold {}: best epoch {}, {} epochs, test accuracy {:.3}",
            o.fold,
            o.log.best_epoch,
            o.log.epochs.len(),
            o.test.report.accuracy
        );
    }
    let reports: Vec<_> = outcomes.iter().map(|o| o.test.report.clone()).collect();
    println!(
        "{}",
        Report::new(cfg.task, cfg.fusion, &reports)?.to_json()?
    );
    Ok(())
}
