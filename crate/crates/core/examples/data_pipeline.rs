//! Loads a dataset, prints corpus statistics, applies the keyword lexicon and
//! draws a fold plan: `cargo run --example data_pipeline -- [dataset.jsonl]`.
//! Without an argument a synthetic corpus is written to a temporary directory.

use std::path::PathBuf;

use semfuse::data::{dataset_stats, lexicon_filter, load_dataset, make_fold_plan, Lexicon};

fn main() -> semfuse::Result<()> {
    let path = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let dir = std::env::temp_dir().join("semfuse-data-pipeline");
            semfuse::synthetic::write_synthetic_corpus(&dir, 40, 0)?
        }
    };
    let root = path.parent().map(PathBuf::from).unwrap_or_default();
    let data = load_dataset(&path, &root, false)?;
    println!(
        "loaded {} records, skipped {} lines",
        data.records.len(),
        data.skipped.len()
    );

    let stats = dataset_stats(&data.records);
    println!("{}", serde_json::to_string_pretty(&stats)?);

    let lexicon = Lexicon::default_terms();
    let kept = lexicon_filter(&data.records, &lexicon);
    println!(
        "{} of {} records match the {}-term lexicon",
        kept.len(),
        data.records.len(),
        lexicon.len()
    );

    let plan = make_fold_plan(&data.records, 5, 0)?;
    for (i, f) in plan.folds.iter().enumerate() {
        println!(
            "fold {i}: train {} val {} test {}",
            f.train.len(),
            f.val.len(),
            f.test.len()
        );
    }
    Ok(())
}
