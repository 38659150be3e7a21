//! Command-line entry point: `semfuse <verb> [flags] [KEY=VALUE ...]`.
//!
//! Exit codes: 0 success, 2 bad flags or configuration, 3 data errors,
//! 4 runtime or training failures. Errors are printed to stderr as one line:
//! `semfuse: error[<kind>]: <message>`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{
    dataset_stats, fleiss_kappa, load_dataset_with, load_unlabeled, make_fold_plan,
    AnnotationMatrix, Category, FoldPlan, UnlabeledPost,
};
use crate::error::{Error, Result};
use crate::eval::{argmax, Report};
use crate::explain::{export_attention, grad_cam, write_explanation};
use crate::model::{MultimodalModel, Task};
use crate::train::{
    fold_indices, predict, run_cross_validation, task_records, Checkpoint, Encoders, FeatureSource,
    FeatureTable, LiveFeatures,
};

#[derive(Debug, Parser)]
#[command(
    name = "semfuse",
    version,
    about = "Multimodal antisemitism detection and categorization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a dataset file and its images.
    Validate {
        #[command(flatten)]
        data: DataArgs,
        /// Skip invalid lines instead of failing on the first one.
        #[arg(long)]
        lenient: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus statistics: class counts, n-grams, text lengths.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fleiss' kappa over an annotation file.
    Kappa {
        /// JSON with either `counts` (items x categories) or `labels` (items x raters) plus `categories`.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a stratified k-fold plan.
    Split {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated training; writes runs/<run-id>/fold<i>/{checkpoint.safetensors, trainlog.json}.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        fold_plan: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
        /// Folds trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel_folds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a training run on its fold test sets; writes report.json.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// A run directory holding fold<i>/checkpoint.safetensors.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        fold_plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class and probabilities for each post of an unlabelled file.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// GradCAM heatmap and last-layer attention for posts.
    Explain {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict to these post ids.
        #[arg(long = "id")]
        ids: Vec<String>,
        /// Class to explain; defaults to the predicted class.
        #[arg(long)]
        target_class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory image paths are relative to; defaults to the data file's directory.
    #[arg(long)]
    image_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration overrides.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// Parses `argv` (including the program name), runs the verb and returns the exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                print!("{e}");
            } else {
                eprintln!("semfuse: error[usage]: {}", one_line(&e.to_string()));
            }
            return code;
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            let (kind, code) = classify(&e);
            eprintln!("semfuse: error[{kind}]: {}", one_line(&e.to_string()));
            code
        }
    }
}

fn one_line(msg: &str) -> String {
    msg.lines()
        .map(|l| l.trim().trim_start_matches("error: "))
        .filter(|l| {
            !l.is_empty() && !l.starts_with("Usage:") && !l.starts_with("For more information")
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Error kind label and exit code.
pub fn classify(e: &Error) -> (&'static str, i32) {
    if e.is_data_error() {
        ("data", 3)
    } else if matches!(e, Error::Config(_)) {
        ("config", 2)
    } else {
        ("runtime", 4)
    }
}

fn image_root(data: &DataArgs, cfg: Option<&ExperimentConfig>) -> PathBuf {
    data.image_root
        .clone()
        .or_else(|| cfg.and_then(|c| c.image_root.clone()))
        .unwrap_or_else(|| {
            data.data
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_default()
        })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        create_dir(p)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::Validate { data, lenient, out } => validate(&data, lenient, out.as_deref()),
        Command::Stats { data, out } => {
            let d = load_dataset_with(&data.data, &image_root(&data, None), true, false)?;
            let stats = dataset_stats(&d.records);
            write(
                &out.join("stats.json"),
                &serde_json::to_string_pretty(&stats)?,
            )?;
            Ok(format!(
                "ok records={} antisemitic={}",
                stats.total, stats.antisemitic
            ))
        }
        Command::Kappa { annotations, out } => kappa(&annotations, &out),
        Command::Split { data, k, seed, out } => {
            let d = load_dataset_with(&data.data, &image_root(&data, None), true, false)?;
            let plan = make_fold_plan(&d.records, k, seed)?;
            write(&out.join("foldplan.json"), &plan.to_json()?)?;
            Ok(format!("ok k={k} records={}", d.records.len()))
        }
        Command::Train {
            data,
            exp,
            fold_plan,
            run_id,
            parallel_folds,
            out,
        } => train(&data, &exp, &fold_plan, run_id, parallel_folds, &out),
        Command::Eval {
            data,
            run,
            fold_plan,
            out,
        } => eval(&data, &run, &fold_plan, &out),
        Command::Predict {
            data,
            checkpoint,
            out,
        } => predict_cmd(&data, &checkpoint, &out),
        Command::Explain {
            data,
            checkpoint,
            ids,
            target_class,
            out,
        } => explain(&data, &checkpoint, &ids, target_class, &out),
    }
}

#[derive(Serialize)]
struct ValidationSummary {
    records: usize,
    skipped: Vec<crate::data::SkippedLine>,
}

fn validate(data: &DataArgs, lenient: bool, out: Option<&Path>) -> Result<String> {
    let d = load_dataset_with(&data.data, &image_root(data, None), !lenient, true)?;
    if let Some(out) = out {
        let s = ValidationSummary {
            records: d.records.len(),
            skipped: d.skipped.clone(),
        };
        write(
            &out.join("validation.json"),
            &serde_json::to_string_pretty(&s)?,
        )?;
    }
    Ok(format!(
        "ok records={} skipped={}",
        d.records.len(),
        d.skipped.len()
    ))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Annotations {
    Counts {
        counts: Vec<Vec<u32>>,
    },
    Labels {
        categories: usize,
        labels: Vec<Vec<usize>>,
    },
}

#[derive(Serialize)]
struct KappaResult {
    kappa: f64,
    items: usize,
    raters: u32,
    categories: usize,
}

fn kappa(path: &Path, out: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m = match serde_json::from_str::<Annotations>(&text).map_err(|_| {
        Error::Data("annotations must hold `counts` or `categories` plus `labels`".into())
    })? {
        Annotations::Counts { counts } => AnnotationMatrix::new(counts)?,
        Annotations::Labels { categories, labels } => {
            AnnotationMatrix::from_labels(&labels, categories)?
        }
    };
    let k = fleiss_kappa(&m)?;
    let r = KappaResult {
        kappa: k,
        items: m.items(),
        raters: m.raters(),
        categories: m.categories(),
    };
    write(&out.join("kappa.json"), &serde_json::to_string_pretty(&r)?)?;
    Ok(format!("ok kappa={k:.6}"))
}

fn experiment_config(exp: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &exp.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&exp.overrides)?;
    Ok(cfg)
}

fn posts_of(records: &[crate::data::PostRecord]) -> Vec<UnlabeledPost> {
    records.iter().map(UnlabeledPost::from).collect()
}

/// Whether backbones must run on every batch instead of once up front.
fn needs_live(cfg: &ExperimentConfig) -> bool {
    !cfg.freeze_backbones || cfg.augment
}

fn train(
    data: &DataArgs,
    exp: &ExperimentArgs,
    plan_path: &Path,
    run_id: Option<String>,
    parallel_folds: usize,
    out: &Path,
) -> Result<String> {
    let cfg = experiment_config(exp)?;
    let root = image_root(data, Some(&cfg));
    let all = load_dataset_with(&data.data, &root, true, true)?.records;
    let plan = FoldPlan::load(plan_path)?;
    let records = task_records(&all, cfg.task);
    let run_id = run_id.unwrap_or_else(|| format!("{}-{}-seed{}", cfg.task, cfg.fusion, cfg.seed));
    if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
        return Err(Error::Config(format!("invalid run id {run_id:?}")));
    }
    let run_dir = out.join("runs").join(&run_id);
    create_dir(&run_dir)?;
    write(&run_dir.join("config.txt"), &cfg.to_kv_string())?;
    write(&run_dir.join("foldplan.json"), &plan.to_json()?)?;

    let posts = posts_of(&records);
    let shared: Option<Arc<dyn FeatureSource>> = if needs_live(&cfg) {
        None
    } else {
        let enc = Encoders::from_config(&cfg, false)?;
        Some(Arc::new(FeatureTable::extract(&enc, &posts, &root)?))
    };
    let live = |_: usize| -> Result<Arc<dyn FeatureSource>> {
        let enc = Encoders::from_config(&cfg, !cfg.freeze_backbones)?;
        Ok(Arc::new(LiveFeatures::new(enc, posts.clone(), &root)?))
    };
    let probe = match &shared {
        Some(s) => s.clone(),
        None => live(0)?,
    };
    let model_cfg = cfg.model_config(probe.image_feature_dim(), probe.image_inter_dim());
    drop(probe);
    let factory = |i: usize| match &shared {
        Some(s) => Ok(s.clone()),
        None => live(i),
    };
    let outcomes = run_cross_validation(
        &records,
        &plan,
        &model_cfg,
        &cfg.train_config(),
        &factory,
        parallel_folds,
    )?;

    let config_text = cfg.to_kv_string();
    let mut reports = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        let dir = run_dir.join(format!("fold{}", o.fold));
        create_dir(&dir)?;
        let stores = o.source.trainable_stores();
        let backbones = match (cfg.freeze_backbones, stores.as_slice()) {
            (false, [t, i]) => Some((t, i)),
            _ => None,
        };
        let ck = Checkpoint::capture(
            &o.model,
            config_text.clone(),
            o.fold,
            cfg.text_backbone.as_str(),
            cfg.image_backbone.as_str(),
            backbones,
        )?;
        ck.save(&dir.join("checkpoint.safetensors"))?;
        write(&dir.join("trainlog.json"), &o.log.to_json()?)?;
        reports.push(o.test.report.clone());
    }
    let report = Report::new(cfg.task, cfg.fusion, &reports)?;
    write(&run_dir.join("report.json"), &report.to_json()?)?;
    Ok(format!(
        "ok run={} folds={} accuracy_mean={:.4} f1_mean={:.4}",
        run_dir.display(),
        outcomes.len(),
        report.aggregate.accuracy_mean,
        report.aggregate.f1_mean
    ))
}

/// A checkpoint with the configuration and backbones it was trained with.
struct Loaded {
    cfg: ExperimentConfig,
    model: MultimodalModel,
    encoders: Encoders,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let ck = Checkpoint::load(path)?;
    let cfg = ExperimentConfig::parse(&ck.meta.config)?;
    let encoders = Encoders::from_config(&cfg, ck.has_backbones())?;
    encoders.load_tensors(&ck.text, &ck.image)?;
    Ok(Loaded {
        model: ck.model()?,
        cfg,
        encoders,
    })
}

fn eval(data: &DataArgs, run: &Path, plan_path: &Path, out: &Path) -> Result<String> {
    let plan = FoldPlan::load(plan_path)?;
    let mut reports = Vec::with_capacity(plan.k);
    let mut header = None;
    for i in 0..plan.k {
        let loaded = load_checkpoint(&run.join(format!("fold{i}")).join("checkpoint.safetensors"))?;
        let cfg = &loaded.cfg;
        let root = image_root(data, Some(cfg));
        let all = load_dataset_with(&data.data, &root, true, true)?.records;
        let records = task_records(&all, cfg.task);
        let folds = fold_indices(&records, &plan)?;
        let test: Vec<_> = folds[i].test.iter().map(|&j| records[j].clone()).collect();
        let labels: Vec<usize> = test
            .iter()
            .map(|r| crate::train::label_of(r, cfg.task).expect("task records are labelled"))
            .collect();
        let table = FeatureTable::extract(&loaded.encoders, &posts_of(&test), &root)?;
        let idx: Vec<usize> = (0..test.len()).collect();
        let ev = crate::train::evaluate(&loaded.model, &table, &labels, &idx, cfg.batch_size)?;
        reports.push(ev.report);
        header.get_or_insert((cfg.task, cfg.fusion));
        write(&out.join("config.txt"), &cfg.to_kv_string())?;
    }
    let (task, fusion) = header.ok_or_else(|| Error::Data("fold plan has no folds".into()))?;
    let report = Report::new(task, fusion, &reports)?;
    write(&out.join("report.json"), &report.to_json()?)?;
    Ok(format!(
        "ok folds={} accuracy_mean={:.4} f1_mean={:.4}",
        reports.len(),
        report.aggregate.accuracy_mean,
        report.aggregate.f1_mean
    ))
}

/// Human-readable class names of a task, by class index.
pub fn class_names(task: Task) -> Vec<&'static str> {
    match task {
        Task::Binary => vec!["non_antisemitic", "antisemitic"],
        Task::Multiclass => Category::ALL.iter().map(|c| c.as_str()).collect(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub class: String,
    pub class_index: usize,
    pub probabilities: Vec<f64>,
}

fn predict_cmd(data: &DataArgs, checkpoint: &Path, out: &Path) -> Result<String> {
    let loaded = load_checkpoint(checkpoint)?;
    let posts = load_unlabeled(&data.data)?;
    let root = image_root(data, Some(&loaded.cfg));
    let table = FeatureTable::extract(&loaded.encoders, &posts, &root)?;
    let idx: Vec<usize> = (0..posts.len()).collect();
    let probs = predict(&loaded.model, &table, &idx, loaded.cfg.batch_size)?;
    let names = class_names(loaded.cfg.task);
    let mut text = String::new();
    for (p, pr) in posts.iter().zip(probs) {
        let k = argmax(&pr);
        let line = Prediction {
            id: p.id.clone(),
            class: names[k].to_owned(),
            class_index: k,
            probabilities: pr,
        };
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    write(&out.join("predictions.jsonl"), &text)?;
    write(&out.join("config.txt"), &loaded.cfg.to_kv_string())?;
    Ok(format!("ok predictions={}", posts.len()))
}

fn explain(
    data: &DataArgs,
    checkpoint: &Path,
    ids: &[String],
    target: Option<usize>,
    out: &Path,
) -> Result<String> {
    let loaded = load_checkpoint(checkpoint)?;
    let root = image_root(data, Some(&loaded.cfg));
    let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
    let posts: Vec<UnlabeledPost> = load_unlabeled(&data.data)?
        .into_iter()
        .filter(|p| wanted.is_empty() || wanted.contains(p.id.as_str()))
        .collect();
    if let Some(missing) = ids.iter().find(|id| !posts.iter().any(|p| &p.id == *id)) {
        return Err(Error::Data(format!("post {missing} not found")));
    }
    let enc = &loaded.encoders;
    let mut written = 0;
    for post in &posts {
        let seq = enc.prepare(post)?;
        let text = enc.text.features(&seq)?;
        let image = enc.image_tensor(post, &root, None)?;
        let class = match target {
            Some(c) => c,
            None => {
                let x = enc.inputs(&[post], &[&seq], &root, None)?;
                let o = loaded.model.forward(&x, &mut crate::model::Mode::Eval)?;
                let lp = o
                    .log_probs
                    .to_dtype(candle_core::DType::F64)?
                    .flatten_all()?
                    .to_vec1::<f64>()?;
                argmax(&lp)
            }
        };
        let heatmap = grad_cam(
            &loaded.model,
            enc.image.backbone.as_ref(),
            &image,
            &text,
            class,
        )?;
        let attention = export_attention(enc.text.backbone.as_ref(), &seq)?;
        written += write_explanation(out, &post.id, class, &heatmap, &attention)?.len();
    }
    write(&out.join("config.txt"), &loaded.cfg.to_kv_string())?;
    Ok(format!("ok posts={} files={written}", posts.len()))
}
