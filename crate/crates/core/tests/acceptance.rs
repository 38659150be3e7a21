//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semfuse::config::ExperimentConfig;
use semfuse::data::{
    fleiss_kappa, make_fold_plan, AnnotationMatrix, BinaryLabel, PostRecord, Source, UnlabeledPost,
};
use semfuse::eval::{metrics, ConfusionMatrix};
use semfuse::explain::{export_attention, grad_cam};
use semfuse::fusion::{
    circular_convolution, count_sketch, fuse_concat_tensor, fuse_gated_mcb_tensor,
    fuse_mfas_tensor, CountSketchParams, Fusion, FusionDims, FusionKind, ModalityVectors,
};
use semfuse::gradcheck::{check_input_gradients, check_param_gradients};
use semfuse::image::{ImageBackboneKind, ImageTensor, IMAGE_SIZE};
use semfuse::model::{combined_loss_tensor, Mode, ModelConfig, MultimodalModel, Task};
use semfuse::synthetic::write_synthetic_corpus;
use semfuse::text::TokenSequence;
use semfuse::train::{evaluate, train_fold, Encoders, FeatureSource, FeatureTable, TrainLog};
use semfuse::Error;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Tensor {
    Tensor::from_vec(random_vec(rng, b * n, -1.0, 1.0), (b, n), &Device::Cpu).unwrap()
}

fn dims() -> Outcome {
    let inter = ImageBackboneKind::Resnet152.intermediate_dim();
    ensure(inter == 512, || {
        format!("ResNet-152 intermediate is {inter}")
    })?;
    let d = FusionDims::with_image_inter(inter);
    let v = vec![0.5; 768];
    let vi = vec![0.5; inter];
    let input = ModalityVectors {
        text_final: &v,
        text_inter: &v,
        image_final: &v,
        image_inter: &vi,
    };
    let mut got = Vec::new();
    for (kind, want) in [
        (FusionKind::Concat, 1536),
        (FusionKind::GatedMcb, 1536),
        (FusionKind::Mfas, 2816),
    ] {
        let n = Fusion::new(kind, d, 0)
            .map_err(err)?
            .fuse(&input)
            .map_err(err)?
            .dim();
        ensure(n == want, || format!("{kind}: {n} != {want}"))?;
        got.push(format!("{kind}={n}"));
    }
    Ok(got.join(" "))
}

fn paper_tables() -> Outcome {
    let tables: [(&str, Vec<Vec<u64>>, f64); 4] = [
        ("gab binary", vec![vec![1470, 162], vec![167, 1710]], 0.906),
        (
            "twitter binary",
            vec![vec![1106, 568], vec![317, 1111]],
            0.715,
        ),
        (
            "gab multiclass",
            vec![
                vec![441, 49, 33, 213],
                vec![14, 82, 3, 19],
                vec![9, 1, 102, 32],
                vec![141, 40, 76, 622],
            ],
            0.665,
        ),
        (
            "twitter multiclass",
            vec![
                vec![470, 35, 11, 123],
                vec![16, 149, 9, 9],
                vec![15, 4, 79, 26],
                vec![160, 12, 37, 273],
            ],
            0.680,
        ),
    ];
    let mut got = Vec::new();
    for (name, counts, want) in tables {
        let (acc, _) = metrics(&ConfusionMatrix::new(counts).map_err(err)?).map_err(err)?;
        ensure((acc - want).abs() <= 0.001, || {
            format!("{name}: {acc:.4} vs {want}")
        })?;
        got.push(format!("{name}={acc:.4}"));
    }
    Ok(got.join(" "))
}

fn sketch_unbiased() -> Outcome {
    let (d, big_d, draws) = (16, 64, 200);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for pair in 0..10 {
        let x = random_vec(&mut rng, d, 0.0, 1.0);
        let y = random_vec(&mut rng, d, 0.0, 1.0);
        let exact = dot(&x, &y);
        let mut sum = 0.0;
        for k in 0..draws {
            let p = CountSketchParams::new(d, big_d, (pair * draws + k) as u64).map_err(err)?;
            sum += dot(
                &count_sketch(&x, &p).map_err(err)?,
                &count_sketch(&y, &p).map_err(err)?,
            );
        }
        let rel = (sum / draws as f64 - exact).abs() / exact.abs();
        ensure(rel < 0.05, || {
            format!("pair {pair}: relative error {rel:.4}")
        })?;
        worst = worst.max(rel);
    }
    Ok(format!("worst relative error {worst:.4}"))
}

fn convolution_theorem() -> Outcome {
    let n = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let a = random_vec(&mut rng, n, -1.0, 1.0);
        let b = random_vec(&mut rng, n, -1.0, 1.0);
        let fast = circular_convolution(&a, &b).map_err(err)?;
        for k in 0..n {
            let direct: f64 = (0..n).map(|j| a[j] * b[(k + n - j) % n]).sum();
            worst = worst.max((direct - fast[k]).abs());
        }
    }
    ensure(worst < 1e-6, || format!("max abs error {worst:e}"))?;
    Ok(format!("max abs error {worst:.2e}"))
}

fn tiny_model_config(fusion: FusionKind) -> ModelConfig {
    let mut c = ModelConfig::new(fusion, Task::Multiclass, 6, 8);
    c.dims = FusionDims {
        text: 8,
        image: 8,
        text_inter: 8,
        image_inter: 8,
        sketch: 16,
    };
    c.encoder_hidden = 8;
    c.code_dim = 4;
    c.decoder_hidden = 8;
    c.classifier_hidden = 4;
    c
}

fn gradients() -> Outcome {
    let eps = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (tf, ti, imf, ii) = (
        random_tensor(&mut rng, 2, 8),
        random_tensor(&mut rng, 2, 8),
        random_tensor(&mut rng, 2, 8),
        random_tensor(&mut rng, 2, 8),
    );
    let probe16 = random_tensor(&mut rng, 2, 16);
    let probe32 = random_tensor(&mut rng, 2, 32);
    let dims = tiny_model_config(FusionKind::GatedMcb).dims;
    let fusion = Fusion::new(FusionKind::GatedMcb, dims, 5).map_err(err)?;
    let (st, si) = fusion.sketches().expect("gated fusion has sketches");
    let mt = st.matrix(DType::F64, &Device::Cpu).map_err(err)?;
    let mi = si.matrix(DType::F64, &Device::Cpu).map_err(err)?;

    let mut fusion_errs = vec![
        (
            "fuse_concat",
            check_input_gradients(
                |x| Ok((fuse_concat_tensor(&x[0], &x[1])? * &probe16)?),
                &[tf.clone(), imf.clone()],
                eps,
            ),
        ),
        (
            "fuse_gated_mcb",
            check_input_gradients(
                |x| Ok((fuse_gated_mcb_tensor(&x[0], &x[1], &mt, &mi)? * &probe16)?),
                &[tf.clone(), imf.clone()],
                eps,
            ),
        ),
        (
            "fuse_mfas",
            check_input_gradients(
                |x| Ok((fuse_mfas_tensor(&x[0], &x[1], &x[2], &x[3])? * &probe32)?),
                &[tf.clone(), ti.clone(), imf.clone(), ii.clone()],
                eps,
            ),
        ),
    ];
    let mut report = Vec::new();
    for (name, r) in fusion_errs.drain(..) {
        let e = r.map_err(err)?.max_rel_error();
        ensure(e < 1e-4, || format!("{name}: {e:e}"))?;
        report.push(format!("{name}={e:.1e}"));
    }

    let cfg = tiny_model_config(FusionKind::Mfas);
    let model = MultimodalModel::seeded(cfg, 5).map_err(err)?;
    let fused = random_tensor(&mut rng, 3, cfg.fused_dim());
    let code = random_tensor(&mut rng, 3, cfg.code_dim);
    let probe_code = random_tensor(&mut rng, 3, cfg.code_dim);
    let probe_rec = random_tensor(&mut rng, 3, cfg.fused_dim());
    let probe_cls = random_tensor(&mut rng, 3, cfg.num_classes());
    let labels = [0usize, 3, 1];
    type Stage<'a> = Box<dyn Fn(&Tensor, &mut Mode) -> semfuse::Result<Tensor> + 'a>;
    let stages: [(&str, &Tensor, Stage); 3] = [
        (
            "joint_encode",
            &fused,
            Box::new(|x, m| Ok((model.joint_encode(x, m)? * &probe_code)?)),
        ),
        (
            "joint_decode",
            &code,
            Box::new(|x, m| Ok((model.joint_decode(x, m)? * &probe_rec)?)),
        ),
        (
            "classify",
            &code,
            Box::new(|x, m| Ok((model.classify(x, m)? * &probe_cls)?)),
        ),
    ];
    for (name, input, f) in &stages {
        for train in [false, true] {
            let run = |x: &Tensor| {
                let mut drop_rng = ChaCha8Rng::seed_from_u64(11);
                let mut mode = if train {
                    Mode::Train(&mut drop_rng)
                } else {
                    Mode::Eval
                };
                f(x, &mut mode)
            };
            let wrt_input =
                check_input_gradients(|x| run(&x[0]), &[(*input).clone()], eps).map_err(err)?;
            let wrt_params =
                check_param_gradients(model.store(), || run(input), eps).map_err(err)?;
            let e = wrt_input.max_rel_error().max(wrt_params.max_rel_error());
            ensure(e < 1e-3, || format!("{name} (train={train}): {e:e}"))?;
            if train {
                report.push(format!("{name}={e:.1e}"));
            }
        }
    }

    let rec = random_tensor(&mut rng, 3, cfg.fused_dim());
    let logits = random_tensor(&mut rng, 3, cfg.num_classes());
    let loss = check_input_gradients(
        |x| {
            let lp = candle_nn::ops::log_softmax(&x[2], 1)?;
            combined_loss_tensor(&x[0], &x[1], &lp, &labels)
        },
        &[fused.clone(), rec, logits],
        eps,
    )
    .map_err(err)?
    .max_rel_error();
    ensure(loss < 1e-3, || format!("combined_loss: {loss:e}"))?;
    report.push(format!("combined_loss={loss:.1e}"));
    Ok(report.join(" "))
}

fn synthetic_posts(dir: &Path, n: usize) -> Result<(Vec<PostRecord>, Vec<UnlabeledPost>), String> {
    let path = write_synthetic_corpus(dir, n, 0).map_err(err)?;
    let records = semfuse::data::load_dataset(&path, dir, true)
        .map_err(err)?
        .records;
    let posts = records.iter().map(UnlabeledPost::from).collect();
    Ok((records, posts))
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let (records, posts) = synthetic_posts(dir.path(), 16)?;
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&[
        "lr=1e-3",
        "max_epochs=200",
        "patience=10",
        "monitor=val_accuracy",
    ])
    .map_err(err)?;
    let table = FeatureTable::extract(
        &Encoders::from_config(&cfg, false).map_err(err)?,
        &posts,
        dir.path(),
    )
    .map_err(err)?;
    let labels: Vec<usize> = records
        .iter()
        .map(|r| usize::from(u8::from(r.binary_label)))
        .collect();
    let all: Vec<usize> = (0..records.len()).collect();
    let model_cfg = cfg.model_config(table.image_feature_dim(), table.image_inter_dim());
    let (model, log) =
        train_fold(&table, &labels, &all, &all, &model_cfg, &cfg.train_config()).map_err(err)?;
    let acc = evaluate(&model, &table, &labels, &all, cfg.batch_size)
        .map_err(err)?
        .report
        .accuracy;
    let losses = log.train_losses();
    ensure(losses.len() >= 4, || {
        format!("only {} epochs ran", losses.len())
    })?;
    ensure(losses[3] < losses[0], || {
        format!("loss did not decrease: {} -> {}", losses[0], losses[3])
    })?;
    ensure(acc >= 0.95, || {
        format!("train accuracy {acc:.3} after {} epochs", losses.len())
    })?;
    Ok(format!(
        "train accuracy {acc:.3} (best epoch {}), loss {:.4} -> {:.4} over the first four epochs",
        log.best_epoch, losses[0], losses[3]
    ))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let code = semfuse::cli::dispatch(std::iter::once("semfuse").chain(args.iter().copied()));
    ensure(code == 0, || {
        format!("semfuse {} exited with {code}", args.join(" "))
    })
}

fn losses_of(log: &TrainLog) -> Vec<(f64, f64)> {
    log.epochs
        .iter()
        .map(|e| (e.train_loss, e.val_loss))
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();
    let data = write_synthetic_corpus(root, 20, 1).map_err(err)?;
    let data = data.to_str().expect("utf-8 path");
    let out = root.join("out");
    let out = out.to_str().expect("utf-8 path");
    cli(&[
        "split", "--data", data, "--k", "5", "--seed", "3", "--out", out,
    ])?;
    let plan = format!("{out}/foldplan.json");
    for id in ["a", "b"] {
        cli(&[
            "train",
            "--data",
            data,
            "--fold-plan",
            &plan,
            "--run-id",
            id,
            "--out",
            out,
            "seed=9",
            "lr=1e-3",
            "max_epochs=4",
            "patience=2",
        ])?;
    }
    let read = |p: String| std::fs::read_to_string(&p).map_err(|e| format!("{p}: {e}"));
    let mut epochs = 0;
    for fold in 0..5 {
        let log = |id: &str| -> Result<TrainLog, String> {
            serde_json::from_str(&read(format!("{out}/runs/{id}/fold{fold}/trainlog.json"))?)
                .map_err(err)
        };
        let (a, b) = (log("a")?, log("b")?);
        ensure(losses_of(&a) == losses_of(&b), || {
            format!("fold {fold}: loss sequences differ")
        })?;
        ensure(a.best_epoch == b.best_epoch, || {
            format!("fold {fold}: best epochs differ")
        })?;
        epochs += a.epochs.len();
    }
    let (ra, rb) = (
        read(format!("{out}/runs/a/report.json"))?,
        read(format!("{out}/runs/b/report.json"))?,
    );
    ensure(ra == rb, || "evaluation reports differ".into())?;
    Ok(format!(
        "5 folds, {epochs} epochs in total per run, identical losses and reports"
    ))
}

fn fold_plan_properties() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 100,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (50usize..=500, 0.2f64..0.8, any::<u64>());
    let result = runner.run(&strategy, |(n, pos_share, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<PostRecord> = (0..n)
            .map(|i| PostRecord {
                id: format!("p{i}"),
                text: "t".into(),
                ocr_text: String::new(),
                image_path: "x.png".into(),
                binary_label: if rng.random_bool(pos_share) {
                    BinaryLabel::Antisemitic
                } else {
                    BinaryLabel::NonAntisemitic
                },
                category_label: None,
                source: Source::Gab,
            })
            .map(|mut r| {
                if r.binary_label == BinaryLabel::Antisemitic {
                    r.category_label = Some(semfuse::data::Category::Political);
                }
                r
            })
            .collect();
        let plan = make_fold_plan(&records, 5, seed).unwrap();
        let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        prop_assert_eq!(plan.check(&ids), Ok(()));
        prop_assert_eq!(plan.folds.len(), 5);
        for f in &plan.folds {
            let test = f.test.len() as f64;
            let val = f.val.len() as f64;
            let train = f.train.len() as f64;
            prop_assert!((test - n as f64 / 5.0).abs() < 1.0);
            prop_assert!((val - 0.2 * (n as f64 - test)).abs() <= 0.5 + 1e-9);
            prop_assert!((train / n as f64 - 0.64).abs() < 0.02);
            prop_assert!((val / n as f64 - 0.16).abs() < 0.02);
        }
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    Ok("100 random corpora of 50-500 records".into())
}

fn kappa() -> Outcome {
    // P_i = 1, 1/3, 1/3, 0 so P-bar = 5/12; p_j = 5/12, 4/12, 3/12 so P_e = 25/72.
    // kappa = (5/12 - 25/72) / (1 - 25/72) = 5/47.
    let m = AnnotationMatrix::new(vec![
        vec![3, 0, 0],
        vec![1, 2, 0],
        vec![0, 1, 2],
        vec![1, 1, 1],
    ])
    .map_err(err)?;
    let k = fleiss_kappa(&m).map_err(err)?;
    ensure((k - 5.0 / 47.0).abs() < 1e-9, || {
        format!("hand example gave {k}, expected 5/47")
    })?;
    let perfect = AnnotationMatrix::new(vec![vec![3, 0], vec![0, 3], vec![3, 0]]).map_err(err)?;
    let kp = fleiss_kappa(&perfect).map_err(err)?;
    ensure((kp - 1.0).abs() < 1e-12, || {
        format!("perfect agreement gave {kp}")
    })?;
    let degenerate = AnnotationMatrix::new(vec![vec![3, 0], vec![3, 0]]).map_err(err)?;
    match fleiss_kappa(&degenerate) {
        Err(Error::AgreementUndefined) => {}
        other => return Err(format!("degenerate case gave {other:?}")),
    }
    Ok(format!(
        "hand example {k:.9}, perfect 1.0, degenerate rejected"
    ))
}

fn explain_contracts() -> Outcome {
    let cfg = ExperimentConfig::default();
    let enc = Encoders::from_config(&cfg, false).map_err(err)?;
    let feature = enc.image.backbone.feature_dim();
    let inter = enc.image.backbone.intermediate_dim();
    let models = FusionKind::ALL
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut c = cfg.clone();
            c.fusion = k;
            c.task = if i % 2 == 0 {
                Task::Binary
            } else {
                Task::Multiclass
            };
            MultimodalModel::seeded(c.model_config(feature, inter), i as u64)
        })
        .collect::<semfuse::Result<Vec<_>>>()
        .map_err(err)?;
    let vocab = enc.text.backbone.vocab_size() as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut worst_row, mut zero_maps) = (0.0f64, 0);
    for i in 0..50 {
        let len = rng.random_range(2..40);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let split = rng.random_range(1..len);
        let seq = TokenSequence {
            tokens: ids.iter().map(|t| format!("t{t}")).collect(),
            segment_ids: (0..len).map(|j| u32::from(j >= split)).collect(),
            ids,
            sep_index: split - 1,
            post_len: split - 1,
            ocr_len: len - split,
        };
        let pixels: Vec<f32> = (0..3 * IMAGE_SIZE * IMAGE_SIZE)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let image = ImageTensor::from_chw(pixels).map_err(err)?;
        let model = &models[i % models.len()];
        let target = rng.random_range(0..model.config().num_classes());
        let text = enc.text.features(&seq).map_err(err)?;
        let cam =
            grad_cam(model, enc.image.backbone.as_ref(), &image, &text, target).map_err(err)?;
        ensure(cam.values().len() == IMAGE_SIZE * IMAGE_SIZE, || {
            "heat map is not 224x224".into()
        })?;
        ensure(cam.min() >= 0.0, || {
            format!("input {i}: negative heat {}", cam.min())
        })?;
        let max = cam.max();
        ensure(max == 1.0 || max == 0.0, || {
            format!("input {i}: heat map max {max}")
        })?;
        zero_maps += usize::from(max == 0.0);
        let att = export_attention(enc.text.backbone.as_ref(), &seq).map_err(err)?;
        ensure(
            att.weights.iter().flatten().flatten().all(|&w| w >= 0.0),
            || format!("input {i}: negative attention"),
        )?;
        worst_row = worst_row.max(att.max_row_error());
    }
    ensure(worst_row < 1e-5, || {
        format!("attention row sums off by {worst_row:e}")
    })?;
    ensure(zero_maps < 50, || "every heat map was empty".into())?;
    Ok(format!(
        "50 inputs, {zero_maps} all-zero maps, max attention row error {worst_row:.1e}"
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("fused dimensions", dims),
        ("published confusion matrices", paper_tables),
        ("count-sketch unbiasedness", sketch_unbiased),
        ("convolution theorem", convolution_theorem),
        ("gradient checks", gradients),
        ("overfit fixture", overfit),
        ("determinism", determinism),
        ("fold-plan properties", fold_plan_properties),
        ("fleiss kappa", kappa),
        ("explain contracts", explain_contracts),
    ];
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
