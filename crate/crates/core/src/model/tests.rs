use super::*;
use crate::gradcheck::check_param_gradients;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn tiny_config(fusion: FusionKind, task: Task) -> ModelConfig {
    ModelConfig {
        fusion,
        task,
        dims: FusionDims {
            text: 8,
            image: 8,
            text_inter: 8,
            image_inter: 8,
            sketch: 16,
        },
        image_feature_dim: 6,
        dropout: 0.2,
        batch_norm: true,
        encoder_hidden: 8,
        code_dim: 4,
        decoder_hidden: 8,
        classifier_hidden: 4,
        detach_target: false,
    }
}

fn random(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Tensor {
    let v: Vec<f64> = (0..b * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, (b, n), &Device::Cpu).unwrap()
}

fn inputs(rng: &mut ChaCha8Rng, b: usize, c: &ModelConfig) -> ModelInputs {
    ModelInputs {
        text_final: random(rng, b, c.dims.text),
        text_inter: random(rng, b, c.dims.text_inter),
        image_penultimate: random(rng, b, c.image_feature_dim).abs().unwrap(),
        image_inter: random(rng, b, c.dims.image_inter),
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_vec2::<f64>().unwrap()
}

#[test]
fn paper_head_dims() {
    for (fusion, want) in [
        (FusionKind::Concat, 1536),
        (FusionKind::GatedMcb, 1536),
        (FusionKind::Mfas, 2816),
    ] {
        let cfg = ModelConfig::new(fusion, Task::Binary, 2048, 512);
        let m = MultimodalModel::seeded(cfg, 1).unwrap();
        let f = Tensor::zeros((2, cfg.fused_dim()), DType::F64, &Device::Cpu).unwrap();
        let j = m.joint_encode(&f, &mut Mode::Eval).unwrap();
        assert_eq!(j.dims(), &[2, 384]);
        assert_eq!(
            m.joint_decode(&j, &mut Mode::Eval).unwrap().dims(),
            &[2, want]
        );
    }
    assert_eq!(Task::Binary.num_classes(), 2);
    assert_eq!(Task::Multiclass.num_classes(), 4);
}

#[test]
fn wrong_fused_dim_is_rejected() {
    let m = MultimodalModel::seeded(tiny_config(FusionKind::Concat, Task::Binary), 1).unwrap();
    let f = Tensor::zeros((1, 15), DType::F64, &Device::Cpu).unwrap();
    assert!(matches!(
        m.joint_encode(&f, &mut Mode::Eval),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn eval_forward_is_deterministic_and_dropout_is_train_only() {
    let cfg = tiny_config(FusionKind::Mfas, Task::Multiclass);
    let m = MultimodalModel::seeded(cfg, 2).unwrap();
    let x = inputs(&mut ChaCha8Rng::seed_from_u64(0), 3, &cfg);
    let a = m.forward(&x, &mut Mode::Eval).unwrap();
    let b = m.forward(&x, &mut Mode::Eval).unwrap();
    assert_eq!(rows(&a.log_probs), rows(&b.log_probs));
    assert_eq!(rows(&a.reconstruction), rows(&b.reconstruction));

    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(2);
    let h = Tensor::ones((4, 50), DType::F64, &Device::Cpu).unwrap();
    let d1 = rows(&dropout(&h, 0.2, &mut Mode::Train(&mut r1)).unwrap());
    let d2 = rows(&dropout(&h, 0.2, &mut Mode::Train(&mut r2)).unwrap());
    assert_ne!(d1, d2);
    assert!(d1
        .iter()
        .flatten()
        .all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
    assert_eq!(rows(&dropout(&h, 0.2, &mut Mode::Eval).unwrap()), rows(&h));
}

/// With batch norm off and identity first layer, J is `W2 relu(F + b1) + b2`.
#[test]
fn encoder_matches_hand_forward() {
    let mut cfg = tiny_config(FusionKind::Concat, Task::Binary);
    cfg.dims = FusionDims {
        text: 2,
        image: 2,
        text_inter: 2,
        image_inter: 2,
        sketch: 4,
    };
    cfg.encoder_hidden = 4;
    cfg.code_dim = 2;
    cfg.batch_norm = false;
    let m = MultimodalModel::seeded(cfg, 3).unwrap();
    let dev = Device::Cpu;
    let eye = Tensor::eye(4, DType::F64, &dev).unwrap();
    let b1: [f64; 4] = [0.5, -1.0, 0.0, 0.25];
    let w2 = [[1.0, 2.0, -1.0, 0.5], [0.0, -0.5, 1.5, 1.0]];
    let b2 = [0.1, -0.2];
    let s = m.store();
    s.set("encoder.dense1.weight", &eye).unwrap();
    s.set("encoder.dense1.bias", &Tensor::new(&b1, &dev).unwrap())
        .unwrap();
    s.set("encoder.dense2.weight", &Tensor::new(&w2, &dev).unwrap())
        .unwrap();
    s.set("encoder.dense2.bias", &Tensor::new(&b2, &dev).unwrap())
        .unwrap();

    let f: [f64; 4] = [0.3, 0.2, -0.7, 1.0];
    let j = m
        .joint_encode(&Tensor::new(&[f], &dev).unwrap(), &mut Mode::Eval)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let h: Vec<f64> = (0..4).map(|i| (f[i] + b1[i]).max(0.0)).collect();
    for o in 0..2 {
        let want: f64 = (0..4).map(|i| w2[o][i] * h[i]).sum::<f64>() + b2[o];
        assert!((j[o] - want).abs() < 1e-6);
    }
}

#[test]
fn zero_decoder_reconstructs_zero() {
    let cfg = tiny_config(FusionKind::GatedMcb, Task::Binary);
    let m = MultimodalModel::seeded(cfg, 4).unwrap();
    for name in [
        "decoder.dense1.weight",
        "decoder.dense1.bias",
        "decoder.dense2.weight",
        "decoder.dense2.bias",
    ] {
        let t = m.store().get(name).unwrap();
        m.store().set(name, &t.zeros_like().unwrap()).unwrap();
    }
    let j = Tensor::zeros((1, 4), DType::F64, &Device::Cpu).unwrap();
    let out = m.joint_decode(&j, &mut Mode::Eval).unwrap();
    assert_eq!(out.dims(), &[1, 16]);
    assert!(rows(&out)[0].iter().all(|&v| v == 0.0));
}

#[test]
fn classifier_outputs_are_log_distributions() {
    for task in [Task::Binary, Task::Multiclass] {
        let cfg = tiny_config(FusionKind::Concat, task);
        let m = MultimodalModel::seeded(cfg, 5).unwrap();
        let j = random(&mut ChaCha8Rng::seed_from_u64(5), 6, 4);
        for row in rows(&m.classify(&j, &mut Mode::Eval).unwrap()) {
            assert_eq!(row.len(), task.num_classes());
            assert!(row.iter().all(|&v| v <= 0.0));
            assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_final_layer_gives_uniform_prediction() {
    let cfg = tiny_config(FusionKind::Concat, Task::Multiclass);
    let m = MultimodalModel::seeded(cfg, 6).unwrap();
    for name in ["classifier.dense2.weight", "classifier.dense2.bias"] {
        let t = m.store().get(name).unwrap();
        m.store().set(name, &t.zeros_like().unwrap()).unwrap();
    }
    let j = random(&mut ChaCha8Rng::seed_from_u64(6), 2, 4);
    for row in rows(&m.classify(&j, &mut Mode::Eval).unwrap()) {
        assert!(row.iter().all(|&v| (v + 4f64.ln()).abs() < 1e-12));
    }
}

#[test]
fn loss_special_values() {
    let f = [0.2, -0.4, 1.0];
    assert_eq!(
        combined_loss(&f, &f, &[0.0, f64::NEG_INFINITY], 0).unwrap(),
        0.0
    );
    let uniform = [-(4f64.ln()); 4];
    assert!((combined_loss(&f, &f, &uniform, 2).unwrap() - 1.386).abs() < 1e-3);
    assert!(combined_loss(&f, &f, &uniform, 4).is_err());
    assert!(combined_loss(&f, &f[..2], &uniform, 0).is_err());
}

#[test]
fn tensor_loss_matches_straight_line_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = random(&mut rng, 3, 5);
    let fh = random(&mut rng, 3, 5);
    let lp = log_softmax(&random(&mut rng, 3, 4), D::Minus1).unwrap();
    let labels = [0, 3, 1];
    let got = combined_loss_tensor(&f, &fh, &lp, &labels)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    let (fr, hr, lr) = (rows(&f), rows(&fh), rows(&lp));
    let mut want = 0.0;
    for b in 0..3 {
        let mut se = 0.0;
        for j in 0..5 {
            se += (fr[b][j] - hr[b][j]).powi(2);
        }
        want += se / 5.0 - lr[b][labels[b]];
    }
    want /= 3.0;
    assert!((got - want).abs() < 1e-8);
    let slice: f64 = (0..3)
        .map(|b| combined_loss(&fr[b], &hr[b], &lr[b], labels[b]).unwrap())
        .sum::<f64>()
        / 3.0;
    assert!((got - slice).abs() < 1e-12);
}

#[test]
fn batch_norm_updates_running_stats_only_in_training() {
    let cfg = tiny_config(FusionKind::Concat, Task::Binary);
    let m = MultimodalModel::seeded(cfg, 8).unwrap();
    let before = m
        .store()
        .get("encoder.norm.running_mean")
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let x = inputs(&mut ChaCha8Rng::seed_from_u64(8), 4, &cfg);
    m.forward(&x, &mut Mode::Eval).unwrap();
    assert_eq!(
        m.store()
            .get("encoder.norm.running_mean")
            .unwrap()
            .to_vec1::<f64>()
            .unwrap(),
        before
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    m.forward(&x, &mut Mode::Train(&mut rng)).unwrap();
    assert_ne!(
        m.store()
            .get("encoder.norm.running_mean")
            .unwrap()
            .to_vec1::<f64>()
            .unwrap(),
        before
    );
}

fn head_gradcheck(fusion: FusionKind, train: bool) -> f64 {
    let cfg = tiny_config(fusion, Task::Multiclass);
    let m = MultimodalModel::seeded(cfg, 9).unwrap();
    let x = inputs(&mut ChaCha8Rng::seed_from_u64(9), 3, &cfg);
    let labels = [1, 3, 0];
    let r = check_param_gradients(
        m.store(),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut mode = if train {
                Mode::Train(&mut rng)
            } else {
                Mode::Eval
            };
            let out = m.forward(&x, &mut mode)?;
            m.loss(&out, &labels)
        },
        1e-6,
    )
    .unwrap();
    assert_eq!(r.names.len(), m.store().named_vars().len());
    r.max_rel_error()
}

#[test]
fn head_gradients_match_finite_differences() {
    for fusion in FusionKind::ALL {
        for train in [false, true] {
            let err = head_gradcheck(fusion, train);
            assert!(err < 1e-3, "{fusion} train={train}: {err}");
        }
    }
}

proptest! {
    #[test]
    fn log_softmax_ignores_constant_shift(
        logits in prop::collection::vec(-20.0f64..20.0, 4),
        c in -50.0f64..50.0,
    ) {
        let a = Tensor::new(logits.as_slice(), &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let b = (&a + c).unwrap();
        let la = rows(&log_softmax(&a, D::Minus1).unwrap());
        let lb = rows(&log_softmax(&b, D::Minus1).unwrap());
        for (x, y) in la[0].iter().zip(&lb[0]) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_is_non_negative(
        f in prop::collection::vec(-5.0f64..5.0, 6),
        fh in prop::collection::vec(-5.0f64..5.0, 6),
        logits in prop::collection::vec(-5.0f64..5.0, 4),
        label in 0usize..4,
    ) {
        let t = Tensor::new(logits.as_slice(), &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let lp = rows(&log_softmax(&t, D::Minus1).unwrap()).remove(0);
        prop_assert!(combined_loss(&f, &fh, &lp, label).unwrap() >= 0.0);
    }
}
