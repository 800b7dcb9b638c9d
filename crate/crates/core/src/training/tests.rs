use super::*;
use crate::data::{generate_synthetic, SyntheticSpec};
use crate::eval::accuracy;
use crate::losses::Selection;
use crate::model::argmax;

fn spec(n: usize, amp: f64) -> SyntheticSpec {
    SyntheticSpec {
        t_len: 8,
        n_features: 3,
        n_samples: n,
        informative_window: (2, 6),
        signal_amplitude: amp,
        seed: 11,
        ..Default::default()
    }
}

fn small_cfg(stage: Stage, epochs: usize) -> TrainConfig {
    TrainConfig {
        stage,
        epochs,
        batch_size: 16,
        learning_rate: 3e-3,
        model: ArchConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            ff_mult: 2,
            conv_kernel: 3,
            lambda: 2,
        },
        masking: MaskingConfig {
            n_mc: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn prepared(n: usize, amp: f64) -> Prepared {
    prepare(&generate_synthetic(&spec(n, amp)).unwrap(), 0.75, 0).unwrap()
}

fn fresh(cfg: &TrainConfig, p: &Prepared) -> ShapTstModel {
    ShapTstModel::new(cfg.model.model_config(&p.train), 5).unwrap()
}

fn train(stage: Stage, cfg: &TrainConfig, p: &Prepared) -> (ShapTstModel, TrainState) {
    let mut m = fresh(cfg, p);
    let mut s = TrainState::new(stage, &m, cfg.seed);
    match stage {
        Stage::Pretrain => pretrain(&mut m, &p.train, Some(&p.test), cfg, &mut s, TrainOptions::default()),
        Stage::Finetune => finetune(&mut m, &p.train, Some(&p.test), cfg, &mut s, TrainOptions::default()),
    }
    .unwrap();
    (m, s)
}

fn bits(m: &ShapTstModel) -> Vec<u64> {
    m.parameters().iter().flat_map(|p| p.data().iter().map(|x| x.to_bits())).collect()
}

#[test]
fn toml_config_with_env_overrides() {
    let text = "epochs = 3\nbatch_size = 8\n[weights]\nalpha_kl = 0.25\n[masking]\nlevels = [\"feature\"]\n";
    let env = vec![
        ("SHAPTST__WEIGHTS__ALPHA_CE".to_string(), "0.3".to_string()),
        ("SHAPTST__STAGE".to_string(), "pretrain".to_string()),
        ("SHAPTST__MODEL__LAMBDA".to_string(), "4".to_string()),
        ("OTHER__EPOCHS".to_string(), "99".to_string()),
    ];
    let cfg = TrainConfig::from_toml(text, env).unwrap();
    assert_eq!(cfg.epochs, 3);
    assert_eq!(cfg.stage, Stage::Pretrain);
    assert_eq!(cfg.weights.alpha_ce, 0.3);
    assert_eq!(cfg.weights.alpha_kl, 0.25);
    assert_eq!(cfg.model.lambda, 4);
    assert_eq!(cfg.masking.levels, vec![Level::Feature]);
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml().unwrap(), []).unwrap(), cfg);

    assert!(TrainConfig::from_toml("epochs = 0", []).is_err());
    assert!(TrainConfig::from_toml("bogus = 1", []).is_err());
    let bad_env = vec![("SHAPTST__EPOCHS__X".to_string(), "1".to_string())];
    assert!(TrainConfig::from_toml("epochs = 2", bad_env).is_err());
}

#[test]
fn adam_step_matches_closed_form() {
    let p = prepared(8, 1.0);
    let cfg = small_cfg(Stage::Finetune, 1);
    let m = fresh(&cfg, &p);
    let mut params = m.parameters().to_vec();
    let before = params[0].data()[0];
    let mut grads: Vec<Option<Tensor>> = params.iter().map(|t| Some(Tensor::full(t.shape(), 0.0))).collect();
    grads[0].as_mut().unwrap().data_mut()[0] = 0.5;
    grads[1] = None;
    let mut adam = Adam::new(&m);
    adam.step(&mut params, &grads, &cfg);
    // first bias-corrected step moves by lr * g / (|g| + eps)
    let expect = before - cfg.learning_rate * 0.5 / (0.5 + cfg.epsilon);
    assert!((params[0].data()[0] - expect).abs() < 1e-15);
    assert_eq!(params[1], m.parameters()[1]);
    assert_eq!(params[0].data()[1], m.parameters()[0].data()[1]);
}

#[test]
fn clipping_caps_global_norm() {
    let mut g = vec![Some(Tensor::new(vec![2], vec![3.0, 0.0]).unwrap()), None, Some(Tensor::scalar(4.0))];
    assert_eq!(clip_gradients(&mut g, 10.0), 5.0);
    assert_eq!(g[0].as_ref().unwrap().data(), &[3.0, 0.0]);
    assert_eq!(clip_gradients(&mut g, 1.0), 5.0);
    assert!((clip_gradients(&mut g, 0.0) - 1.0).abs() < 1e-15);
    assert!((g[2].as_ref().unwrap().item() - 0.8).abs() < 1e-15);
}

#[test]
fn finetune_learns_separable_data_and_logs_consistently() {
    let p = prepared(160, 3.0);
    let cfg = small_cfg(Stage::Finetune, 20);
    let (m, s) = train(Stage::Finetune, &cfg, &p);
    let means = s.epoch_means();
    assert!(means.last() < means.first(), "{means:?}");
    let out = m.values_batch(&p.train.all().unwrap().x).unwrap();
    let preds: Vec<usize> = out.data().chunks(2).map(argmax).collect();
    let labels: Vec<usize> = (0..p.train.len()).map(|i| p.train.class_of(i).unwrap()).collect();
    assert_eq!(accuracy(&preds, &labels), 1.0);

    assert_eq!(s.step, 20 * 8);
    for r in &s.log {
        assert_eq!(r.values.len(), FINETUNE_HEADER.len() - 3);
        let parts: f64 = r.values[1..].iter().sum();
        assert!((r.values[0] - parts).abs() < 1e-9);
    }
    let epoch_ends: Vec<_> = s.log.iter().filter(|r| r.val_metric.is_some()).map(|r| r.step).collect();
    assert_eq!(epoch_ends, (0..20).map(|e| e * 8 + 7).collect::<Vec<_>>());
    let csv = metrics_csv(Stage::Finetune, &s.log);
    assert!(csv.starts_with("epoch,step,loss_total,loss_w,loss_gamma_T,loss_gamma_D,loss_gamma_C,loss_reg,val_metric\n"));
    assert_eq!(csv.lines().count(), s.log.len() + 1);
}

#[test]
fn pretrain_loss_decreases_and_components_sum() {
    let p = prepared(96, 2.0);
    let cfg = small_cfg(Stage::Pretrain, 5);
    let (_, s) = train(Stage::Pretrain, &cfg, &p);
    let means = s.epoch_means();
    assert!(means[4] < means[0], "{means:?}");
    for r in &s.log {
        assert!((r.values[0] - r.values[1..].iter().sum::<f64>()).abs() < 1e-9);
    }
    assert!(metrics_csv(Stage::Pretrain, &s.log).starts_with("epoch,step,loss_total,loss_infonce,loss_ce,loss_kl,val_metric\n"));
}

fn probe_accuracy(m: &ShapTstModel, train: &TimeSeriesDataset, test: &TimeSeriesDataset) -> f64 {
    let feats = |d: &TimeSeriesDataset| -> Vec<Vec<f64>> {
        let (_, _, states) = m.forward_batch(&d.all().unwrap().x).unwrap();
        let (n, tok, w) = (states.shape()[0], states.shape()[1], states.shape()[2]);
        (0..n).map(|i| states.data()[i * tok * w..i * tok * w + w].to_vec()).collect()
    };
    let labels = |d: &TimeSeriesDataset| -> Vec<f64> { (0..d.len()).map(|i| d.class_of(i).unwrap() as f64).collect() };
    let (xtr, ytr) = (feats(train), labels(train));
    let w_len = xtr[0].len();
    let mut w = vec![0.0; w_len + 1];
    for _ in 0..500 {
        let mut g = vec![0.0; w_len + 1];
        for (x, y) in xtr.iter().zip(&ytr) {
            let z = w[w_len] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let e = 1.0 / (1.0 + (-z).exp()) - y;
            x.iter().enumerate().for_each(|(j, a)| g[j] += e * a);
            g[w_len] += e;
        }
        w.iter_mut().zip(&g).for_each(|(wi, gi)| *wi -= 0.5 * gi / xtr.len() as f64);
    }
    let (xte, yte) = (feats(test), labels(test));
    let hits = xte
        .iter()
        .zip(&yte)
        .filter(|(x, y)| {
            let z = w[w_len] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            (z > 0.0) == (**y > 0.5)
        })
        .count();
    hits as f64 / yte.len() as f64
}

#[test]
fn supervised_pretraining_gives_a_useful_probe() {
    let p = prepared(160, 2.0);
    let mut cfg = small_cfg(Stage::Pretrain, 6);
    cfg.weights.alpha_ce = 5.0;
    cfg.weights.alpha_kl = 0.0;
    let (m, _) = train(Stage::Pretrain, &cfg, &p);
    let acc = probe_accuracy(&m, &p.train, &p.test);
    assert!(acc > 0.5 + 0.2, "probe accuracy {acc}");
}

#[test]
fn fixed_seed_is_deterministic() {
    let p = prepared(48, 1.0);
    let cfg = small_cfg(Stage::Finetune, 2);
    let (a, sa) = train(Stage::Finetune, &cfg, &p);
    let (b, sb) = train(Stage::Finetune, &cfg, &p);
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(metrics_csv(Stage::Finetune, &sa.log), metrics_csv(Stage::Finetune, &sb.log));
    let other = TrainConfig { seed: 1, ..cfg };
    let (c, _) = train(Stage::Finetune, &other, &p);
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn resume_from_checkpoint_is_bitwise_identical() {
    let p = prepared(48, 1.0);
    for stage in [Stage::Pretrain, Stage::Finetune] {
        let cfg = small_cfg(stage, 3);
        let (full, full_state) = train(stage, &cfg, &p);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let mut m = fresh(&cfg, &p);
        let mut s = TrainState::new(stage, &m, cfg.seed);
        let mut save = |m: &ShapTstModel, s: &TrainState| {
            Checkpoint {
                model: m.clone(),
                train: Some(cfg.clone()),
                norm: Some(p.norm.clone()),
                state: Some(s.clone()),
            }
            .save(&path)
        };
        let opts = TrainOptions {
            stop_after_epoch: Some(1),
            on_epoch_end: Some(&mut save),
        };
        match stage {
            Stage::Pretrain => pretrain(&mut m, &p.train, Some(&p.test), &cfg, &mut s, opts),
            Stage::Finetune => finetune(&mut m, &p.train, Some(&p.test), &cfg, &mut s, opts),
        }
        .unwrap();
        drop(m);

        let ck = Checkpoint::load(&path).unwrap();
        let mut m = ck.model;
        let mut s = ck.state.unwrap();
        assert_eq!(s.epoch, 1);
        match stage {
            Stage::Pretrain => pretrain(&mut m, &p.train, Some(&p.test), &cfg, &mut s, TrainOptions::default()),
            Stage::Finetune => finetune(&mut m, &p.train, Some(&p.test), &cfg, &mut s, TrainOptions::default()),
        }
        .unwrap();
        assert_eq!(bits(&m), bits(&full));
        assert_eq!(s, full_state);
    }
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let p = prepared(32, 1.0);
    let cfg = small_cfg(Stage::Finetune, 1);
    let (m, s) = train(Stage::Finetune, &cfg, &p);
    let ck = Checkpoint {
        model: m.clone(),
        train: Some(cfg.clone()),
        norm: Some(p.norm.clone()),
        state: Some(s),
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ck.save(&a).unwrap();
    let back = Checkpoint::load(&a).unwrap();
    back.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let x = &p.test.samples[0].x;
    let (l1, phi1, _) = back.model.forward_batch(&crate::model::stack_one(x).unwrap()).unwrap();
    let (l2, phi2, _) = m.forward_batch(&crate::model::stack_one(x).unwrap()).unwrap();
    assert_eq!((l1, phi1), (l2, phi2));
    assert_eq!(back.train, Some(cfg));

    let bare = Checkpoint {
        model: m,
        train: None,
        norm: None,
        state: None,
    };
    let bytes = bare.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes).unwrap().state.is_none());

    let mut wrong_version = bytes.clone();
    wrong_version[8] = 9;
    let msg = Checkpoint::from_bytes(&wrong_version).unwrap_err().to_string();
    assert!(msg.contains("version 9"), "{msg}");
    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 1;
    assert!(Checkpoint::from_bytes(&corrupt).unwrap_err().to_string().contains("checksum"));
    assert!(Checkpoint::from_bytes(b"junk").is_err());
}

#[test]
fn regularizer_shrinks_attribution_of_target_feature() {
    let p = prepared(96, 2.0);
    let base = small_cfg(Stage::Finetune, 4);
    let reg = TrainConfig {
        weights: LossWeights {
            alpha_shap_reg: 50.0,
            ..Default::default()
        },
        reg: Some(ShapRegTarget {
            selection: Selection::Features(vec![0]),
            value: 0.0,
        }),
        ..base.clone()
    };
    let mean_abs = |m: &ShapTstModel| {
        let attrs = m.explain_batch(&p.test.all().unwrap().x, Baseline::default()).unwrap();
        let raw: f64 = attrs
            .iter()
            .map(|a| {
                let (t, d, k) = a.dims();
                (0..t).map(|ti| a.raw.data()[(ti * d) * k + a.predicted_class]).sum::<f64>().abs()
            })
            .sum();
        raw / attrs.len() as f64
    };
    let (plain, _) = train(Stage::Finetune, &base, &p);
    let (shrunk, _) = train(Stage::Finetune, &reg, &p);
    assert!(mean_abs(&shrunk) < mean_abs(&plain), "{} vs {}", mean_abs(&shrunk), mean_abs(&plain));
}

#[test]
fn non_finite_loss_reports_batch() {
    let mut p = prepared(32, 1.0);
    let cfg = TrainConfig {
        batch_size: 32,
        ..small_cfg(Stage::Finetune, 1)
    };
    p.train.samples[3].x.data_mut()[0] = f64::NAN;
    let mut m = fresh(&cfg, &p);
    let mut s = TrainState::new(Stage::Finetune, &m, 0);
    match finetune(&mut m, &p.train, None, &cfg, &mut s, TrainOptions::default()) {
        Err(Error::Divergence { epoch: 0, batch: 0 }) => {}
        other => panic!("{other:?}"),
    }
}
