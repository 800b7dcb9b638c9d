use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::masking::shapley_size_distribution;
use crate::model::ModelConfig;
use crate::tensor::{check_gradients, TensorError};

fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        ff_mult: 2,
        conv_kernel: 3,
        n_classes: 2,
        task: Task::Classification,
        t_len: 4,
        n_features: 3,
        lambda: 2,
    }
}

fn random_batch(c: &ModelConfig, b: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[b, c.t_len, c.n_features], |_| rng.random_range(-2.0..2.0));
    let ys = (0..b).map(|_| rng.random_range(0..c.n_classes)).collect();
    Batch::new(x, Targets::Classes(ys)).unwrap()
}

fn tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "loss",
            reason: other.to_string(),
        },
    }
}

fn zero_explainer(m: &mut ShapTstModel) {
    for name in ["head.explain.weight", "head.explain.bias"] {
        m.parameter_mut(name).unwrap().data_mut().fill(0.0);
    }
}

#[test]
fn zero_phi_loss_is_mean_squared_value_gap() {
    let c = config();
    let mut m = ShapTstModel::new(c.clone(), 3).unwrap();
    zero_explainer(&mut m);
    let batch = random_batch(&c, 3, 4);
    let base = Baseline::default();
    let levels = Level::ALL;
    let (_, per) = fastshap_loss(&m, &batch.x, &levels, 4, base, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();

    // replay the draw order with scalar value-function calls
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let empty = SubsetMask::empty(Level::Feature, 4, 3, 2).unwrap();
    let mut sums = [0.0; 3];
    for b in 0..3 {
        let x = batch.sample(b);
        for (li, &level) in levels.iter().enumerate() {
            for _ in 0..4 {
                let y = rng.random_range(0..2);
                let s = sample_subset(level, 4, 3, 2, &mut rng).unwrap();
                let gap = m.value_function(&x, y, &s, base).unwrap() - m.value_function(&x, y, &empty, base).unwrap();
                sums[li] += gap * gap;
            }
        }
    }
    for (got, want) in per.iter().zip(sums) {
        assert!((got - want / 12.0).abs() < 1e-12, "{got} vs {}", want / 12.0);
    }
}

#[test]
fn additive_phi_has_zero_loss_for_linear_game() {
    let (t, d, lambda, k) = (4, 3, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w: Vec<f64> = (0..t * d * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    for level in Level::ALL {
        let n_mc = 6;
        let mut coeff = vec![0.0; n_mc * t * d * k];
        let mut target = vec![0.0; n_mc];
        for m in 0..n_mc {
            let y = rng.random_range(0..k);
            let s = sample_subset(level, t, d, lambda, &mut rng).unwrap();
            for (cell, kept) in s.kept_cells().into_iter().enumerate() {
                coeff[(m * t * d + cell) * k + y] = kept;
                target[m] += kept * w[cell * k + y];
            }
        }
        let draws = ShapleyDraws {
            level,
            coeff: Tensor::new(vec![1, n_mc, t * d * k], coeff).unwrap(),
            target: Tensor::new(vec![1, n_mc, 1], target).unwrap(),
        };
        let mut tape = Tape::new();
        let phi = tape.constant(Tensor::new(vec![1, t, d, k], w.clone()).unwrap()).unwrap();
        let l = shapley_regression_loss(&mut tape, phi, &draws).unwrap();
        assert!(tape.value(l).item() < 1e-28);
    }
}

#[test]
fn two_player_minimizer_recovers_shapley_values() {
    // v(S) = 0.2 + 0.3·s1 + 0.7·s2; Shapley values are (0.3, 0.7)
    let v = |s: &[bool]| 0.2 + 0.3 * f64::from(u8::from(s[0])) + 0.7 * f64::from(u8::from(s[1]));
    let v_empty = v(&[false, false]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = 400;
    let sizes = shapley_size_distribution(2).unwrap();
    let mut coeff = vec![0.0; draws * 2];
    let mut target = vec![0.0; draws];
    for m in 0..draws {
        let s = crate::masking::sample_coalition_with(&sizes, &mut rng).unwrap();
        coeff[m * 2] = f64::from(u8::from(s[0]));
        coeff[m * 2 + 1] = f64::from(u8::from(s[1]));
        target[m] = v(&s) - v_empty;
    }
    let d = ShapleyDraws {
        level: Level::Feature,
        coeff: Tensor::new(vec![1, draws, 2], coeff).unwrap(),
        target: Tensor::new(vec![1, draws, 1], target).unwrap(),
    };
    let mut phi = Tensor::zeros(&[1, 1, 2, 1]);
    for _ in 0..500 {
        let mut tape = Tape::new();
        let p = tape.param(phi.clone()).unwrap();
        let l = shapley_regression_loss(&mut tape, p, &d).unwrap();
        let g = tape.backward(l).unwrap();
        let g = g.get(p).unwrap();
        for (x, gi) in phi.data_mut().iter_mut().zip(g.data()) {
            *x -= 0.5 * gi;
        }
    }
    assert!((phi.data()[0] - 0.3).abs() < 1e-3, "{:?}", phi.data());
    assert!((phi.data()[1] - 0.7).abs() < 1e-3, "{:?}", phi.data());
}

#[test]
fn fastshap_rejects_zero_draws_and_is_deterministic() {
    let c = config();
    let m = ShapTstModel::new(c.clone(), 3).unwrap();
    let batch = random_batch(&c, 2, 4);
    let b = Baseline::default();
    assert!(fastshap_loss(&m, &batch.x, &Level::ALL, 0, b, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    let a = fastshap_loss(&m, &batch.x, &Level::ALL, 3, b, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let again = fastshap_loss(&m, &batch.x, &Level::ALL, 3, b, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(a, again);
    assert!(a.1.iter().all(|l| l.is_finite() && *l >= 0.0));
}

#[test]
fn finetune_reduces_to_supervised_loss() {
    let c = config();
    let m = ShapTstModel::new(c.clone(), 3).unwrap();
    let batch = random_batch(&c, 4, 8);
    let objective = ExplainerObjective {
        n_mc: 0,
        ..Default::default()
    };
    let weights = LossWeights::default();
    let mut tape = Tape::new();
    let p = m.bind(&mut tape, true).unwrap();
    let terms = finetune_loss(&m, &mut tape, &p, &batch, &weights, &objective, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let total = tape.value(terms.total).item();

    let mut ce = 0.0;
    if let Targets::Classes(ys) = &batch.targets {
        for (i, &y) in ys.iter().enumerate() {
            ce -= m.predict_proba(&batch.sample(i)).unwrap()[y].ln();
        }
    }
    assert!((total - ce / 4.0).abs() < 1e-12);
    assert!(terms.gamma.is_empty() && terms.reg.is_none());
}

#[test]
fn confident_predictions_have_zero_supervised_loss() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::new(vec![2, 2], vec![800.0, -800.0, -800.0, 800.0]).unwrap()).unwrap();
    let l = supervised_loss(&mut tape, logits, &Targets::Classes(vec![0, 1])).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let l = supervised_loss(&mut tape, logits, &Targets::Classes(vec![0, 2]));
    assert!(l.is_err());
}

#[test]
fn finetune_total_is_sum_of_components() {
    let c = config();
    let m = ShapTstModel::new(c.clone(), 3).unwrap();
    let batch = random_batch(&c, 4, 8);
    let objective = ExplainerObjective {
        reg: Some(ShapRegTarget::zeros(Selection::Features(vec![1]))),
        ..Default::default()
    };
    let weights = LossWeights {
        alpha_shap_reg: 0.7,
        ..Default::default()
    };
    let mut tape = Tape::new();
    let p = m.bind(&mut tape, true).unwrap();
    let terms = finetune_loss(&m, &mut tape, &p, &batch, &weights, &objective, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let v = terms.values(&tape);
    let sum = v.supervised + v.gamma_time + v.gamma_feature + v.gamma_cell + v.reg;
    assert!((v.total - sum).abs() < 1e-12);
    assert!(v.reg > 0.0 && v.gamma_cell > 0.0);
}

#[test]
fn finetune_gradient_wrt_explainer_matches_finite_differences() {
    let c = config();
    let m = ShapTstModel::new(c.clone(), 11).unwrap();
    let batch = random_batch(&c, 3, 12);
    let objective = ExplainerObjective {
        n_mc: 2,
        reg: Some(ShapRegTarget {
            selection: Selection::Cells(vec![(0, 2), (1, 0)]),
            value: 0.1,
        }),
        ..Default::default()
    };
    let weights = LossWeights {
        alpha_shap_reg: 0.5,
        ..Default::default()
    };
    let names = m.parameter_names();
    let wi = names.iter().position(|n| n == "head.explain.weight").unwrap();
    let bi = names.iter().position(|n| n == "head.explain.bias").unwrap();
    let inputs = [m.parameters()[wi].clone(), m.parameters()[bi].clone()];
    let report = check_gradients(&inputs, 1e-5, |tape, vars| {
        let mut p = m.bind(tape, false).map_err(tensor_err)?;
        p.0[wi] = vars[0];
        p.0[bi] = vars[1];
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let terms = finetune_loss(&m, tape, &p, &batch, &weights, &objective, &mut rng).map_err(tensor_err)?;
        Ok(terms.total)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn every_parameter_receives_gradient() {
    let c = config();
    let m = ShapTstModel::new(c.clone(), 2).unwrap();
    let batch = random_batch(&c, 4, 3);
    let mut tape = Tape::new();
    let p = m.bind(&mut tape, true).unwrap();
    let terms = finetune_loss(
        &m,
        &mut tape,
        &p,
        &batch,
        &LossWeights::default(),
        &ExplainerObjective::default(),
        &mut ChaCha8Rng::seed_from_u64(4),
    )
    .unwrap();
    let g = tape.backward(terms.total).unwrap();
    for (name, v) in m.parameter_names().iter().zip(&p.0) {
        let g = g.get(*v).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.data().iter().any(|x| *x != 0.0), "{name} gradient is all zero");
    }
}

#[test]
fn regularizer_gradient_pulls_selected_phi_to_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let phi = Tensor::from_fn(&[1, 4, 3, 2], |_| rng.random_range(-1.0..1.0));
    let reg = ShapRegTarget::zeros(Selection::Features(vec![2]));
    let mut tape = Tape::new();
    let p = tape.param(phi.clone()).unwrap();
    let r = shap_regularizer(&mut tape, p, &reg, 2, 0.8).unwrap();
    let g = tape.backward(r).unwrap();
    let g = g.get(p).unwrap();
    for (i, (&gi, &x)) in g.data().iter().zip(phi.data()).enumerate() {
        let feature = (i / 2) % 3;
        let want = if feature == 2 { 2.0 * 0.8 * x } else { 0.0 };
        assert!((gi - want).abs() < 1e-14);
    }
    let bad = ShapRegTarget::zeros(Selection::TimeBlocks(vec![2]));
    assert!(bad.cell_mask(4, 3, 2).is_err());
}

fn naive_info_nce(z1: &[Vec<f64>], z2: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb) / tau
    };
    let n = z1.len();
    let mut total = 0.0;
    for i in 0..n {
        let pos = cos(&z1[i], &z2[i]);
        let row: f64 = (0..n).map(|j| cos(&z1[i], &z2[j]).exp()).sum();
        let col: f64 = (0..n).map(|j| cos(&z1[j], &z2[i]).exp()).sum();
        total += -(pos - row.ln()) - (pos - col.ln());
    }
    total / (2.0 * n as f64)
}

fn info_nce_value(z1: &[Vec<f64>], z2: &[Vec<f64>], tau: f64) -> Result<f64> {
    let d = z1[0].len();
    let flat = |z: &[Vec<f64>]| Tensor::new(vec![z.len(), d], z.concat()).unwrap();
    let mut tape = Tape::new();
    let a = tape.constant(flat(z1))?;
    let b = tape.constant(flat(z2))?;
    let l = info_nce(&mut tape, a, b, tau)?;
    Ok(tape.value(l).item())
}

#[test]
fn info_nce_examples() {
    let one = vec![vec![0.3, -1.2, 0.5]];
    assert_eq!(info_nce_value(&one, &[vec![1.0, 0.0, 2.0]], 0.5).unwrap(), 0.0);

    let basis: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    assert!(info_nce_value(&basis, &basis, 0.01).unwrap() < 1e-40);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut unit = || {
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let z1: Vec<_> = (0..4).map(|_| unit()).collect();
    let z2: Vec<_> = (0..4).map(|_| unit()).collect();
    let got = info_nce_value(&z1, &z2, 0.5).unwrap();
    assert!((got - naive_info_nce(&z1, &z2, 0.5)).abs() < 1e-12);
    assert!(got >= 0.0);

    assert!(info_nce_value(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]], 0.5).is_err());
}

#[test]
fn kl_examples() {
    let p = [0.2, 0.5, 0.3];
    assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
    assert!((kl_div(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!(kl_div(&[0.5, 0.6], &[0.5, 0.5]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let mut dist = || {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (p, q) = (dist(), dist());
        let direct: f64 = (0..4).map(|i| p[i] * p[i].ln() - p[i] * q[i].ln()).sum();
        let got = kl_div(&p, &q).unwrap();
        assert!((got - direct).abs() < 1e-12);
        assert!(got >= 0.0);
    }
}

fn pretrain_fixture() -> (ShapTstModel, Views, Targets) {
    let c = config();
    let m = ShapTstModel::new(c.clone(), 21).unwrap();
    let batch = random_batch(&c, 2, 22);
    let b = Baseline::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let masks = [
        SubsetMask::time(vec![true, false], 4, 3, 2).unwrap(),
        SubsetMask::feature(vec![false, true, true], 4).unwrap(),
        SubsetMask::cell(&[true, true], &[true, false, true], 4, 2).unwrap(),
        SubsetMask::time(vec![false, true], 4, 3, 2).unwrap(),
    ];
    let mut tilde = Vec::new();
    let mut hat = Vec::new();
    for i in 0..2 {
        let x = batch.sample(i);
        let m1 = bernoulli_mask(4, 3, 0.3, &mut rng).unwrap();
        let m2 = bernoulli_mask(4, 3, 0.3, &mut rng).unwrap();
        tilde.push(view(&x, &masks[2 * i], &m1, b).unwrap());
        hat.push(view(&x, &masks[2 * i + 1], &m2, b).unwrap());
    }
    let stack = |v: &[Tensor]| Tensor::stack(&v.iter().collect::<Vec<_>>()).unwrap();
    let views = Views {
        tilde: stack(&tilde),
        hat: stack(&hat),
    };
    (m, views, batch.targets)
}

#[test]
fn pretrain_loss_is_sum_of_independent_terms() {
    let (m, views, targets) = pretrain_fixture();
    let w = LossWeights {
        alpha_ce: 0.7,
        alpha_kl: 0.4,
        ..Default::default()
    };
    let mut tape = Tape::new();
    let p = m.bind(&mut tape, false).unwrap();
    let terms = pretrain_loss_on_views(&m, &mut tape, &p, &views, &targets, &w).unwrap();
    let total = tape.value(terms.total).item();

    let Targets::Classes(ys) = &targets else { unreachable!() };
    let cls = |x: &Tensor| m.forward(x).unwrap().token_states.index_first(0).into_data();
    let z1: Vec<_> = (0..2).map(|i| cls(&views.tilde.index_first(i))).collect();
    let z2: Vec<_> = (0..2).map(|i| cls(&views.hat.index_first(i))).collect();
    let mut want = naive_info_nce(&z1, &z2, w.infonce_temperature);
    for i in 0..2 {
        let p_hat = m.predict_proba(&views.hat.index_first(i)).unwrap();
        let p_tilde = m.predict_proba(&views.tilde.index_first(i)).unwrap();
        want += w.alpha_ce * -p_hat[ys[i]].ln() + w.alpha_kl * kl_div(&p_hat, &p_tilde).unwrap();
    }
    assert!((total - want).abs() < 1e-12, "{total} vs {want}");
}

#[test]
fn pretrain_weight_zero_reductions() {
    let (m, views, targets) = pretrain_fixture();
    let run = |w: &LossWeights| {
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, true).unwrap();
        let terms = pretrain_loss_on_views(&m, &mut tape, &p, &views, &targets, w).unwrap();
        let v = terms.values(&tape);
        let g = tape.backward(terms.total).unwrap();
        let grads: Vec<Vec<f64>> = p.0.iter().map(|v| g.get(*v).map_or(vec![], |t| t.data().to_vec())).collect();
        (v, grads)
    };
    let (pure, g_pure) = run(&LossWeights {
        alpha_ce: 0.0,
        alpha_kl: 0.0,
        ..Default::default()
    });
    assert_eq!(pure.total, pure.infonce);

    // gradient of infonce + ce equals (full gradient with alpha_kl = 0)
    let (_, g_ce) = run(&LossWeights {
        alpha_kl: 0.0,
        ..Default::default()
    });
    let mut tape = Tape::new();
    let p = m.bind(&mut tape, true).unwrap();
    let both = Tensor::stack(&[&views.tilde, &views.hat]).unwrap().reshape(&[4, 4, 3]).unwrap();
    let x = tape.constant(both).unwrap();
    let f = m.forward_vars(&mut tape, &p, x, false).unwrap();
    let l_hat = tape.narrow(f.logits, 0, 2, 2).unwrap();
    let ce = supervised_loss(&mut tape, l_hat, &targets).unwrap();
    let ce = tape.scale(ce, 2.0).unwrap();
    let g = tape.backward(ce).unwrap();
    for ((v, a), b) in p.0.iter().zip(&g_ce).zip(&g_pure) {
        if let Some(gc) = g.get(*v) {
            for i in 0..gc.numel() {
                let sum = gc.data()[i] + b.get(i).copied().unwrap_or(0.0);
                assert!((a[i] - sum).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn identical_views_have_zero_kl() {
    let (m, views, targets) = pretrain_fixture();
    let same = Views {
        tilde: views.hat.clone(),
        hat: views.hat,
    };
    let mut tape = Tape::new();
    let p = m.bind(&mut tape, false).unwrap();
    let terms = pretrain_loss_on_views(&m, &mut tape, &p, &same, &targets, &LossWeights::default()).unwrap();
    assert!(terms.values(&tape).kl.abs() < 1e-15);
}

#[test]
fn drawn_views_are_deterministic() {
    let c = config();
    let m = ShapTstModel::new(c.clone(), 1).unwrap();
    let batch = random_batch(&c, 3, 2);
    let obj = PretrainObjective::default();
    let a = draw_views(&m, &batch.x, &obj, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = draw_views(&m, &batch.x, &obj, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a.tilde, b.tilde);
    assert_eq!(a.hat, b.hat);
    assert_ne!(a.tilde, a.hat);
}
