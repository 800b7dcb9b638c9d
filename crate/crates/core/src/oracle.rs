//! Reference Shapley estimators over generic coalition games: exact
//! enumeration, permutation sampling and kernel-weighted least squares with
//! the efficiency constraint enforced exactly.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{sample_coalition_with, shapley_size_distribution, Baseline, Level, SubsetMask};
use crate::model::{ShapTstModel, ShapleyAttribution};
use crate::tensor::Tensor;

pub const MAX_EXACT_PLAYERS: usize = 20;

/// Coalitions are evaluated in batches of at most this many.
const BATCH: usize = 2048;

/// A cooperative game with possibly several outputs per coalition (one per class).
pub trait CoalitionGame {
    fn n_players(&self) -> usize;

    fn n_outputs(&self) -> usize {
        1
    }

    /// Flat `[coalitions.len() × n_outputs]` values.
    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>>;
}

/// Single-output game backed by a closure.
pub struct FnGame<F> {
    n: usize,
    f: F,
}

impl<F: Fn(&[bool]) -> f64> FnGame<F> {
    pub fn new(n: usize, f: F) -> Self {
        Self { n, f }
    }
}

impl<F: Fn(&[bool]) -> f64> CoalitionGame for FnGame<F> {
    fn n_players(&self) -> usize {
        self.n
    }

    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>> {
        Ok(coalitions.iter().map(|s| (self.f)(s)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapleyEstimate {
    /// `[output][player]`
    pub phi: Vec<Vec<f64>>,
    /// Per-player standard errors, for the stochastic estimators.
    pub std_errors: Option<Vec<Vec<f64>>>,
    /// Number of coalition evaluations consumed.
    pub evaluations: usize,
    pub v_empty: Vec<f64>,
    pub v_full: Vec<f64>,
}

impl ShapleyEstimate {
    /// Player values of the first output.
    pub fn values(&self) -> &[f64] {
        &self.phi[0]
    }
}

fn endpoints(game: &impl CoalitionGame) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = game.n_players();
    let v = game.values(&[vec![false; n], vec![true; n]])?;
    let k = game.n_outputs();
    Ok((v[..k].to_vec(), v[k..].to_vec()))
}

fn bits(mask: usize, n: usize) -> Vec<bool> {
    (0..n).map(|i| mask >> i & 1 == 1).collect()
}

/// Enumerates all `2^n` coalitions and applies the weighted marginal formula.
pub fn exact_shapley(game: &impl CoalitionGame) -> Result<ShapleyEstimate> {
    let n = game.n_players();
    if n == 0 || n > MAX_EXACT_PLAYERS {
        return Err(Error::InvalidArgument(format!(
            "exact enumeration supports 1..={MAX_EXACT_PLAYERS} players, got {n}"
        )));
    }
    let k = game.n_outputs();
    let total = 1usize << n;
    let mut table = Vec::with_capacity(total * k);
    for start in (0..total).step_by(BATCH) {
        let chunk: Vec<Vec<bool>> = (start..total.min(start + BATCH)).map(|m| bits(m, n)).collect();
        table.extend(game.values(&chunk)?);
    }
    // weight[s] = s!(n-s-1)!/n!
    let mut weight = vec![0.0; n];
    weight[0] = 1.0 / n as f64;
    for s in 1..n {
        weight[s] = weight[s - 1] * s as f64 / (n - s) as f64;
    }
    let mut phi = vec![vec![0.0; n]; k];
    for mask in 0..total {
        let size = mask.count_ones() as usize;
        for i in 0..n {
            if mask >> i & 1 == 1 {
                continue;
            }
            let with = mask | 1 << i;
            for (o, row) in phi.iter_mut().enumerate() {
                row[i] += weight[size] * (table[with * k + o] - table[mask * k + o]);
            }
        }
    }
    Ok(ShapleyEstimate {
        phi,
        std_errors: None,
        evaluations: total,
        v_empty: table[..k].to_vec(),
        v_full: table[(total - 1) * k..].to_vec(),
    })
}

/// Averages marginal contributions along `n_samples` uniformly random
/// orderings. The empty and full coalitions are evaluated once and shared.
pub fn permutation_shapley(game: &impl CoalitionGame, n_samples: usize, rng: &mut ChaCha8Rng) -> Result<ShapleyEstimate> {
    let n = game.n_players();
    if n_samples == 0 || n == 0 {
        return Err(Error::InvalidArgument("permutation sampling needs n_samples >= 1".into()));
    }
    let k = game.n_outputs();
    let (v_empty, v_full) = endpoints(game)?;
    let mut sum = vec![vec![0.0; n]; k];
    let mut sum_sq = vec![vec![0.0; n]; k];
    let per_batch = (BATCH / n.max(1)).max(1);
    let mut evaluations = 2;
    let mut done = 0;
    while done < n_samples {
        let count = per_batch.min(n_samples - done);
        let mut orders = Vec::with_capacity(count);
        let mut prefixes = Vec::with_capacity(count * n.saturating_sub(1));
        for _ in 0..count {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let mut s = vec![false; n];
            for &p in &order[..n - 1] {
                s[p] = true;
                prefixes.push(s.clone());
            }
            orders.push(order);
        }
        let v = game.values(&prefixes)?;
        evaluations += prefixes.len();
        for (r, order) in orders.iter().enumerate() {
            let at = |step: usize, o: usize| -> f64 {
                if step == 0 {
                    v_empty[o]
                } else if step == n {
                    v_full[o]
                } else {
                    v[(r * (n - 1) + step - 1) * k + o]
                }
            };
            for (step, &p) in order.iter().enumerate() {
                for o in 0..k {
                    let m = at(step + 1, o) - at(step, o);
                    sum[o][p] += m;
                    sum_sq[o][p] += m * m;
                }
            }
        }
        done += count;
    }
    let ns = n_samples as f64;
    let phi: Vec<Vec<f64>> = sum.iter().map(|r| r.iter().map(|s| s / ns).collect()).collect();
    let std_errors = phi
        .iter()
        .zip(&sum_sq)
        .map(|(mean, sq)| {
            mean.iter()
                .zip(sq)
                .map(|(m, q)| {
                    if n_samples < 2 {
                        return f64::NAN;
                    }
                    let var = ((q / ns - m * m) * ns / (ns - 1.0)).max(0.0);
                    (var / ns).sqrt()
                })
                .collect()
        })
        .collect();
    Ok(ShapleyEstimate {
        phi,
        std_errors: Some(std_errors),
        evaluations,
        v_empty,
        v_full,
    })
}

/// Kernel-weighted least squares: coalitions are drawn from the Shapley
/// kernel (so every draw has unit weight), in complementary pairs, and the
/// regression of `v(S) - v(∅)` on the indicator of `S` is solved subject to
/// `Σφ = v(𝟙) - v(∅)` through the KKT system. Repeated coalitions are
/// evaluated once.
pub fn kernel_shap(game: &impl CoalitionGame, n_samples: usize, rng: &mut ChaCha8Rng) -> Result<ShapleyEstimate> {
    let n = game.n_players();
    if n < 2 {
        return exact_shapley(game);
    }
    if n_samples < n {
        return Err(Error::InvalidArgument(format!(
            "kernel regression needs n_samples >= n_players ({n_samples} < {n})"
        )));
    }
    let k = game.n_outputs();
    let (v_empty, v_full) = endpoints(game)?;
    let sizes = shapley_size_distribution(n)?;

    let mut draws: Vec<Vec<bool>> = Vec::with_capacity(n_samples);
    while draws.len() < n_samples {
        let s = sample_coalition_with(&sizes, rng)?;
        let comp: Vec<bool> = s.iter().map(|b| !b).collect();
        draws.push(s);
        if draws.len() < n_samples {
            draws.push(comp);
        }
    }
    let mut index: HashMap<Vec<bool>, usize> = HashMap::new();
    let mut distinct = Vec::new();
    let mut counts = Vec::new();
    for s in draws {
        let next = distinct.len();
        let i = *index.entry(s.clone()).or_insert(next);
        if i == next {
            distinct.push(s);
            counts.push(0.0);
        }
        counts[i] += 1.0;
    }
    let mut values = Vec::with_capacity(distinct.len() * k);
    for chunk in distinct.chunks(BATCH) {
        values.extend(game.values(chunk)?);
    }

    // [2·ZᵀWZ  1] [φ]   [2·ZᵀW(v - v∅)]
    // [1ᵀ      0] [μ] = [v𝟙 - v∅      ]
    let mut kkt = DMatrix::<f64>::zeros(n + 1, n + 1);
    for (s, &w) in distinct.iter().zip(&counts) {
        for i in (0..n).filter(|&i| s[i]) {
            for j in (0..n).filter(|&j| s[j]) {
                kkt[(i, j)] += 2.0 * w;
            }
        }
    }
    for i in 0..n {
        kkt[(i, n)] = 1.0;
        kkt[(n, i)] = 1.0;
    }
    let lu = kkt.lu();
    let mut phi = Vec::with_capacity(k);
    for o in 0..k {
        let mut rhs = DVector::<f64>::zeros(n + 1);
        for (r, (s, &w)) in distinct.iter().zip(&counts).enumerate() {
            let y = values[r * k + o] - v_empty[o];
            for i in (0..n).filter(|&i| s[i]) {
                rhs[i] += 2.0 * w * y;
            }
        }
        rhs[n] = v_full[o] - v_empty[o];
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Singular(format!("kernel regression system is singular with {n_samples} samples")))?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("kernel regression produced non-finite values".into()));
        }
        let mut row: Vec<f64> = sol.iter().take(n).copied().collect();
        // one refinement step pins the constraint to rounding level
        let slack = (rhs[n] - row.iter().sum::<f64>()) / n as f64;
        row.iter_mut().for_each(|v| *v += slack);
        phi.push(row);
    }
    Ok(ShapleyEstimate {
        phi,
        std_errors: None,
        evaluations: distinct.len() + 2,
        v_empty,
        v_full,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    Exact,
    Permutation,
    KernelWls,
}

impl std::str::FromStr for OracleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "permutation" => Ok(Self::Permutation),
            "kernel" | "kernel_wls" => Ok(Self::KernelWls),
            _ => Err(Error::InvalidArgument(format!("unknown oracle method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub method: OracleMethod,
    pub level: Level,
    /// Permutations or kernel draws; ignored by `Exact`.
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            method: OracleMethod::KernelWls,
            level: Level::Feature,
            n_samples: 2048,
            seed: 0,
        }
    }
}

/// The model's value function for one series at one masking level, over all classes.
pub struct ModelGame<'a> {
    pub model: &'a ShapTstModel,
    pub x: &'a Tensor,
    pub level: Level,
    pub baseline: Baseline,
}

impl CoalitionGame for ModelGame<'_> {
    fn n_players(&self) -> usize {
        let c = self.model.config();
        self.level.n_players(c.t_len, c.n_features, c.lambda)
    }

    fn n_outputs(&self) -> usize {
        self.model.config().n_outputs()
    }

    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>> {
        if coalitions.is_empty() {
            return Ok(Vec::new());
        }
        let c = self.model.config();
        let masked = coalitions
            .iter()
            .map(|s| SubsetMask::new(self.level, c.t_len, c.n_features, c.lambda, s.clone())?.apply(self.x, self.baseline))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = masked.iter().collect();
        Ok(self.model.values_batch(&Tensor::stack(&refs)?)?.into_data())
    }
}

#[derive(Debug, Clone)]
pub struct OracleExplanation {
    /// Player values spread evenly over each player's cells, so
    /// `attribution.aggregate(level, y)` returns the player values.
    pub attribution: ShapleyAttribution,
    pub level: Level,
    pub estimate: ShapleyEstimate,
    /// Model forward passes consumed (one per evaluated coalition).
    pub forward_passes: u64,
}

pub fn run_oracle(game: &impl CoalitionGame, config: &OracleConfig) -> Result<ShapleyEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    match config.method {
        OracleMethod::Exact => exact_shapley(game),
        OracleMethod::Permutation => permutation_shapley(game, config.n_samples, &mut rng),
        OracleMethod::KernelWls => kernel_shap(game, config.n_samples, &mut rng),
    }
}

/// Post-hoc attribution of one series by re-evaluating masked copies.
pub fn oracle_explain(
    model: &ShapTstModel,
    x: &Tensor,
    config: &OracleConfig,
    baseline: Baseline,
) -> Result<OracleExplanation> {
    let game = ModelGame {
        model,
        x,
        level: config.level,
        baseline,
    };
    let before = model.forward_passes();
    let estimate = run_oracle(&game, config)?;
    let forward_passes = model.forward_passes() - before;

    let c = model.config();
    let (t, d, lambda, k) = (c.t_len, c.n_features, c.lambda, c.n_outputs());
    let per_player = match config.level {
        Level::Time => lambda * d,
        Level::Feature => t,
        Level::Cell => lambda,
    } as f64;
    let phi = Tensor::from_fn(&[t, d, k], |i| {
        let (cell, y) = (i / k, i % k);
        let (ti, j) = (cell / d, cell % d);
        let player = match config.level {
            Level::Time => ti / lambda,
            Level::Feature => j,
            Level::Cell => (ti / lambda) * d + j,
        };
        estimate.phi[y][player] / per_player
    });
    let predicted = crate::model::argmax(&estimate.v_full);
    let attribution = ShapleyAttribution {
        raw: phi.clone(),
        phi,
        v_full: estimate.v_full.clone(),
        v_empty: estimate.v_empty.clone(),
        predicted_class: predicted,
        lambda,
    };
    Ok(OracleExplanation {
        attribution,
        level: config.level,
        estimate,
        forward_passes,
    })
}


#[cfg(test)]
mod model_tests {
    use super::*;
    use crate::model::{ModelConfig, Task};
    use rand::Rng;

    fn setup() -> (ShapTstModel, Tensor) {
        let c = ModelConfig {
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
        };
        let m = ShapTstModel::new(c, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::from_fn(&[4, 3], |_| rng.random_range(-2.0..2.0));
        (m, x)
    }

    #[test]
    fn ignored_feature_is_a_null_player() {
        let (mut m, x) = setup();
        let w = m.parameter_mut("embed.conv.weight").unwrap();
        let (k, h) = (w.shape()[0], w.shape()[2]);
        for i in 0..k {
            for o in 0..h {
                w.set(&[i, 1, o], 0.0);
            }
        }
        let cfg = OracleConfig {
            method: OracleMethod::Exact,
            level: Level::Feature,
            ..Default::default()
        };
        let e = oracle_explain(&m, &x, &cfg, Baseline::default()).unwrap();
        for y in 0..2 {
            assert!(e.estimate.phi[y][1].abs() < 1e-12);
        }
    }

    #[test]
    fn pass_count_equals_evaluations_and_exact_is_efficient() {
        let (m, x) = setup();
        for (method, level) in [
            (OracleMethod::Exact, Level::Cell),
            (OracleMethod::Exact, Level::Time),
            (OracleMethod::Permutation, Level::Feature),
            (OracleMethod::KernelWls, Level::Cell),
        ] {
            let cfg = OracleConfig {
                method,
                level,
                n_samples: 40,
                seed: 1,
            };
            let e = oracle_explain(&m, &x, &cfg, Baseline::default()).unwrap();
            assert_eq!(e.forward_passes, e.estimate.evaluations as u64);
            if method == OracleMethod::Exact {
                for y in 0..2 {
                    let gap = e.estimate.v_full[y] - e.estimate.v_empty[y];
                    assert!((e.estimate.phi[y].iter().sum::<f64>() - gap).abs() < 1e-9);
                    let agg = e.attribution.aggregate(level, y);
                    for (a, b) in agg.iter().zip(&e.estimate.phi[y]) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn full_coalition_value_is_model_probability() {
        let (m, x) = setup();
        let cfg = OracleConfig {
            method: OracleMethod::Exact,
            level: Level::Feature,
            ..Default::default()
        };
        let e = oracle_explain(&m, &x, &cfg, Baseline::default()).unwrap();
        assert_eq!(e.estimate.v_full, m.predict_proba(&x).unwrap());
        // with lambda > 1 the time-level full coalition is the block-pooled series
        let cfg = OracleConfig {
            level: Level::Time,
            ..cfg
        };
        let e = oracle_explain(&m, &x, &cfg, Baseline::default()).unwrap();
        let pooled = SubsetMask::full(Level::Time, 4, 3, 2).unwrap().apply(&x, Baseline::default()).unwrap();
        assert_eq!(e.estimate.v_full, m.predict_proba(&pooled).unwrap());
    }
}
