//! Explanation analyses: subset-drop faithfulness, prefix pruning curves,
//! agreement with the exact oracle, and explanation latency.

use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{auroc, macro_f1, mse, pearson, spearman};
use crate::data::{Target, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::masking::{Baseline, Level, SubsetMask};
use crate::model::{argmax, ShapTstModel, ShapleyAttribution, Task};
use crate::oracle::{oracle_explain, OracleConfig, OracleMethod};
use crate::tensor::Tensor;

pub const DEFAULT_FAITHFULNESS_SUBSETS: usize = 128;

/// Per-sample class probabilities (or regression outputs) for a whole dataset.
pub fn dataset_outputs(model: &ShapTstModel, data: &TimeSeriesDataset) -> Result<Tensor> {
    model.values_batch(&data.all()?.x)
}

/// AUROC of the positive-class probability for K=2, macro-F1 for K>2, MSE
/// for regression. A single-class split falls back to accuracy.
pub fn validation_metric(model: &ShapTstModel, data: &TimeSeriesDataset) -> Result<f64> {
    let out = dataset_outputs(model, data)?;
    let k = model.config().n_outputs();
    match model.config().task {
        Task::Regression => {
            let targets: Vec<f64> = data
                .samples
                .iter()
                .map(|s| match s.target {
                    Target::Value(v) => v,
                    Target::Class(c) => c as f64,
                })
                .collect();
            mse(out.data(), &targets)
        }
        Task::Classification => {
            let labels: Vec<usize> = (0..data.len()).map(|i| data.class_of(i).unwrap_or(0)).collect();
            if k == 2 {
                let scores: Vec<f64> = out.data().chunks(2).map(|p| p[1]).collect();
                let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
                if pos.iter().all(|&p| p) || pos.iter().all(|&p| !p) {
                    let preds: Vec<usize> = out.data().chunks(2).map(argmax).collect();
                    return Ok(super::metrics::accuracy(&preds, &labels));
                }
                auroc(&scores, &pos)
            } else {
                let preds: Vec<usize> = out.data().chunks(k).map(argmax).collect();
                macro_f1(&preds, &labels, k)
            }
        }
    }
}

/// Pearson correlation, over `n_subsets` random coalitions S at `level`,
/// between the attribution mass of the removed players and the value drop
/// v(𝟙) − v(S) for the predicted class. Kept-set sizes are uniform in
/// `1..n-1`. `None` when either series is constant.
pub fn faithfulness(
    model: &ShapTstModel,
    x: &Tensor,
    phi: &ShapleyAttribution,
    level: Level,
    n_subsets: usize,
    baseline: Baseline,
    rng: &mut impl Rng,
) -> Result<Option<f64>> {
    let c = model.config();
    let n = level.n_players(c.t_len, c.n_features, c.lambda);
    if n < 2 {
        return Err(Error::InvalidArgument(format!("faithfulness needs at least 2 players at {} level", level.name())));
    }
    let y = phi.predicted_class;
    let player_phi = phi.aggregate(level, y);
    let mut masks = vec![SubsetMask::full(level, c.t_len, c.n_features, c.lambda)?];
    let mut removed = Vec::with_capacity(n_subsets);
    for _ in 0..n_subsets {
        let k = rng.random_range(1..n);
        let mut players = vec![false; n];
        for i in index::sample(rng, n, k) {
            players[i] = true;
        }
        removed.push((0..n).filter(|&i| !players[i]).map(|i| player_phi[i]).sum::<f64>());
        masks.push(SubsetMask::new(level, c.t_len, c.n_features, c.lambda, players)?);
    }
    let v = model.coalition_values(x, y, &masks, baseline)?;
    let drops: Vec<f64> = v[1..].iter().map(|vs| v[0] - vs).collect();
    Ok(pearson(&removed, &drops))
}

/// Mean of the defined per-sample values and the number left undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSummary {
    pub mean: f64,
    pub n_defined: usize,
    pub n_undefined: usize,
}

pub fn mean_defined(values: &[Option<f64>]) -> MeanSummary {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    MeanSummary {
        mean: if defined.is_empty() {
            f64::NAN
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        },
        n_defined: defined.len(),
        n_undefined: values.len() - defined.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrunePoint {
    /// Number of leading time blocks masked.
    pub prefix: usize,
    pub covered: f64,
    pub uncovered: f64,
    /// Model value for the predicted class with the prefix masked.
    pub masked_value: f64,
}

/// Splits the corrected time-level attributions of the predicted class into
/// the leading `p` blocks and the rest, for every `p` from 0 to `T/λ`. The
/// masked values for all prefixes come from one batched pass.
pub fn pruning_curve(model: &ShapTstModel, x: &Tensor, baseline: Baseline) -> Result<Vec<PrunePoint>> {
    let attr = model.explain(x, baseline)?;
    pruning_curve_from(model, x, &attr, baseline)
}

pub fn pruning_curve_from(
    model: &ShapTstModel,
    x: &Tensor,
    attr: &ShapleyAttribution,
    baseline: Baseline,
) -> Result<Vec<PrunePoint>> {
    let c = model.config();
    let y = attr.predicted_class;
    let blocks = attr.aggregate(Level::Time, y);
    let n = blocks.len();
    let masks = (0..=n)
        .map(|p| SubsetMask::time((0..n).map(|i| i >= p).collect(), c.t_len, c.n_features, c.lambda))
        .collect::<Result<Vec<_>>>()?;
    let values = model.coalition_values(x, y, &masks, baseline)?;
    Ok((0..=n)
        .map(|p| PrunePoint {
            prefix: p,
            covered: blocks[..p].iter().sum(),
            uncovered: blocks[p..].iter().sum(),
            masked_value: values[p],
        })
        .collect())
}

/// Spearman correlation of corrected feature-level attributions against the
/// exact oracle for the predicted class, one value per sample.
pub fn oracle_rank_agreement(
    model: &ShapTstModel,
    data: &TimeSeriesDataset,
    indices: &[usize],
    baseline: Baseline,
) -> Result<Vec<Option<f64>>> {
    let cfg = OracleConfig {
        method: OracleMethod::Exact,
        level: Level::Feature,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let x = &data.samples[i].x;
        let attr = model.explain(x, baseline)?;
        let oracle = oracle_explain(model, x, &cfg, baseline)?;
        let y = attr.predicted_class;
        out.push(spearman(&attr.aggregate(Level::Feature, y), &oracle.estimate.phi[y]));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n_samples: usize,
    pub oracle: OracleConfig,
    pub amortized_seconds: f64,
    pub oracle_seconds: f64,
    pub amortized_passes: u64,
    pub oracle_passes: u64,
    pub amortized_passes_per_sample: f64,
    pub oracle_passes_per_sample: f64,
    pub wall_clock_ratio: f64,
    pub pass_ratio: f64,
}

/// Times per-sample `explain` against per-sample `oracle_explain` on the
/// same series. Both run on the calling thread.
pub fn latency_benchmark(
    model: &ShapTstModel,
    samples: &[&Tensor],
    oracle: &OracleConfig,
    baseline: Baseline,
) -> Result<LatencyReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("latency benchmark needs at least one sample".into()));
    }
    model.reset_pass_counter();
    let start = Instant::now();
    for x in samples {
        std::hint::black_box(model.explain(x, baseline)?);
    }
    let amortized_seconds = start.elapsed().as_secs_f64();
    let amortized_passes = model.forward_passes();

    model.reset_pass_counter();
    let start = Instant::now();
    for x in samples {
        std::hint::black_box(oracle_explain(model, x, oracle, baseline)?);
    }
    let oracle_seconds = start.elapsed().as_secs_f64();
    let oracle_passes = model.forward_passes();

    let n = samples.len() as f64;
    Ok(LatencyReport {
        n_samples: samples.len(),
        oracle: oracle.clone(),
        amortized_seconds,
        oracle_seconds,
        amortized_passes,
        oracle_passes,
        amortized_passes_per_sample: amortized_passes as f64 / n,
        oracle_passes_per_sample: oracle_passes as f64 / n,
        wall_clock_ratio: oracle_seconds / amortized_seconds.max(f64::MIN_POSITIVE),
        pass_ratio: oracle_passes as f64 / amortized_passes.max(1) as f64,
    })
}
