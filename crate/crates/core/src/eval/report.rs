//! Dataset-level evaluation of a trained model.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::analysis::{faithfulness, mean_defined, oracle_rank_agreement, pruning_curve_from, validation_metric, PrunePoint};
use super::metrics::{accuracy, auroc, macro_f1, mse};
use crate::data::{Target, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::masking::{Baseline, Level};
use crate::model::{argmax, ShapTstModel, Task};

pub const EVAL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auroc,
    MacroF1,
    Mse,
    Accuracy,
    Validation,
    Faithfulness,
    Spearman,
    Pruning,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Auroc,
        Metric::MacroF1,
        Metric::Mse,
        Metric::Accuracy,
        Metric::Validation,
        Metric::Faithfulness,
        Metric::Spearman,
        Metric::Pruning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::MacroF1 => "macro_f1",
            Metric::Mse => "mse",
            Metric::Accuracy => "accuracy",
            Metric::Validation => "validation",
            Metric::Faithfulness => "faithfulness",
            Metric::Spearman => "spearman",
            Metric::Pruning => "pruning",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<_> = Metric::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidArgument(format!("unknown metric `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub metrics: Vec<Metric>,
    pub level: Level,
    pub n_subsets: usize,
    pub seed: u64,
    pub baseline: Baseline,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::Validation],
            level: Level::Feature,
            n_subsets: super::analysis::DEFAULT_FAITHFULNESS_SUBSETS,
            seed: 0,
            baseline: Baseline::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub sample_id: String,
    pub predicted_class: usize,
    /// Sum of corrected attributions for the predicted class.
    pub total: f64,
    /// Player with the largest |φ| at the report level.
    pub top_player: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub faithfulness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_sha256: Option<String>,
    pub config_sha256: Option<String>,
    pub data_sha256: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub n_samples: usize,
    pub level: Level,
    pub metrics: BTreeMap<String, f64>,
    /// Per-sample quantities that were undefined (constant series), by metric.
    pub undefined: BTreeMap<String, usize>,
    pub samples: Vec<SampleSummary>,
    /// Sample-averaged pruning curve.
    pub pruning: Vec<PrunePoint>,
    pub provenance: Provenance,
}

impl EvalReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in &self.metrics {
            out.push_str(&format!("{k},{v:?}\n"));
        }
        out
    }

    pub fn pruning_csv(&self) -> String {
        let mut out = String::from("prefix,covered,uncovered,masked_value\n");
        for p in &self.pruning {
            out.push_str(&format!("{},{:?},{:?},{:?}\n", p.prefix, p.covered, p.uncovered, p.masked_value));
        }
        out
    }

    pub fn samples_csv(&self) -> String {
        let mut out = String::from("sample_id,predicted_class,total,top_player,faithfulness\n");
        for s in &self.samples {
            let f = s.faithfulness.map(|f| format!("{f:?}")).unwrap_or_default();
            out.push_str(&format!("{},{},{:?},{},{}\n", s.sample_id, s.predicted_class, s.total, s.top_player, f));
        }
        out
    }
}

pub fn evaluate(model: &ShapTstModel, data: &TimeSeriesDataset, opts: &EvalOptions, provenance: Provenance) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let c = model.config();
    let x = data.all()?.x;
    let out = model.values_batch(&x)?;
    let k = c.n_outputs();
    let mut metrics = BTreeMap::new();
    let mut undefined = BTreeMap::new();
    let labels: Vec<usize> = (0..data.len()).map(|i| data.class_of(i).unwrap_or(0)).collect();
    let preds: Vec<usize> = out.data().chunks(k).map(argmax).collect();
    for m in &opts.metrics {
        let value = match (m, c.task) {
            (Metric::Auroc, Task::Classification) if k == 2 => {
                let scores: Vec<f64> = out.data().chunks(2).map(|p| p[1]).collect();
                let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
                Some(auroc(&scores, &pos)?)
            }
            (Metric::Auroc, _) => {
                return Err(Error::InvalidArgument("auroc needs a binary classification model".into()));
            }
            (Metric::MacroF1, Task::Classification) => Some(macro_f1(&preds, &labels, k)?),
            (Metric::Accuracy, Task::Classification) => Some(accuracy(&preds, &labels)),
            (Metric::MacroF1 | Metric::Accuracy, Task::Regression) => {
                return Err(Error::InvalidArgument(format!("{} needs a classification model", m.name())));
            }
            (Metric::Mse, Task::Regression) => {
                let t: Vec<f64> = data
                    .samples
                    .iter()
                    .map(|s| match s.target {
                        Target::Value(v) => v,
                        Target::Class(c) => c as f64,
                    })
                    .collect();
                Some(mse(out.data(), &t)?)
            }
            (Metric::Mse, Task::Classification) => {
                return Err(Error::InvalidArgument("mse needs a regression model".into()));
            }
            (Metric::Validation, _) => Some(validation_metric(model, data)?),
            _ => None,
        };
        if let Some(v) = value {
            metrics.insert(m.name().to_string(), v);
        }
    }

    let attrs = model.explain_batch(&x, opts.baseline)?;
    let mut faith = vec![None; data.len()];
    if opts.metrics.contains(&Metric::Faithfulness) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for (i, a) in attrs.iter().enumerate() {
            faith[i] = faithfulness(model, &data.samples[i].x, a, opts.level, opts.n_subsets, opts.baseline, &mut rng)?;
        }
        let s = mean_defined(&faith);
        metrics.insert("faithfulness".into(), s.mean);
        undefined.insert("faithfulness".into(), s.n_undefined);
    }
    if opts.metrics.contains(&Metric::Spearman) {
        let idx: Vec<usize> = (0..data.len()).collect();
        let s = mean_defined(&oracle_rank_agreement(model, data, &idx, opts.baseline)?);
        metrics.insert("spearman".into(), s.mean);
        undefined.insert("spearman".into(), s.n_undefined);
    }
    let mut pruning = Vec::new();
    if opts.metrics.contains(&Metric::Pruning) {
        for (i, a) in attrs.iter().enumerate() {
            let curve = pruning_curve_from(model, &data.samples[i].x, a, opts.baseline)?;
            if pruning.is_empty() {
                pruning = curve.iter().map(|p| PrunePoint { covered: 0.0, uncovered: 0.0, masked_value: 0.0, ..*p }).collect();
            }
            for (acc, p) in pruning.iter_mut().zip(&curve) {
                acc.covered += p.covered / data.len() as f64;
                acc.uncovered += p.uncovered / data.len() as f64;
                acc.masked_value += p.masked_value / data.len() as f64;
            }
        }
    }
    let samples = attrs
        .iter()
        .zip(&data.samples)
        .zip(faith)
        .map(|((a, s), f)| {
            let y = a.predicted_class;
            let p = a.aggregate(opts.level, y);
            let top = (0..p.len()).fold(0, |b, i| if p[i].abs() > p[b].abs() { i } else { b });
            SampleSummary {
                sample_id: s.id.clone(),
                predicted_class: y,
                total: a.total(y),
                top_player: top,
                faithfulness: f,
            }
        })
        .collect();
    Ok(EvalReport {
        schema_version: EVAL_SCHEMA_VERSION,
        n_samples: data.len(),
        level: opts.level,
        metrics,
        undefined,
        samples,
        pruning,
        provenance,
    })
}
