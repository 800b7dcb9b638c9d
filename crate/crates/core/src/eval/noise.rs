//! Robustness of regularized and unregularized models to Gaussian noise on
//! one feature of the held-out data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::analysis::validation_metric;
use crate::data::{generate_synthetic, inject_noise, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{Selection, ShapRegTarget};
use crate::masking::Level;
use crate::training::{prepare, run_pipeline, PipelineConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSweepConfig {
    pub data: SyntheticSpec,
    pub pipeline: PipelineConfig,
    pub noisy_feature: usize,
    pub sigmas: Vec<f64>,
    /// Training seeds; each seeds the split, the initialization and both stages.
    pub seeds: Vec<u64>,
    /// Regularizer weight of the regularized arm (target 0 on `noisy_feature`).
    pub reg_weight: f64,
}

impl NoiseSweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.noisy_feature >= self.data.n_features {
            return Err(Error::Config(format!(
                "noisy_feature {} out of range for {} features",
                self.noisy_feature, self.data.n_features
            )));
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("sigmas must be a nonempty list of non-negative numbers".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if !(self.reg_weight > 0.0) {
            return Err(Error::Config("reg_weight must be positive".into()));
        }
        Ok(())
    }

    /// The pipeline of one arm at one seed.
    pub fn arm(&self, seed: u64, regularized: bool) -> PipelineConfig {
        let mut p = self.pipeline.clone();
        if let Some(pre) = p.pretrain.as_mut() {
            pre.seed = seed;
        }
        let ft = &mut p.finetune;
        ft.seed = seed;
        if regularized {
            ft.weights.alpha_shap_reg = self.reg_weight;
            ft.reg = Some(ShapRegTarget {
                selection: Selection::Features(vec![self.noisy_feature]),
                value: 0.0,
            });
        } else {
            ft.weights.alpha_shap_reg = 0.0;
            ft.reg = None;
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub seed: u64,
    pub regularized: bool,
    pub sigma: f64,
    pub metric: f64,
    /// Mean over test samples of |feature-level φ| of the noisy feature for the predicted class.
    pub mean_abs_phi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub sigma: f64,
    pub regularized_metric: f64,
    pub unregularized_metric: f64,
    pub regularized_abs_phi: f64,
    pub unregularized_abs_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepReport {
    pub noisy_feature: usize,
    pub rows: Vec<NoiseRow>,
    /// Seed-averaged rows, one per sigma.
    pub summary: Vec<NoiseSummary>,
}

impl NoiseSweepReport {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("seed,regularized,sigma,metric,mean_abs_phi\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:?},{:?},{:?}\n", r.seed, r.regularized, r.sigma, r.metric, r.mean_abs_phi));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("sigma,regularized_metric,unregularized_metric,regularized_abs_phi,unregularized_abs_phi\n");
        for s in &self.summary {
            out.push_str(&format!(
                "{:?},{:?},{:?},{:?},{:?}\n",
                s.sigma, s.regularized_metric, s.unregularized_metric, s.regularized_abs_phi, s.unregularized_abs_phi
            ));
        }
        out
    }
}

/// Each arm is trained once per seed on clean data; noise with standard
/// deviation σ (in normalized units) is then added to the noisy feature of
/// the normalized test split, with the same draws for both arms.
pub fn noise_sweep(cfg: &NoiseSweepConfig) -> Result<NoiseSweepReport> {
    cfg.validate()?;
    let data = generate_synthetic(&cfg.data)?;
    let baseline = cfg.pipeline.finetune.baseline();
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let prep = prepare(&data, cfg.pipeline.finetune.train_frac, seed)?;
        for regularized in [false, true] {
            let run = run_pipeline(&cfg.arm(seed, regularized), &prep)?;
            for (si, &sigma) in cfg.sigmas.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(si as u64 + 1);
                let noisy = inject_noise(&prep.test, cfg.noisy_feature, sigma, &mut rng)?;
                let metric = validation_metric(&run.model, &noisy)?;
                let attrs = run.model.explain_batch(&noisy.all()?.x, baseline)?;
                let mean_abs_phi = attrs
                    .iter()
                    .map(|a| a.aggregate(Level::Feature, a.predicted_class)[cfg.noisy_feature].abs())
                    .sum::<f64>()
                    / attrs.len() as f64;
                rows.push(NoiseRow {
                    seed,
                    regularized,
                    sigma,
                    metric,
                    mean_abs_phi,
                });
            }
        }
    }
    let summary = cfg
        .sigmas
        .iter()
        .map(|&sigma| {
            let mean = |reg: bool, f: fn(&NoiseRow) -> f64| {
                let sel: Vec<f64> = rows.iter().filter(|r| r.regularized == reg && r.sigma == sigma).map(f).collect();
                sel.iter().sum::<f64>() / sel.len() as f64
            };
            NoiseSummary {
                sigma,
                regularized_metric: mean(true, |r| r.metric),
                unregularized_metric: mean(false, |r| r.metric),
                regularized_abs_phi: mean(true, |r| r.mean_abs_phi),
                unregularized_abs_phi: mean(false, |r| r.mean_abs_phi),
            }
        })
        .collect();
    Ok(NoiseSweepReport {
        noisy_feature: cfg.noisy_feature,
        rows,
        summary,
    })
}
