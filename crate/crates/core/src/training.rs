//! Two-stage optimization: contrastive pre-training of the backbone and
//! prediction head, then joint fine-tuning with the explainer losses.
//! Adam with optional global-norm clipping, one seeded RNG stream per run,
//! and checkpoints that capture everything needed to resume bitwise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::data::{NormStats, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::eval::validation_metric;
use crate::losses::{
    finetune_loss, pretrain_loss, Batch, ExplainerObjective, LossWeights, PretrainObjective, ShapRegTarget,
};
use crate::masking::{Baseline, Level};
use crate::model::{ModelConfig, ParamVars, ShapTstModel};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Prefix of environment variables that override config keys; nested keys
/// are joined with `__`, e.g. `SHAPTST__WEIGHTS__ALPHA_CE=0.3`.
pub const ENV_PREFIX: &str = "SHAPTST__";

pub const FINETUNE_HEADER: [&str; 9] = [
    "epoch",
    "step",
    "loss_total",
    "loss_w",
    "loss_gamma_T",
    "loss_gamma_D",
    "loss_gamma_C",
    "loss_reg",
    "val_metric",
];

pub const PRETRAIN_HEADER: [&str; 7] = ["epoch", "step", "loss_total", "loss_infonce", "loss_ce", "loss_kl", "val_metric"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    fn stream(self) -> u64 {
        match self {
            Stage::Pretrain => 1,
            Stage::Finetune => 2,
        }
    }

    pub fn header(self) -> &'static [&'static str] {
        match self {
            Stage::Pretrain => &PRETRAIN_HEADER,
            Stage::Finetune => &FINETUNE_HEADER,
        }
    }
}

/// Architecture hyperparameters; series shape and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub ff_mult: usize,
    pub conv_kernel: usize,
    pub lambda: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            ff_mult: m.ff_mult,
            conv_kernel: m.conv_kernel,
            lambda: 2,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, data: &TimeSeriesDataset) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            ff_mult: self.ff_mult,
            conv_kernel: self.conv_kernel,
            n_classes: data.n_classes,
            task: data.task,
            t_len: data.t_len,
            n_features: data.n_features,
            lambda: self.lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub levels: Vec<Level>,
    /// Explainer-loss subsets per level per sample.
    pub n_mc: usize,
    /// Bernoulli masking probability of the pre-training views.
    pub p_mask: f64,
    pub baseline: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            levels: Level::ALL.to_vec(),
            n_mc: 4,
            p_mask: 0.3,
            baseline: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub train_frac: f64,
    pub model: ArchConfig,
    pub weights: LossWeights,
    pub masking: MaskingConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reg: Option<ShapRegTarget>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Finetune,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 5.0,
            seed: 0,
            train_frac: 0.8,
            model: ArchConfig::default(),
            weights: LossWeights::default(),
            masking: MaskingConfig::default(),
            reg: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.stage == Stage::Pretrain && self.batch_size < 2 {
            return fail("pretraining needs batch_size >= 2");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0 && self.grad_clip >= 0.0) {
            return fail("epsilon must be positive and grad_clip non-negative");
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return fail("train_frac must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.masking.p_mask) {
            return fail("masking.p_mask must lie in [0, 1]");
        }
        if self.masking.levels.is_empty() {
            return fail("masking.levels must be nonempty");
        }
        self.weights.validate()
    }

    /// Parses TOML, applies `SHAPTST__*` overrides from `env`, validates.
    pub fn from_toml(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let cfg: TrainConfig = parse_toml_with_env(text, env)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn baseline(&self) -> Baseline {
        Baseline {
            value: self.masking.baseline,
        }
    }

    pub fn explainer_objective(&self) -> ExplainerObjective {
        ExplainerObjective {
            levels: self.masking.levels.clone(),
            n_mc: self.masking.n_mc,
            baseline: self.baseline(),
            reg: self.reg.clone(),
        }
    }

    pub fn pretrain_objective(&self) -> PretrainObjective {
        PretrainObjective {
            levels: self.masking.levels.clone(),
            p_mask: self.masking.p_mask,
            baseline: self.baseline(),
        }
    }
}

/// Deserializes TOML after applying `SHAPTST__A__B=value` overrides in key
/// order. Values are read as TOML literals, falling back to plain strings.
pub fn parse_toml_with_env<T: serde::de::DeserializeOwned>(
    text: &str,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<T> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    overrides.sort();
    for (key, raw) in overrides {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::Config(format!("malformed override `{key}`")));
        }
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(toml::Value::String(raw));
        let mut node = &mut table;
        for seg in &path[..path.len() - 1] {
            let entry = node
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}`: `{seg}` is not a section")))?;
        }
        node.insert(path[path.len() - 1].clone(), value);
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

/// Adaptive-moment optimizer state, one moment pair per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &ShapTstModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.parameters().iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; parameters without a gradient keep their value and moments.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &gi), (mi, vi)) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One logged optimizer step: `values` follow the stage header between
/// `step` and `val_metric`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: usize,
    pub values: Vec<f64>,
    pub val_metric: Option<f64>,
}

pub fn metrics_csv(stage: Stage, rows: &[MetricRow]) -> String {
    let mut out = stage.header().join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{}", r.epoch, r.step));
        for v in &r.values {
            out.push_str(&format!(",{v:?}"));
        }
        out.push(',');
        if let Some(m) = r.val_metric {
            out.push_str(&format!("{m:?}"));
        }
        out.push('\n');
    }
    out
}

/// Everything that evolves during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub adam: Adam,
    pub log: Vec<MetricRow>,
}

impl TrainState {
    pub fn new(stage: Stage, model: &ShapTstModel, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stage.stream());
        Self {
            stage,
            epoch: 0,
            step: 0,
            rng,
            adam: Adam::new(model),
            log: Vec::new(),
        }
    }

    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for e in 0..self.epoch {
            let rows: Vec<_> = self.log.iter().filter(|r| r.epoch == e).collect();
            out.push(rows.iter().map(|r| r.values[0]).sum::<f64>() / rows.len().max(1) as f64);
        }
        out
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Stop once this many epochs are complete (simulates an interruption).
    pub stop_after_epoch: Option<usize>,
    /// Called after each epoch, e.g. to write a checkpoint.
    pub on_epoch_end: Option<&'a mut dyn FnMut(&ShapTstModel, &TrainState) -> Result<()>>,
}

fn divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::Divergence { epoch, batch },
        other => other,
    }
}

type StepLoss<'f> = dyn Fn(&ShapTstModel, &mut Tape, &ParamVars, &Batch, &mut ChaCha8Rng) -> Result<(Var, Vec<Var>)> + 'f;

fn run(
    model: &mut ShapTstModel,
    train: &TimeSeriesDataset,
    val: Option<&TimeSeriesDataset>,
    cfg: &TrainConfig,
    state: &mut TrainState,
    opts: TrainOptions,
    loss: &StepLoss,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let TrainOptions {
        stop_after_epoch,
        mut on_epoch_end,
    } = opts;
    let last = stop_after_epoch.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    while state.epoch < last {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut state.rng);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            if state.stage == Stage::Pretrain && idx.len() < 2 {
                continue;
            }
            let batch = train.batch(idx)?;
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true)?;
            let (total, parts) = loss(model, &mut tape, &params, &batch, &mut state.rng).map_err(|e| divergence(e, epoch, bi))?;
            let mut values = vec![tape.value(total).item()];
            values.extend(parts.iter().map(|v| tape.value(*v).item()));
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            let mut grads = tape.backward(total).map_err(|e| divergence(e.into(), epoch, bi))?;
            let mut g: Vec<Option<Tensor>> = params.0.iter().map(|v| grads.take(*v)).collect();
            if g.iter().flatten().any(|t| !t.all_finite()) {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            clip_gradients(&mut g, cfg.grad_clip);
            state.adam.step(model.parameters_mut(), &g, cfg);
            state.log.push(MetricRow {
                epoch,
                step: state.step,
                values,
                val_metric: None,
            });
            state.step += 1;
        }
        if let Some(v) = val {
            let m = validation_metric(model, v)?;
            if let Some(r) = state.log.last_mut() {
                r.val_metric = Some(m);
            }
        }
        state.epoch += 1;
        if let Some(cb) = on_epoch_end.as_mut() {
            cb(model, state)?;
        }
    }
    Ok(())
}

/// Minimizes the supervised loss plus the per-level explainer losses and the
/// optional regularizer. Logged values: total, supervised, time, feature,
/// cell, regularizer.
pub fn finetune(
    model: &mut ShapTstModel,
    train: &TimeSeriesDataset,
    val: Option<&TimeSeriesDataset>,
    cfg: &TrainConfig,
    state: &mut TrainState,
    opts: TrainOptions,
) -> Result<()> {
    let objective = cfg.explainer_objective();
    let weights = cfg.weights.clone();
    let loss = move |m: &ShapTstModel, tape: &mut Tape, p: &ParamVars, b: &Batch, rng: &mut ChaCha8Rng| {
        let terms = finetune_loss(m, tape, p, b, &weights, &objective, rng)?;
        let zero = tape.constant(Tensor::scalar(0.0))?;
        let level = |l: Level| terms.gamma.iter().find(|(x, _)| *x == l).map_or(zero, |(_, v)| *v);
        let parts = vec![
            terms.supervised,
            level(Level::Time),
            level(Level::Feature),
            level(Level::Cell),
            terms.reg.unwrap_or(zero),
        ];
        Ok((terms.total, parts))
    };
    run(model, train, val, cfg, state, opts, &loss)
}

/// Minimizes the contrastive composite over two masked views. Logged values:
/// total, InfoNCE, weighted supervised term, weighted divergence term.
pub fn pretrain(
    model: &mut ShapTstModel,
    train: &TimeSeriesDataset,
    val: Option<&TimeSeriesDataset>,
    cfg: &TrainConfig,
    state: &mut TrainState,
    opts: TrainOptions,
) -> Result<()> {
    let objective = cfg.pretrain_objective();
    let weights = cfg.weights.clone();
    let loss = move |m: &ShapTstModel, tape: &mut Tape, p: &ParamVars, b: &Batch, rng: &mut ChaCha8Rng| {
        let t = pretrain_loss(m, tape, p, b, &weights, &objective, rng)?;
        let zero = tape.constant(Tensor::scalar(0.0))?;
        let ce = match t.ce {
            Some(v) => tape.scale(v, weights.alpha_ce)?,
            None => zero,
        };
        let kl = match t.kl {
            Some(v) => tape.scale(v, weights.alpha_kl)?,
            None => zero,
        };
        Ok((t.total, vec![t.infonce, ce, kl]))
    };
    run(model, train, val, cfg, state, opts, &loss)
}

/// Normalized train/test splits; statistics come from the training part only.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: TimeSeriesDataset,
    pub test: TimeSeriesDataset,
    pub norm: NormStats,
}

pub fn prepare(data: &TimeSeriesDataset, train_frac: f64, seed: u64) -> Result<Prepared> {
    let (train, test) = crate::data::split(data, train_frac, seed)?;
    let norm = train.fit_normalization()?;
    Ok(Prepared {
        train: train.normalized(&norm)?,
        test: test.normalized(&norm)?,
        norm,
    })
}

/// Optional pre-training followed by fine-tuning of one fresh model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<TrainConfig>,
    pub finetune: TrainConfig,
}

pub struct PipelineRun {
    pub model: ShapTstModel,
    pub pretrain_log: Vec<MetricRow>,
    pub finetune_log: Vec<MetricRow>,
}

/// Trains on `prep.train`, validating on `prep.test`. The model is
/// initialized from the fine-tuning seed so the two ablation arms start
/// from the same weights.
pub fn run_pipeline(cfg: &PipelineConfig, prep: &Prepared) -> Result<PipelineRun> {
    let mc = cfg.finetune.model.model_config(&prep.train);
    let mut model = ShapTstModel::new(mc, cfg.finetune.seed)?;
    let mut pretrain_log = Vec::new();
    if let Some(pc) = &cfg.pretrain {
        let mut state = TrainState::new(Stage::Pretrain, &model, pc.seed);
        pretrain(&mut model, &prep.train, Some(&prep.test), pc, &mut state, TrainOptions::default())?;
        pretrain_log = state.log;
    }
    let mut state = TrainState::new(Stage::Finetune, &model, cfg.finetune.seed);
    finetune(&mut model, &prep.train, Some(&prep.test), &cfg.finetune, &mut state, TrainOptions::default())?;
    Ok(PipelineRun {
        model,
        pretrain_log,
        finetune_log: state.log,
    })
}

// ---- checkpoints ----

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SHAPTST\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ShapTstModel,
    pub train: Option<TrainConfig>,
    pub norm: Option<NormStats>,
    pub state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    stage: Stage,
    epoch: usize,
    step: usize,
    adam_t: u64,
    rng: ChaCha8Rng,
    log: Vec<MetricRow>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    params: Vec<ParamMeta>,
    train: Option<TrainConfig>,
    norm: Option<NormStats>,
    state: Option<StateHeader>,
}

impl Checkpoint {
    /// Layout: magic, `u32` version, `u64` header length, JSON header, the
    /// parameters as little-endian `f64` in header order, then (when training
    /// state is present) all first moments and all second moments, and a
    /// trailing SHA-256 of every preceding byte.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.config().clone(),
            params: self
                .model
                .named_parameters()
                .map(|(n, t)| ParamMeta {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            train: self.train.clone(),
            norm: self.norm.clone(),
            state: self.state.as_ref().map(|s| StateHeader {
                stage: s.stage,
                epoch: s.epoch,
                step: s.step,
                adam_t: s.adam.t,
                rng: s.rng.clone(),
                log: s.log.clone(),
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for p in self.model.parameters() {
            push(p.data());
        }
        if let Some(s) = &self.state {
            s.adam.m.iter().for_each(|m| push(m));
            s.adam.v.iter().for_each(|v| push(v));
        }
        let digest = sha2::Digest::finalize(<sha2::Sha256 as sha2::Digest>::new_with_prefix(&out));
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let actual = sha2::Digest::finalize(<sha2::Sha256 as sha2::Digest>::new_with_prefix(body));
        if actual.as_slice() != digest {
            return Err(bad("checksum mismatch (corrupt file)"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut cursor = &body[20 + hlen..];
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if cursor.len() < n * 8 {
                return Err(bad("truncated parameter data"));
            }
            let (head, rest) = cursor.split_at(n * 8);
            cursor = rest;
            Ok(head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
        };
        let mut named = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let data = take(p.shape.iter().product())?;
            named.push((p.name.clone(), Tensor::new(p.shape.clone(), data)?));
        }
        let sizes: Vec<usize> = header.params.iter().map(|p| p.shape.iter().product()).collect();
        let model = ShapTstModel::from_parameters(header.model, named)?;
        let state = match header.state {
            Some(s) => {
                let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                Some(TrainState {
                    stage: s.stage,
                    epoch: s.epoch,
                    step: s.step,
                    rng: s.rng,
                    adam: Adam { t: s.adam_t, m, v },
                    log: s.log,
                })
            }
            None => None,
        };
        if !cursor.is_empty() {
            return Err(bad("trailing bytes after parameter data"));
        }
        Ok(Self {
            model,
            train: header.train,
            norm: header.norm,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&artifact::read(path)?)
    }
}

#[cfg(test)]
mod tests;
