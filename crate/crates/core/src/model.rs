//! The dual-head time-series transformer.
//!
//! Each time step is embedded by a 1-D convolution over all features, a
//! learnable classification slot is prepended, and a learnable positional
//! table is added. Pre-norm encoder blocks follow. The prediction head reads
//! the classification token; the explainer head maps every time-step token to
//! `D·K` attribution values, giving `phi: [T, D, K]` from the same pass.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{Baseline, Level, SubsetMask};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Inputs are processed in chunks of this many samples to bound tape memory.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub ff_mult: usize,
    pub conv_kernel: usize,
    pub n_classes: usize,
    pub task: Task,
    pub t_len: usize,
    pub n_features: usize,
    pub lambda: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            ff_mult: 4,
            conv_kernel: 3,
            n_classes: 2,
            task: Task::Classification,
            t_len: 16,
            n_features: 6,
            lambda: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.task == Task::Classification && self.n_classes < 2 {
            return fail(format!("classification needs n_classes >= 2, got {}", self.n_classes));
        }
        if self.t_len == 0 || self.n_features == 0 {
            return fail("t_len and n_features must be positive".into());
        }
        if self.lambda == 0 || self.t_len % self.lambda != 0 {
            return fail(format!("lambda {} must divide t_len {}", self.lambda, self.t_len));
        }
        if self.conv_kernel == 0 || self.conv_kernel % 2 == 0 {
            return fail(format!("conv_kernel must be odd for same padding, got {}", self.conv_kernel));
        }
        if self.ff_mult == 0 {
            return fail("ff_mult must be positive".into());
        }
        Ok(())
    }

    /// Width of both heads' class axis: `K` for classification, 1 for regression.
    pub fn n_outputs(&self) -> usize {
        match self.task {
            Task::Classification => self.n_classes,
            Task::Regression => 1,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.t_len + 1
    }

    pub fn n_parameters(&self) -> usize {
        param_layout(self).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    FanIn(usize),
    Zeros,
    Ones,
    Positional,
}

fn param_layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, ff) = (c.d_model, c.d_model * c.ff_mult);
    let k_out = c.n_outputs();
    let mut layout = vec![
        (
            "embed.conv.weight".to_string(),
            vec![c.conv_kernel, c.n_features, d],
            Init::FanIn(c.conv_kernel * c.n_features),
        ),
        ("embed.conv.bias".into(), vec![d], Init::Zeros),
        ("embed.pos".into(), vec![c.n_tokens(), d], Init::Positional),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        layout.extend([
            (p("ln1.gain"), vec![d], Init::Ones),
            (p("ln1.bias"), vec![d], Init::Zeros),
            (p("attn.q.weight"), vec![d, d], Init::FanIn(d)),
            (p("attn.q.bias"), vec![d], Init::Zeros),
            (p("attn.k.weight"), vec![d, d], Init::FanIn(d)),
            (p("attn.k.bias"), vec![d], Init::Zeros),
            (p("attn.v.weight"), vec![d, d], Init::FanIn(d)),
            (p("attn.v.bias"), vec![d], Init::Zeros),
            (p("attn.out.weight"), vec![d, d], Init::FanIn(d)),
            (p("attn.out.bias"), vec![d], Init::Zeros),
            (p("ln2.gain"), vec![d], Init::Ones),
            (p("ln2.bias"), vec![d], Init::Zeros),
            (p("ff.in.weight"), vec![d, ff], Init::FanIn(d)),
            (p("ff.in.bias"), vec![ff], Init::Zeros),
            (p("ff.out.weight"), vec![ff, d], Init::FanIn(ff)),
            (p("ff.out.bias"), vec![d], Init::Zeros),
        ]);
    }
    layout.extend([
        ("final_ln.gain".into(), vec![d], Init::Ones),
        ("final_ln.bias".into(), vec![d], Init::Zeros),
        ("head.pred.weight".into(), vec![d, k_out], Init::FanIn(d)),
        ("head.pred.bias".into(), vec![k_out], Init::Zeros),
        ("head.explain.weight".into(), vec![d, c.n_features * k_out], Init::FanIn(d)),
        ("head.explain.bias".into(), vec![c.n_features * k_out], Init::Zeros),
    ]);
    layout
}

const EMBED_PARAMS: usize = 3;
const LAYER_PARAMS: usize = 16;

/// Parameters of one model bound onto a tape.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

/// Tape handles for one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[B, K]` (or `[B, 1]` for regression).
    pub logits: Var,
    /// `[B, T, D, K]`, present when the explainer head was evaluated.
    pub phi: Option<Var>,
    /// `[B, d_model]` classification-token representation.
    pub cls: Var,
    /// `[B, T+1, d_model]` final token states.
    pub states: Var,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub logits: Vec<f64>,
    /// `[T, D, K]`
    pub phi: Tensor,
    /// `[T+1, d_model]`
    pub token_states: Tensor,
}

#[derive(Debug)]
pub struct ShapTstModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    passes: AtomicU64,
}

impl Clone for ShapTstModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.clone(),
            passes: AtomicU64::new(0),
        }
    }
}

impl ShapTstModel {
    /// Fresh model: fan-in scaled uniform weights, zero biases, unit norm
    /// gains, positional table from N(0, 0.02²).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = Normal::new(0.0, 0.02).expect("valid normal");
        let layout = param_layout(&config);
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape, init) in layout {
            let t = match init {
                Init::FanIn(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
                }
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
                Init::Positional => Tensor::from_fn(&shape, |_| pos.sample(&mut rng)),
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
            passes: AtomicU64::new(0),
        })
    }

    /// Rebuilds a model from named arrays, checking names and shapes against the layout.
    pub fn from_parameters(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut params = Vec::with_capacity(named.len());
        for ((want, shape, _), (name, t)) in layout.into_iter().zip(named) {
            if want != name || t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` {:?} does not match expected `{want}` {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t.with_grad(false));
        }
        Ok(Self {
            config,
            names,
            params,
            passes: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&self.params[i])
    }

    /// Number of per-sample forward passes run so far (inference and training).
    pub fn forward_passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_pass_counter(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    fn count(&self, samples: usize) {
        self.passes.fetch_add(samples as u64, Ordering::Relaxed);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<ParamVars> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone().with_grad(trainable)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(ParamVars(vars))
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let (t, d) = (self.config.t_len, self.config.n_features);
        match *shape {
            [b, ti, di] if ti == t && di == d => Ok(b),
            _ => Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: vec![t, d],
            })),
        }
    }

    /// Records one batched pass over `x: [B, T, D]`.
    pub fn forward_vars(&self, tape: &mut Tape, p: &ParamVars, x: Var, with_explainer: bool) -> Result<ForwardVars> {
        let c = &self.config;
        let batch = self.check_input(tape.shape(x))?;
        self.count(batch);
        let (t_len, d, heads) = (c.t_len, c.d_model, c.n_heads);
        let dh = d / heads;
        let tokens = c.n_tokens();
        let w = &p.0;

        let h = tape.conv1d(x, w[0], 1, c.conv_kernel / 2)?;
        let h = tape.add(h, w[1])?;
        let slot = tape.constant(Tensor::zeros(&[batch, 1, d]))?;
        let h = tape.concat(&[slot, h], 1)?;
        let mut h = tape.embedding_add(h, w[2])?;

        for l in 0..c.n_layers {
            let lw = &w[EMBED_PARAMS + l * LAYER_PARAMS..EMBED_PARAMS + (l + 1) * LAYER_PARAMS];
            let a = tape.layer_norm(h, lw[0], lw[1], LAYER_NORM_EPS)?;
            let mut split = |wi: Var, bi: Var| -> Result<Var> {
                let y = tape.matmul(a, wi)?;
                let y = tape.add(y, bi)?;
                let y = tape.reshape(y, &[batch, tokens, heads, dh])?;
                let y = tape.permute(y, &[0, 2, 1, 3])?;
                Ok(tape.reshape(y, &[batch * heads, tokens, dh])?)
            };
            let q = split(lw[2], lw[3])?;
            let k = split(lw[4], lw[5])?;
            let v = split(lw[6], lw[7])?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.softmax(scores, 2)?;
            let ctx = tape.matmul(attn, v)?;
            let ctx = tape.reshape(ctx, &[batch, heads, tokens, dh])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[batch, tokens, d])?;
            let o = tape.matmul(ctx, lw[8])?;
            let o = tape.add(o, lw[9])?;
            h = tape.add(h, o)?;

            let f = tape.layer_norm(h, lw[10], lw[11], LAYER_NORM_EPS)?;
            let f = tape.matmul(f, lw[12])?;
            let f = tape.add(f, lw[13])?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, lw[14])?;
            let f = tape.add(f, lw[15])?;
            h = tape.add(h, f)?;
        }

        let tail = EMBED_PARAMS + c.n_layers * LAYER_PARAMS;
        let states = tape.layer_norm(h, w[tail], w[tail + 1], LAYER_NORM_EPS)?;
        let cls = tape.narrow(states, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[batch, d])?;
        let logits = tape.matmul(cls, w[tail + 2])?;
        let logits = tape.add(logits, w[tail + 3])?;

        let phi = if with_explainer {
            let k_out = c.n_outputs();
            let steps = tape.narrow(states, 1, 1, t_len)?;
            let phi = tape.matmul(steps, w[tail + 4])?;
            let phi = tape.add(phi, w[tail + 5])?;
            Some(tape.reshape(phi, &[batch, t_len, c.n_features, k_out])?)
        } else {
            None
        };
        Ok(ForwardVars {
            logits,
            phi,
            cls,
            states,
        })
    }

    /// Batched inference over `x: [B, T, D]`: `(logits [B, K], phi [B, T, D, K], states)`.
    pub fn forward_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let out = self.forward_vars(&mut tape, &p, xv, true)?;
        let phi = out.phi.expect("explainer evaluated");
        Ok((
            tape.value(out.logits).clone(),
            tape.value(phi).clone(),
            tape.value(out.states).clone(),
        ))
    }

    /// One pass over a single `[T, D]` series.
    pub fn forward(&self, x: &Tensor) -> Result<SampleOutput> {
        let batched = x.reshape(&[1, x.shape().first().copied().unwrap_or(0), x.shape().get(1).copied().unwrap_or(0)])?;
        let (logits, phi, states) = self.forward_batch(&batched)?;
        Ok(SampleOutput {
            logits: logits.into_data(),
            phi: phi.index_first(0),
            token_states: states.index_first(0),
        })
    }

    /// Value-function outputs for each input in `x: [B, T, D]`: class
    /// probabilities `[B, K]` for classification, the raw output `[B, 1]` for
    /// regression. Skips the explainer head.
    pub fn values_batch(&self, x: &Tensor) -> Result<Tensor> {
        let batch = self.check_input(x.shape())?;
        let k_out = self.config.n_outputs();
        let per = self.config.t_len * self.config.n_features;
        let mut out = Vec::with_capacity(batch * k_out);
        for start in (0..batch).step_by(EVAL_CHUNK) {
            let n = EVAL_CHUNK.min(batch - start);
            let chunk = Tensor::new(
                vec![n, self.config.t_len, self.config.n_features],
                x.data()[start * per..(start + n) * per].to_vec(),
            )?;
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, false)?;
            let xv = tape.constant(chunk)?;
            let f = self.forward_vars(&mut tape, &p, xv, false)?;
            let v = match self.config.task {
                Task::Classification => tape.softmax(f.logits, 1)?,
                Task::Regression => f.logits,
            };
            out.extend_from_slice(tape.value(v).data());
        }
        Ok(Tensor::new(vec![batch, k_out], out)?)
    }

    /// Softmax of the logits of a single `[T, D]` series.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>> {
        if self.config.task != Task::Classification {
            return Err(Error::InvalidArgument("predict_proba is only defined for classification".into()));
        }
        let out = self.values_batch(&stack_one(x)?)?;
        Ok(out.into_data())
    }

    /// Scalar prediction for regression models, probability vector argmax otherwise.
    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let v = self.values_batch(&stack_one(x)?)?.into_data();
        Ok(match self.config.task {
            Task::Classification => Prediction::Class(argmax(&v)),
            Task::Regression => Prediction::Value(v[0]),
        })
    }

    /// `v_{x,y}(S)`: probability of class `y` (or the regression output) on `x` perturbed by `mask`.
    pub fn value_function(&self, x: &Tensor, y: usize, mask: &SubsetMask, baseline: Baseline) -> Result<f64> {
        let masked = mask.apply(x, baseline)?;
        let v = self.values_batch(&stack_one(&masked)?)?;
        self.pick(v.data(), y)
    }

    fn pick(&self, row: &[f64], y: usize) -> Result<f64> {
        match self.config.task {
            Task::Regression => Ok(row[0]),
            Task::Classification => row
                .get(y)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("class {y} out of range"))),
        }
    }

    /// Value-function outputs for many masks of one series, batched.
    pub fn coalition_values(&self, x: &Tensor, y: usize, masks: &[SubsetMask], baseline: Baseline) -> Result<Vec<f64>> {
        if masks.is_empty() {
            return Ok(Vec::new());
        }
        let masked = masks
            .iter()
            .map(|m| m.apply(x, baseline))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = masked.iter().collect();
        let v = self.values_batch(&Tensor::stack(&refs)?)?;
        let k = self.config.n_outputs();
        v.data().chunks(k).map(|row| self.pick(row, y)).collect()
    }

    /// Single-pass explanation with the efficiency-gap correction: one
    /// explainer pass plus the full-support and empty-support value passes.
    pub fn explain(&self, x: &Tensor, baseline: Baseline) -> Result<ShapleyAttribution> {
        Ok(self.explain_batch(&stack_one(x)?, baseline)?.remove(0))
    }

    /// [`explain`](Self::explain) for `x: [B, T, D]`, three passes per sample.
    pub fn explain_batch(&self, x: &Tensor, baseline: Baseline) -> Result<Vec<ShapleyAttribution>> {
        let batch = self.check_input(x.shape())?;
        let c = &self.config;
        let (logits, phi, _) = self.forward_batch(x)?;
        let v_full = self.values_batch(x)?;
        let empty = Tensor::full(x.shape(), baseline.value);
        let v_empty = self.values_batch(&empty)?;
        let k = c.n_outputs();
        let cells = c.t_len * c.n_features;
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let raw = phi.index_first(b);
            let full = v_full.data()[b * k..(b + 1) * k].to_vec();
            let none = v_empty.data()[b * k..(b + 1) * k].to_vec();
            let lg = &logits.data()[b * k..(b + 1) * k];
            let predicted = match c.task {
                Task::Classification => argmax(lg),
                Task::Regression => 0,
            };
            out.push(ShapleyAttribution::corrected(raw, full, none, predicted, c.lambda, cells)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Class(usize),
    Value(f64),
}

pub(crate) fn stack_one(x: &Tensor) -> Result<Tensor> {
    match *x.shape() {
        [t, d] => Ok(x.reshape(&[1, t, d])?),
        _ => Err(Error::InvalidArgument(format!("expected a [T, D] series, got {:?}", x.shape()))),
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-cell, per-class attribution of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyAttribution {
    /// `[T, D, K]`; efficiency-corrected when produced by `explain`.
    pub phi: Tensor,
    /// Explainer output before correction.
    pub raw: Tensor,
    pub v_full: Vec<f64>,
    pub v_empty: Vec<f64>,
    pub predicted_class: usize,
    pub lambda: usize,
}

impl ShapleyAttribution {
    /// Shifts every cell of class `y` by `(v_full[y] - v_empty[y] - sum(raw[.., .., y])) / (T·D)`.
    pub fn corrected(
        raw: Tensor,
        v_full: Vec<f64>,
        v_empty: Vec<f64>,
        predicted_class: usize,
        lambda: usize,
        cells: usize,
    ) -> Result<Self> {
        let k = v_full.len();
        if raw.numel() != cells * k || v_empty.len() != k {
            return Err(Error::InvalidArgument("attribution dimensions disagree".into()));
        }
        let mut totals = vec![0.0; k];
        for (i, v) in raw.data().iter().enumerate() {
            totals[i % k] += v;
        }
        let shift: Vec<f64> = (0..k)
            .map(|y| (v_full[y] - v_empty[y] - totals[y]) / cells as f64)
            .collect();
        let mut phi = raw.clone();
        for (i, v) in phi.data_mut().iter_mut().enumerate() {
            *v += shift[i % k];
        }
        Ok(Self {
            phi,
            raw,
            v_full,
            v_empty,
            predicted_class,
            lambda,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.phi.shape();
        (s[0], s[1], s[2])
    }

    /// `[T, D]` slice for class `y`, row-major.
    pub fn class_phi(&self, y: usize) -> Vec<f64> {
        let (_, _, k) = self.dims();
        self.phi.data().iter().skip(y).step_by(k).copied().collect()
    }

    pub fn total(&self, y: usize) -> f64 {
        self.class_phi(y).iter().sum()
    }

    /// Sums class-`y` cells into the players of `level`: time blocks, features
    /// or `(block, feature)` pairs.
    pub fn aggregate(&self, level: Level, y: usize) -> Vec<f64> {
        let (t, d, _) = self.dims();
        aggregate_cells(&self.class_phi(y), t, d, self.lambda, level)
    }
}

/// Sums a row-major `[T, D]` cell map into the players of `level`.
pub fn aggregate_cells(cells: &[f64], t: usize, d: usize, lambda: usize, level: Level) -> Vec<f64> {
    let mut out = vec![0.0; level.n_players(t, d, lambda)];
    for ti in 0..t {
        for j in 0..d {
            let v = cells[ti * d + j];
            match level {
                Level::Time => out[ti / lambda] += v,
                Level::Feature => out[j] += v,
                Level::Cell => out[(ti / lambda) * d + j] += v,
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            ff_mult: 2,
            conv_kernel: 3,
            n_classes: 3,
            task: Task::Classification,
            t_len: 4,
            n_features: 3,
            lambda: 2,
        }
    }

    fn input(seed: u64, c: &ModelConfig) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[c.t_len, c.n_features], |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn output_shapes() {
        let c = small();
        let m = ShapTstModel::new(c.clone(), 1).unwrap();
        let out = m.forward(&input(2, &c)).unwrap();
        assert_eq!(out.logits.len(), 3);
        assert_eq!(out.phi.shape(), &[4, 3, 3]);
        assert_eq!(out.token_states.shape(), &[5, 8]);

        let reg = ModelConfig {
            task: Task::Regression,
            ..c.clone()
        };
        let m = ShapTstModel::new(reg, 1).unwrap();
        let out = m.forward(&input(2, &c)).unwrap();
        assert_eq!(out.logits.len(), 1);
        assert_eq!(out.phi.shape(), &[4, 3, 1]);
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            d_model: 9,
            ..small()
        };
        assert!(ShapTstModel::new(bad, 0).is_err());
        let bad = ModelConfig {
            n_classes: 1,
            ..small()
        };
        assert!(ShapTstModel::new(bad, 0).is_err());
        let bad = ModelConfig { lambda: 3, ..small() };
        assert!(ShapTstModel::new(bad, 0).is_err());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = ShapTstModel::new(small(), 1).unwrap();
        assert!(m.forward(&Tensor::zeros(&[5, 3])).is_err());
    }

    #[test]
    fn fresh_models_distinguish_inputs() {
        let c = small();
        for seed in 0..5 {
            let m = ShapTstModel::new(c.clone(), seed).unwrap();
            let a = m.forward(&input(10, &c)).unwrap().logits;
            let b = m.forward(&input(11, &c)).unwrap().logits;
            assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
        }
    }

    #[test]
    fn feature_permutation_with_permuted_kernels_keeps_logits() {
        let c = small();
        let m = ShapTstModel::new(c.clone(), 4).unwrap();
        let x = input(5, &c);
        let perm = [2, 0, 1];
        let px = Tensor::from_fn(x.shape(), |i| {
            let (t, j) = (i / 3, i % 3);
            x.get(&[t, perm[j]])
        });
        let mut twin = m.clone();
        let w = m.parameter("embed.conv.weight").unwrap().clone();
        let tw = twin.parameter_mut("embed.conv.weight").unwrap();
        let (k, d, h) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        for i in 0..k {
            for j in 0..d {
                for o in 0..h {
                    tw.set(&[i, j, o], w.get(&[i, perm[j], o]));
                }
            }
        }
        let a = m.forward(&x).unwrap().logits;
        let b = twin.forward(&px).unwrap().logits;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn predict_proba_contract() {
        let c = small();
        let mut m = ShapTstModel::new(c.clone(), 6).unwrap();
        let x = input(7, &c);
        let p = m.predict_proba(&x).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let logits = m.forward(&x).unwrap().logits;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (pi, l) in p.iter().zip(&logits) {
            assert_eq!(*pi, (l - max).exp() / z);
        }
        for name in ["head.pred.weight", "head.pred.bias"] {
            m.parameter_mut(name).unwrap().data_mut().fill(0.0);
        }
        for pi in m.predict_proba(&x).unwrap() {
            assert!((pi - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn value_function_contract() {
        let c = small();
        let m = ShapTstModel::new(c.clone(), 8).unwrap();
        let x = input(9, &c);
        let b = Baseline::default();
        let full = SubsetMask::full(Level::Feature, 4, 3, 2).unwrap();
        let p = m.predict_proba(&x).unwrap();
        for y in 0..3 {
            assert_eq!(m.value_function(&x, y, &full, b).unwrap(), p[y]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for level in Level::ALL {
            let mask = crate::masking::sample_subset(level, 4, 3, 2, &mut rng).unwrap();
            let v = m.value_function(&x, 1, &mask, b).unwrap();
            assert!((0.0..=1.0).contains(&v));
        }

        let mut zero = m.clone();
        for p in zero.parameters_mut() {
            p.data_mut().fill(0.0);
        }
        // all-zero weights also zero the layer-norm gains, so logits are 0
        for level in Level::ALL {
            let mask = crate::masking::sample_subset(level, 4, 3, 2, &mut rng).unwrap();
            assert!((zero.value_function(&x, 0, &mask, b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(m.value_function(&x, 3, &full, b).is_err());
    }

    #[test]
    fn explain_satisfies_efficiency_and_counts_three_passes() {
        let c = small();
        let m = ShapTstModel::new(c.clone(), 12).unwrap();
        let x = input(13, &c);
        m.reset_pass_counter();
        let e = m.explain(&x, Baseline::default()).unwrap();
        assert_eq!(m.forward_passes(), 3);
        for y in 0..3 {
            let gap = e.v_full[y] - e.v_empty[y];
            assert!((e.total(y) - gap).abs() < 1e-9);
        }
        let p = m.predict_proba(&x).unwrap();
        assert_eq!(e.v_full, p);
    }

    #[test]
    fn correction_examples() {
        // raw already efficient: unchanged
        let raw = Tensor::new(vec![2, 1, 1], vec![0.25, 0.5]).unwrap();
        let a = ShapleyAttribution::corrected(raw.clone(), vec![1.0], vec![0.25], 0, 1, 2).unwrap();
        assert_eq!(a.phi, raw);
        // zero raw: uniform split of the gap
        let a = ShapleyAttribution::corrected(Tensor::zeros(&[2, 2, 1]), vec![0.9], vec![0.1], 0, 1, 4).unwrap();
        assert!(a.phi.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn aggregation_levels() {
        let cells: Vec<f64> = (0..8).map(f64::from).collect(); // T=4, D=2
        assert_eq!(aggregate_cells(&cells, 4, 2, 2, Level::Time), vec![6.0, 22.0]);
        assert_eq!(aggregate_cells(&cells, 4, 2, 2, Level::Feature), vec![12.0, 16.0]);
        assert_eq!(aggregate_cells(&cells, 4, 2, 2, Level::Cell), vec![2.0, 4.0, 10.0, 12.0]);
    }

    #[test]
    fn parameter_count_depends_only_on_config() {
        let c = small();
        let a = ShapTstModel::new(c.clone(), 1).unwrap();
        let b = ShapTstModel::new(c.clone(), 2).unwrap();
        let count = |m: &ShapTstModel| m.parameters().iter().map(Tensor::numel).sum::<usize>();
        assert_eq!(count(&a), count(&b));
        assert_eq!(count(&a), c.n_parameters());
    }
}
