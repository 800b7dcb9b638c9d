//! Training objectives: the amortized Shapley regression loss, the
//! fine-tuning total, symmetric InfoNCE and the contrastive pre-training
//! composite.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{apply_bernoulli, bernoulli_mask, sample_subset, Baseline, Level, SubsetMask};
use crate::model::{ForwardVars, ParamVars, ShapTstModel, Task};
use crate::tensor::{Tape, Tensor, Var};

/// Lower clamp for the second argument of [`kl_div`].
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_ce: f64,
    pub alpha_kl: f64,
    pub alpha_shap_reg: f64,
    pub infonce_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_ce: 1.0,
            alpha_kl: 0.5,
            alpha_shap_reg: 0.0,
            infonce_temperature: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.alpha_ce, self.alpha_kl, self.alpha_shap_reg];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.infonce_temperature.is_finite() && self.infonce_temperature > 0.0) {
            return Err(Error::Config("infonce_temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Which explainer outputs the regularizer pulls toward the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "indices", rename_all = "snake_case")]
pub enum Selection {
    Features(Vec<usize>),
    TimeBlocks(Vec<usize>),
    /// `(time block, feature)` pairs.
    Cells(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapRegTarget {
    pub selection: Selection,
    /// Target value for every selected cell and class.
    #[serde(default)]
    pub value: f64,
}

impl ShapRegTarget {
    pub fn zeros(selection: Selection) -> Self {
        Self { selection, value: 0.0 }
    }

    /// Row-major `[T, D]` indicator of the selected cells.
    pub fn cell_mask(&self, t: usize, d: usize, lambda: usize) -> Result<Vec<f64>> {
        let blocks = t / lambda;
        let mut m = vec![0.0; t * d];
        let bad = |what: &str, i: usize| Err(Error::InvalidArgument(format!("regularizer {what} index {i} out of range")));
        match &self.selection {
            Selection::Features(js) => {
                for &j in js {
                    if j >= d {
                        return bad("feature", j);
                    }
                    (0..t).for_each(|ti| m[ti * d + j] = 1.0);
                }
            }
            Selection::TimeBlocks(bs) => {
                for &b in bs {
                    if b >= blocks {
                        return bad("time block", b);
                    }
                    for ti in b * lambda..(b + 1) * lambda {
                        (0..d).for_each(|j| m[ti * d + j] = 1.0);
                    }
                }
            }
            Selection::Cells(cs) => {
                for &(b, j) in cs {
                    if b >= blocks {
                        return bad("time block", b);
                    }
                    if j >= d {
                        return bad("feature", j);
                    }
                    (b * lambda..(b + 1) * lambda).for_each(|ti| m[ti * d + j] = 1.0);
                }
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A minibatch: `x: [B, T, D]` plus one target per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub targets: Targets,
}

impl Batch {
    pub fn new(x: Tensor, targets: Targets) -> Result<Self> {
        if x.rank() != 3 || x.shape()[0] != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "batch input {:?} does not match {} targets",
                x.shape(),
                targets.len()
            )));
        }
        Ok(Self { x, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn sample(&self, i: usize) -> Tensor {
        self.x.index_first(i)
    }
}

/// Explainer-loss settings shared by fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainerObjective {
    pub levels: Vec<Level>,
    /// Subsets per level per sample; 0 disables the explainer terms.
    pub n_mc: usize,
    pub baseline: Baseline,
    pub reg: Option<ShapRegTarget>,
}

impl Default for ExplainerObjective {
    fn default() -> Self {
        Self {
            levels: Level::ALL.to_vec(),
            n_mc: 4,
            baseline: Baseline::default(),
            reg: None,
        }
    }
}

/// Monte-Carlo draws for one level: regression targets `v(S) - v(∅)` and the
/// linear maps that sum `phi` over each kept support.
#[derive(Debug, Clone)]
pub struct ShapleyDraws {
    pub level: Level,
    /// `[B, M, T·D·K]`; row `(b, m)` is `kept_cells ⊗ onehot(y)`.
    pub coeff: Tensor,
    /// `[B, M, 1]`
    pub target: Tensor,
}

/// Draws `n_mc` (class, subset) pairs per sample and level and evaluates the
/// detached value targets in one batched pass.
pub fn draw_shapley_targets(
    model: &ShapTstModel,
    x: &Tensor,
    levels: &[Level],
    n_mc: usize,
    baseline: Baseline,
    rng: &mut impl Rng,
) -> Result<Vec<ShapleyDraws>> {
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be at least 1".into()));
    }
    let c = model.config();
    let (t, d, lambda) = (c.t_len, c.n_features, c.lambda);
    let k = c.n_outputs();
    let batch = x.shape()[0];
    let cells = t * d;

    let mut inputs = Vec::with_capacity(batch * levels.len() * n_mc);
    let mut picks = Vec::with_capacity(inputs.capacity());
    for b in 0..batch {
        let xb = x.index_first(b);
        for &level in levels {
            for _ in 0..n_mc {
                let y = if c.task == Task::Classification { rng.random_range(0..k) } else { 0 };
                let mask = sample_subset(level, t, d, lambda, rng)?;
                inputs.push(mask.apply(&xb, baseline)?);
                picks.push((y, mask));
            }
        }
    }
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let v_s = model.values_batch(&Tensor::stack(&refs)?)?;
    let v_empty = model.values_batch(&Tensor::full(&[1, t, d], baseline.value))?;

    let m_total = levels.len() * n_mc;
    let mut out = Vec::with_capacity(levels.len());
    for (li, &level) in levels.iter().enumerate() {
        let mut coeff = vec![0.0; batch * n_mc * cells * k];
        let mut target = vec![0.0; batch * n_mc];
        for b in 0..batch {
            for m in 0..n_mc {
                let flat = b * m_total + li * n_mc + m;
                let (y, mask) = &picks[flat];
                let row = b * n_mc + m;
                target[row] = v_s.data()[flat * k + y] - v_empty.data()[*y];
                let dst = &mut coeff[row * cells * k..(row + 1) * cells * k];
                for (cell, kept) in mask.kept_cells().into_iter().enumerate() {
                    dst[cell * k + y] = kept;
                }
            }
        }
        out.push(ShapleyDraws {
            level,
            coeff: Tensor::new(vec![batch, n_mc, cells * k], coeff)?,
            target: Tensor::new(vec![batch, n_mc, 1], target)?,
        });
    }
    Ok(out)
}

/// Mean over draws of `(target - Sᵀφ)²` for `phi: [B, T, D, K]`.
pub fn shapley_regression_loss(tape: &mut Tape, phi: Var, draws: &ShapleyDraws) -> Result<Var> {
    let b = tape.shape(phi)[0];
    let n: usize = tape.shape(phi)[1..].iter().product();
    let flat = tape.reshape(phi, &[b, n, 1])?;
    let coeff = tape.constant(draws.coeff.clone())?;
    let target = tape.constant(draws.target.clone())?;
    let pred = tape.matmul(coeff, flat)?;
    let r = tape.sub(target, pred)?;
    let sq = tape.square(r)?;
    Ok(tape.mean(sq)?)
}

/// Explainer loss averaged across `levels`' independent draws; returns the
/// total and per-level values in `levels` order.
pub fn fastshap_loss(
    model: &ShapTstModel,
    x: &Tensor,
    levels: &[Level],
    n_mc: usize,
    baseline: Baseline,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<f64>)> {
    let draws = draw_shapley_targets(model, x, levels, n_mc, baseline, rng)?;
    let (_, phi, _) = model.forward_batch(x)?;
    let mut tape = Tape::new();
    let phi = tape.constant(phi)?;
    let mut per = Vec::with_capacity(draws.len());
    for d in &draws {
        let l = shapley_regression_loss(&mut tape, phi, d)?;
        per.push(tape.value(l).item());
    }
    Ok((per.iter().sum(), per))
}

/// Mean cross-entropy (classification) or mean squared error (regression).
pub fn supervised_loss(tape: &mut Tape, logits: Var, targets: &Targets) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (b, k) = (shape[0], shape[1]);
    match targets {
        Targets::Classes(ys) => {
            let mut onehot = vec![0.0; b * k];
            for (i, &y) in ys.iter().enumerate() {
                if y >= k {
                    return Err(Error::InvalidArgument(format!("label {y} out of range for {k} classes")));
                }
                onehot[i * k + y] = 1.0;
            }
            let onehot = tape.constant(Tensor::new(shape, onehot)?)?;
            let ls = tape.log_softmax(logits, 1)?;
            let picked = tape.mul(ls, onehot)?;
            let s = tape.sum(picked)?;
            Ok(tape.scale(s, -1.0 / b as f64)?)
        }
        Targets::Values(vs) => {
            if k != 1 {
                return Err(Error::InvalidArgument("regression targets need a single output".into()));
            }
            let t = tape.constant(Tensor::new(vec![b, 1], vs.clone())?)?;
            let r = tape.sub(logits, t)?;
            let sq = tape.square(r)?;
            Ok(tape.mean(sq)?)
        }
    }
}

/// `alpha · mean_b Σ_{selected cells, classes} (φ - target)²`.
pub fn shap_regularizer(tape: &mut Tape, phi: Var, reg: &ShapRegTarget, lambda: usize, alpha: f64) -> Result<Var> {
    let shape = tape.shape(phi).to_vec();
    let (b, t, d, k) = (shape[0], shape[1], shape[2], shape[3]);
    let cells = reg.cell_mask(t, d, lambda)?;
    let sel = Tensor::from_fn(&[t, d, k], |i| cells[i / k]);
    let target = tape.constant(sel.map(|s| s * reg.value))?;
    let sel = tape.constant(sel)?;
    let masked = tape.mul(phi, sel)?;
    let diff = tape.sub(masked, target)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, alpha / b as f64)?)
}

/// Handles of every fine-tuning term on a tape.
#[derive(Debug, Clone)]
pub struct FinetuneTerms {
    pub total: Var,
    pub supervised: Var,
    /// One entry per enabled level, in objective order.
    pub gamma: Vec<(Level, Var)>,
    pub reg: Option<Var>,
}

/// Scalar values of [`FinetuneTerms`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct FinetuneBreakdown {
    pub total: f64,
    pub supervised: f64,
    pub gamma_time: f64,
    pub gamma_feature: f64,
    pub gamma_cell: f64,
    pub reg: f64,
}

impl FinetuneTerms {
    pub fn values(&self, tape: &Tape) -> FinetuneBreakdown {
        let mut out = FinetuneBreakdown {
            total: tape.value(self.total).item(),
            supervised: tape.value(self.supervised).item(),
            reg: self.reg.map_or(0.0, |r| tape.value(r).item()),
            ..Default::default()
        };
        for &(level, v) in &self.gamma {
            let x = tape.value(v).item();
            match level {
                Level::Time => out.gamma_time += x,
                Level::Feature => out.gamma_feature += x,
                Level::Cell => out.gamma_cell += x,
            }
        }
        out
    }
}

/// Supervised loss plus one explainer loss per level plus the optional
/// regularizer, recorded against `params`.
pub fn finetune_loss(
    model: &ShapTstModel,
    tape: &mut Tape,
    params: &ParamVars,
    batch: &Batch,
    weights: &LossWeights,
    objective: &ExplainerObjective,
    rng: &mut impl Rng,
) -> Result<FinetuneTerms> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let explain = objective.n_mc > 0 && !objective.levels.is_empty();
    let use_reg = weights.alpha_shap_reg > 0.0 && objective.reg.is_some();
    let draws = if explain {
        draw_shapley_targets(model, &batch.x, &objective.levels, objective.n_mc, objective.baseline, rng)?
    } else {
        Vec::new()
    };
    let x = tape.constant(batch.x.clone())?;
    let f: ForwardVars = model.forward_vars(tape, params, x, explain || use_reg)?;
    let supervised = supervised_loss(tape, f.logits, &batch.targets)?;
    let mut total = supervised;
    let mut gamma = Vec::with_capacity(draws.len());
    for d in &draws {
        let l = shapley_regression_loss(tape, f.phi.expect("explainer evaluated"), d)?;
        total = tape.add(total, l)?;
        gamma.push((d.level, l));
    }
    let reg = match (&objective.reg, use_reg) {
        (Some(target), true) => {
            let phi = f.phi.expect("explainer evaluated");
            let r = shap_regularizer(tape, phi, target, model.config().lambda, weights.alpha_shap_reg)?;
            total = tape.add(total, r)?;
            Some(r)
        }
        _ => None,
    };
    Ok(FinetuneTerms {
        total,
        supervised,
        gamma,
        reg,
    })
}

/// Symmetric InfoNCE over cosine similarities scaled by `1/tau`.
pub fn info_nce(tape: &mut Tape, z1: Var, z2: Var, tau: f64) -> Result<Var> {
    let n1 = unit_rows(tape, z1)?;
    let n2 = unit_rows(tape, z2)?;
    let n2t = tape.transpose(n2)?;
    let sim = tape.matmul(n1, n2t)?;
    let sim = tape.scale(sim, 1.0 / tau)?;
    let b = tape.shape(sim)[0];
    let eye = tape.constant(Tensor::from_fn(&[b, b], |i| if i / b == i % b { 1.0 } else { 0.0 }))?;
    let rows = tape.log_softmax(sim, 1)?;
    let cols = tape.log_softmax(sim, 0)?;
    let both = tape.add(rows, cols)?;
    let diag = tape.mul(both, eye)?;
    let s = tape.sum(diag)?;
    Ok(tape.scale(s, -0.5 / b as f64)?)
}

fn unit_rows(tape: &mut Tape, z: Var) -> Result<Var> {
    let v = tape.value(z);
    let d = v.shape()[1];
    if v.data().chunks(d).any(|r| r.iter().all(|&x| x == 0.0)) {
        return Err(Error::InvalidArgument("info_nce: zero-norm representation".into()));
    }
    let sq = tape.square(z)?;
    let norm2 = tape.sum_axis(sq, 1, true)?;
    let norm = tape.sqrt(norm2)?;
    Ok(tape.div(z, norm)?)
}

/// Direct `Σ p log(p / max(q, 1e-12))`, skipping `p = 0` terms.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    let valid = |v: &[f64]| {
        v.iter().all(|x| x.is_finite() && *x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-9
    };
    if p.len() != q.len() || p.is_empty() || !valid(p) || !valid(q) {
        return Err(Error::InvalidArgument("kl_div needs two distributions of equal length".into()));
    }
    Ok(p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(KL_FLOOR)).ln())
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainObjective {
    pub levels: Vec<Level>,
    pub p_mask: f64,
    pub baseline: Baseline,
}

impl Default for PretrainObjective {
    fn default() -> Self {
        Self {
            levels: Level::ALL.to_vec(),
            p_mask: 0.3,
            baseline: Baseline::default(),
        }
    }
}

/// The two perturbed views of a batch: `tilde` and `hat`, each `[B, T, D]`.
#[derive(Debug, Clone)]
pub struct Views {
    pub tilde: Tensor,
    pub hat: Tensor,
}

/// Per sample and view: a uniformly chosen level, a subset draw at that
/// level, then the Bernoulli mask on top. Views are drawn tilde-then-hat.
pub fn draw_views(model: &ShapTstModel, x: &Tensor, objective: &PretrainObjective, rng: &mut impl Rng) -> Result<Views> {
    if objective.levels.is_empty() {
        return Err(Error::Config("pretraining needs at least one masking level".into()));
    }
    let c = model.config();
    let (t, d, lambda) = (c.t_len, c.n_features, c.lambda);
    let batch = x.shape()[0];
    let mut tilde = Vec::with_capacity(batch);
    let mut hat = Vec::with_capacity(batch);
    for b in 0..batch {
        let xb = x.index_first(b);
        for out in [&mut tilde, &mut hat] {
            let level = objective.levels[rng.random_range(0..objective.levels.len())];
            let mask = sample_subset(level, t, d, lambda, rng)?;
            let m = bernoulli_mask(t, d, objective.p_mask, rng)?;
            out.push(view(&xb, &mask, &m, objective.baseline)?);
        }
    }
    let stack = |v: &Vec<Tensor>| Tensor::stack(&v.iter().collect::<Vec<_>>());
    Ok(Views {
        tilde: stack(&tilde)?,
        hat: stack(&hat)?,
    })
}

pub fn view(x: &Tensor, mask: &SubsetMask, bernoulli: &Tensor, baseline: Baseline) -> Result<Tensor> {
    apply_bernoulli(&mask.apply(x, baseline)?, bernoulli, baseline)
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainTerms {
    pub total: Var,
    pub infonce: Var,
    pub ce: Option<Var>,
    pub kl: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PretrainBreakdown {
    pub total: f64,
    pub infonce: f64,
    pub ce: f64,
    pub kl: f64,
}

impl PretrainTerms {
    pub fn values(&self, tape: &Tape) -> PretrainBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        PretrainBreakdown {
            total: tape.value(self.total).item(),
            infonce: tape.value(self.infonce).item(),
            ce: get(self.ce),
            kl: get(self.kl),
        }
    }
}

/// InfoNCE between the views' classification-token states plus, summed over
/// the batch, `alpha_ce` times the hat view's supervised loss and `alpha_kl`
/// times the divergence of the hat prediction from the tilde prediction. For
/// regression the supervised term is squared error and the divergence is the
/// squared output difference.
pub fn pretrain_loss_on_views(
    model: &ShapTstModel,
    tape: &mut Tape,
    params: &ParamVars,
    views: &Views,
    targets: &Targets,
    weights: &LossWeights,
) -> Result<PretrainTerms> {
    let b = targets.len();
    let both = Tensor::stack(&[&views.tilde, &views.hat])?;
    let s = both.shape().to_vec();
    let both = both.reshape(&[2 * b, s[2], s[3]])?;
    let x = tape.constant(both)?;
    let f = model.forward_vars(tape, params, x, false)?;
    let z1 = tape.narrow(f.cls, 0, 0, b)?;
    let z2 = tape.narrow(f.cls, 0, b, b)?;
    let infonce = info_nce(tape, z1, z2, weights.infonce_temperature)?;
    let l_tilde = tape.narrow(f.logits, 0, 0, b)?;
    let l_hat = tape.narrow(f.logits, 0, b, b)?;
    let mut total = infonce;

    let ce = if weights.alpha_ce > 0.0 {
        let mean = supervised_loss(tape, l_hat, targets)?;
        let summed = tape.scale(mean, b as f64)?;
        let term = tape.scale(summed, weights.alpha_ce)?;
        total = tape.add(total, term)?;
        Some(summed)
    } else {
        None
    };
    let kl = if weights.alpha_kl > 0.0 {
        let div = match targets {
            Targets::Classes(_) => {
                let lp = tape.log_softmax(l_hat, 1)?;
                let lq = tape.log_softmax(l_tilde, 1)?;
                let p = tape.exp(lp)?;
                let diff = tape.sub(lp, lq)?;
                let terms = tape.mul(p, diff)?;
                tape.sum(terms)?
            }
            Targets::Values(_) => {
                let diff = tape.sub(l_hat, l_tilde)?;
                let sq = tape.square(diff)?;
                tape.sum(sq)?
            }
        };
        let term = tape.scale(div, weights.alpha_kl)?;
        total = tape.add(total, term)?;
        Some(div)
    } else {
        None
    };
    Ok(PretrainTerms { total, infonce, ce, kl })
}

/// [`draw_views`] followed by [`pretrain_loss_on_views`].
pub fn pretrain_loss(
    model: &ShapTstModel,
    tape: &mut Tape,
    params: &ParamVars,
    batch: &Batch,
    weights: &LossWeights,
    objective: &PretrainObjective,
    rng: &mut impl Rng,
) -> Result<PretrainTerms> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let views = draw_views(model, &batch.x, objective, rng)?;
    pretrain_loss_on_views(model, tape, params, &views, &batch.targets, weights)
}

#[cfg(test)]
mod tests;
