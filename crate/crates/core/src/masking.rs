//! Time, feature and cell perturbations of a `T×D` series, the subset
//! distribution used to draw them, and the per-cell Bernoulli mask.
//!
//! Time and cell masks work on blocks of `lambda` adjacent time steps: the
//! series is mean-pooled into `T/lambda` blocks, masked blocks take the
//! baseline, and the result is tiled back to length `T`. Feature masks act on
//! whole columns with no pooling.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Time,
    Feature,
    Cell,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Time, Level::Feature, Level::Cell];

    pub fn name(self) -> &'static str {
        match self {
            Level::Time => "time",
            Level::Feature => "feature",
            Level::Cell => "cell",
        }
    }

    pub fn n_players(self, t: usize, d: usize, lambda: usize) -> usize {
        match self {
            Level::Time => t / lambda,
            Level::Feature => d,
            Level::Cell => (t / lambda) * d,
        }
    }
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "time" | "t" => Ok(Level::Time),
            "feature" | "d" => Ok(Level::Feature),
            "cell" | "c" => Ok(Level::Cell),
            other => Err(Error::InvalidArgument(format!(
                "unknown level `{other}` (expected time, feature or cell)"
            ))),
        }
    }
}

/// Constant fill value for masked cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
}

impl Default for Baseline {
    fn default() -> Self {
        Self { value: 0.0 }
    }
}

/// Which players survive masking at one level.
///
/// Players are time blocks (`Time`), feature columns (`Feature`) or
/// `(block, feature)` pairs in row-major order (`Cell`). A cell mask built
/// from `s_t` and `s_d` keeps their outer product, but any cell grid is allowed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetMask {
    level: Level,
    lambda: usize,
    t_len: usize,
    n_features: usize,
    players: Vec<bool>,
}

fn check_lambda(t: usize, lambda: usize) -> Result<()> {
    if lambda == 0 || t % lambda != 0 {
        return Err(Error::Mask(format!("aggregation factor {lambda} does not divide T={t}")));
    }
    Ok(())
}

impl SubsetMask {
    pub fn new(level: Level, t_len: usize, n_features: usize, lambda: usize, players: Vec<bool>) -> Result<Self> {
        check_lambda(t_len, lambda)?;
        let n = level.n_players(t_len, n_features, lambda);
        if players.len() != n {
            return Err(Error::Mask(format!(
                "{} mask needs {n} players, got {}",
                level.name(),
                players.len()
            )));
        }
        Ok(Self {
            level,
            lambda,
            t_len,
            n_features,
            players,
        })
    }

    pub fn time(s_t: Vec<bool>, t_len: usize, n_features: usize, lambda: usize) -> Result<Self> {
        Self::new(Level::Time, t_len, n_features, lambda, s_t)
    }

    pub fn feature(s_d: Vec<bool>, t_len: usize) -> Result<Self> {
        let d = s_d.len();
        Self::new(Level::Feature, t_len, d, 1, s_d)
    }

    /// Outer-product cell mask: cell `(block, j)` kept iff `s_t[block] && s_d[j]`.
    pub fn cell(s_t: &[bool], s_d: &[bool], t_len: usize, lambda: usize) -> Result<Self> {
        let grid = s_t
            .iter()
            .flat_map(|&a| s_d.iter().map(move |&b| a && b))
            .collect();
        Self::new(Level::Cell, t_len, s_d.len(), lambda, grid)
    }

    pub fn full(level: Level, t_len: usize, n_features: usize, lambda: usize) -> Result<Self> {
        check_lambda(t_len, lambda)?;
        let n = level.n_players(t_len, n_features, lambda);
        Self::new(level, t_len, n_features, lambda, vec![true; n])
    }

    pub fn empty(level: Level, t_len: usize, n_features: usize, lambda: usize) -> Result<Self> {
        check_lambda(t_len, lambda)?;
        let n = level.n_players(t_len, n_features, lambda);
        Self::new(level, t_len, n_features, lambda, vec![false; n])
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.t_len, self.n_features)
    }

    pub fn players(&self) -> &[bool] {
        &self.players
    }

    pub fn n_players(&self) -> usize {
        self.players.len()
    }

    pub fn n_kept(&self) -> usize {
        self.players.iter().filter(|&&p| p).count()
    }

    /// Kept time blocks, for time masks.
    pub fn s_t(&self) -> Option<&[bool]> {
        (self.level == Level::Time).then_some(&self.players[..])
    }

    /// Kept feature columns, for feature masks.
    pub fn s_d(&self) -> Option<&[bool]> {
        (self.level == Level::Feature).then_some(&self.players[..])
    }

    fn keeps(&self, t: usize, j: usize) -> bool {
        match self.level {
            Level::Time => self.players[t / self.lambda],
            Level::Feature => self.players[j],
            Level::Cell => self.players[(t / self.lambda) * self.n_features + j],
        }
    }

    /// Per-cell keep indicator at full `T×D` resolution (1 kept, 0 masked).
    pub fn kept_cells(&self) -> Vec<f64> {
        let (t_len, d) = (self.t_len, self.n_features);
        (0..t_len * d)
            .map(|i| if self.keeps(i / d, i % d) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Whether this level pools time steps before masking.
    fn pools(&self) -> bool {
        self.level != Level::Feature && self.lambda > 1
    }

    /// Perturbs `x: [T, D]` with this mask.
    pub fn apply(&self, x: &Tensor, baseline: Baseline) -> Result<Tensor> {
        if x.shape() != [self.t_len, self.n_features] {
            return Err(Error::Mask(format!(
                "mask built for {}×{} applied to input of shape {:?}",
                self.t_len,
                self.n_features,
                x.shape()
            )));
        }
        let (t_len, d) = (self.t_len, self.n_features);
        let src = if self.pools() {
            pool_tile(x.data(), t_len, d, self.lambda)
        } else {
            x.data().to_vec()
        };
        let data = (0..t_len * d)
            .map(|i| if self.keeps(i / d, i % d) { src[i] } else { baseline.value })
            .collect();
        Ok(Tensor::new(vec![t_len, d], data)?)
    }
}

/// Mean over each block of `lambda` rows, repeated back over the block.
fn pool_tile(x: &[f64], t_len: usize, d: usize, lambda: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for block in 0..t_len / lambda {
        for j in 0..d {
            let mean = (0..lambda).map(|s| x[(block * lambda + s) * d + j]).sum::<f64>() / lambda as f64;
            for s in 0..lambda {
                out[(block * lambda + s) * d + j] = mean;
            }
        }
    }
    out
}

fn dims_of(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [t, d] => Ok((t, d)),
        _ => Err(Error::Mask(format!("expected a [T, D] series, got {:?}", x.shape()))),
    }
}

pub fn mask_time(x: &Tensor, s_t: &[bool], lambda: usize, baseline: Baseline) -> Result<Tensor> {
    let (t, d) = dims_of(x)?;
    SubsetMask::time(s_t.to_vec(), t, d, lambda)?.apply(x, baseline)
}

pub fn mask_feature(x: &Tensor, s_d: &[bool], baseline: Baseline) -> Result<Tensor> {
    let (t, d) = dims_of(x)?;
    if s_d.len() != d {
        return Err(Error::Mask(format!("feature mask has {} entries for D={d}", s_d.len())));
    }
    SubsetMask::feature(s_d.to_vec(), t)?.apply(x, baseline)
}

pub fn mask_cell(x: &Tensor, s_t: &[bool], s_d: &[bool], lambda: usize, baseline: Baseline) -> Result<Tensor> {
    let (t, d) = dims_of(x)?;
    if s_d.len() != d {
        return Err(Error::Mask(format!("feature mask has {} entries for D={d}", s_d.len())));
    }
    SubsetMask::cell(s_t, s_d, t, lambda)?.apply(x, baseline)
}

/// Probability of each coalition size `k = 1..n-1` under the Shapley kernel,
/// proportional to `(n-1) / (k (n-k))`.
pub fn shapley_size_distribution(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Mask(format!("subset sampling needs at least 2 players, got {n}")));
    }
    let raw: Vec<f64> = (1..n)
        .map(|k| (n - 1) as f64 / (k as f64 * (n - k) as f64))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Draws a coalition of `n` players: a Shapley-kernel size, then a uniform
/// subset of that size. Never empty, never full.
pub fn sample_coalition<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<bool>> {
    let sizes = shapley_size_distribution(n)?;
    sample_coalition_with(&sizes, rng)
}

/// Same as [`sample_coalition`] with the size distribution precomputed.
pub fn sample_coalition_with<R: Rng + ?Sized>(sizes: &[f64], rng: &mut R) -> Result<Vec<bool>> {
    let n = sizes.len() + 1;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut k = n - 1;
    for (i, p) in sizes.iter().enumerate() {
        acc += p;
        if u < acc {
            k = i + 1;
            break;
        }
    }
    let mut players = vec![false; n];
    for i in index::sample(rng, n, k) {
        players[i] = true;
    }
    Ok(players)
}

pub fn sample_subset<R: Rng + ?Sized>(
    level: Level,
    t_len: usize,
    n_features: usize,
    lambda: usize,
    rng: &mut R,
) -> Result<SubsetMask> {
    check_lambda(t_len, lambda)?;
    let n = level.n_players(t_len, n_features, lambda);
    let players = sample_coalition(n, rng)?;
    SubsetMask::new(level, t_len, n_features, lambda, players)
}

/// Binary `T×D` matrix with each entry 0 (masked) with probability `p_mask`.
pub fn bernoulli_mask<R: Rng + ?Sized>(t_len: usize, n_features: usize, p_mask: f64, rng: &mut R) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p_mask) {
        return Err(Error::Mask(format!("mask probability {p_mask} outside [0, 1]")));
    }
    Ok(Tensor::from_fn(&[t_len, n_features], |_| {
        if rng.random::<f64>() < p_mask {
            0.0
        } else {
            1.0
        }
    }))
}

/// `M ⊙ x + (1 - M) ⊙ baseline`.
pub fn apply_bernoulli(x: &Tensor, m: &Tensor, baseline: Baseline) -> Result<Tensor> {
    if x.shape() != m.shape() {
        return Err(Error::Mask(format!(
            "Bernoulli mask shape {:?} does not match input {:?}",
            m.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(m.data())
        .map(|(&v, &keep)| keep * v + (1.0 - keep) * baseline.value)
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}
