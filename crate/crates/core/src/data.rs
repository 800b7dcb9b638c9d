//! Datasets of fixed-length multivariate series: CSV ingestion, synthetic
//! generation with known informative features, stratified splitting,
//! z-score normalization and noise injection.
//!
//! CSV layout: header `series_id,t,<feature columns...>,label`, one row per
//! (series, time step), rows of a series contiguous with `t = 0..T-1`, and
//! the label repeated on every row of its series. Classification labels are
//! class indices `0..K-1`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::losses::{Batch, Targets};
use crate::model::Task;
use crate::tensor::Tensor;

pub const DATA_FILE: &str = "data.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[T, D]`
    pub x: Tensor,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub task: Task,
    pub t_len: usize,
    pub n_features: usize,
    /// Number of classes; 0 for regression.
    pub n_classes: usize,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    /// Statistics used to normalize `samples`, if any.
    pub norm: Option<NormStats>,
}

impl TimeSeriesDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_of(&self, i: usize) -> Option<usize> {
        match self.samples[i].target {
            Target::Class(c) => Some(c),
            Target::Value(_) => None,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for s in &self.samples {
            if let Target::Class(c) = s.target {
                counts[c] += 1;
            }
        }
        counts
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            samples,
            ..self.metadata()
        }
    }

    fn metadata(&self) -> Self {
        Self {
            task: self.task,
            t_len: self.t_len,
            n_features: self.n_features,
            n_classes: self.n_classes,
            feature_names: self.feature_names.clone(),
            class_names: self.class_names.clone(),
            samples: Vec::new(),
            norm: self.norm.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        self.with_samples(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    /// Stacks the selected samples into a training batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let xs: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].x).collect();
        let x = Tensor::stack(&xs)?;
        let targets = match self.task {
            Task::Classification => Targets::Classes(
                indices
                    .iter()
                    .map(|&i| self.class_of(i).ok_or_else(|| Error::Data("mixed target kinds".into())))
                    .collect::<Result<_>>()?,
            ),
            Task::Regression => Targets::Values(
                indices
                    .iter()
                    .map(|&i| match self.samples[i].target {
                        Target::Value(v) => Ok(v),
                        Target::Class(_) => Err(Error::Data("mixed target kinds".into())),
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Batch::new(x, targets)
    }

    pub fn all(&self) -> Result<Batch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_names.len() != self.n_features {
            return Err(Error::Data("feature name count does not match D".into()));
        }
        for s in &self.samples {
            if s.x.shape() != [self.t_len, self.n_features] {
                return Err(Error::Data(format!("series `{}` has shape {:?}", s.id, s.x.shape())));
            }
            if !s.x.all_finite() {
                return Err(Error::Data(format!("series `{}` has non-finite values", s.id)));
            }
            match (self.task, s.target) {
                (Task::Classification, Target::Class(c)) if c < self.n_classes => {}
                (Task::Regression, Target::Value(v)) if v.is_finite() => {}
                _ => return Err(Error::Data(format!("series `{}` has an invalid target", s.id))),
            }
        }
        Ok(())
    }

    /// Per-feature mean and population standard deviation over every cell.
    /// Constant features get std 1.
    pub fn fit_normalization(&self) -> Result<NormStats> {
        if self.is_empty() {
            return Err(Error::Data("cannot fit normalization on an empty split".into()));
        }
        let d = self.n_features;
        let n = (self.len() * self.t_len) as f64;
        let mut mean = vec![0.0; d];
        for s in &self.samples {
            for (i, v) in s.x.data().iter().enumerate() {
                mean[i % d] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for s in &self.samples {
            for (i, v) in s.x.data().iter().enumerate() {
                var[i % d] += (v - mean[i % d]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(NormStats { mean, std })
    }

    /// Returns `(x - mean) / std` per feature and records the stats.
    pub fn normalized(&self, stats: &NormStats) -> Result<Self> {
        let d = self.n_features;
        if stats.mean.len() != d || stats.std.len() != d {
            return Err(Error::Data("normalization stats do not match D".into()));
        }
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut x = s.x.clone();
                for (i, v) in x.data_mut().iter_mut().enumerate() {
                    *v = (*v - stats.mean[i % d]) / stats.std[i % d];
                }
                Sample { x, ..s.clone() }
            })
            .collect();
        Ok(Self {
            norm: Some(stats.clone()),
            ..self.with_samples(samples)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalShape {
    Step,
    Sinusoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub t_len: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub n_samples: usize,
    pub informative_features: Vec<usize>,
    /// Half-open `[start, end)` time range carrying the signal.
    pub informative_window: (usize, usize),
    pub signal_amplitude: f64,
    pub noise_std: f64,
    pub shape: SignalShape,
    /// Per-informative-feature multipliers of the amplitude; empty means all 1.
    pub feature_gains: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            t_len: 16,
            n_features: 6,
            n_classes: 2,
            n_samples: 2000,
            informative_features: vec![0],
            informative_window: (4, 12),
            signal_amplitude: 1.0,
            noise_std: 1.0,
            shape: SignalShape::Step,
            feature_gains: Vec::new(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: String| Err(Error::Config(format!("synthetic spec field `{field}`: {why}")));
        if self.t_len == 0 {
            return fail("t_len", "must be positive".into());
        }
        if self.n_features == 0 {
            return fail("n_features", "must be positive".into());
        }
        if self.n_classes < 2 {
            return fail("n_classes", "needs at least 2 classes".into());
        }
        if self.n_samples < self.n_classes {
            return fail("n_samples", "fewer samples than classes".into());
        }
        if self.informative_features.is_empty() {
            return fail("informative_features", "must be nonempty".into());
        }
        if let Some(&j) = self.informative_features.iter().find(|&&j| j >= self.n_features) {
            return fail("informative_features", format!("index {j} out of range for {} features", self.n_features));
        }
        let (a, b) = self.informative_window;
        if a >= b || b > self.t_len {
            return fail("informative_window", format!("[{a}, {b}) is not a nonempty range within [0, {})", self.t_len));
        }
        if !(self.signal_amplitude.is_finite() && self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return fail("noise_std", "amplitude and noise must be finite, noise non-negative".into());
        }
        if !self.feature_gains.is_empty() && self.feature_gains.len() != self.informative_features.len() {
            return fail("feature_gains", "needs one gain per informative feature".into());
        }
        Ok(())
    }

    fn gain(&self, i: usize) -> f64 {
        self.feature_gains.get(i).copied().unwrap_or(1.0)
    }
}

/// Class `c` adds `c · amplitude · gain` times the signal shape to each
/// informative feature inside the window, on top of N(0, noise_std²)
/// background noise everywhere. Labels cycle through the classes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<TimeSeriesDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let (t, d) = (spec.t_len, spec.n_features);
    let (w0, w1) = spec.informative_window;
    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let class = i % spec.n_classes;
        let mut x = Tensor::from_fn(&[t, d], |_| noise.sample(&mut rng));
        for (g, &j) in spec.informative_features.iter().enumerate() {
            let a = class as f64 * spec.signal_amplitude * spec.gain(g);
            for ti in w0..w1 {
                let shape = match spec.shape {
                    SignalShape::Step => 1.0,
                    SignalShape::Sinusoid => {
                        (std::f64::consts::PI * (ti - w0) as f64 / (w1 - w0) as f64).sin()
                    }
                };
                let v = x.get(&[ti, j]) + a * shape;
                x.set(&[ti, j], v);
            }
        }
        samples.push(Sample {
            id: format!("s{i:05}"),
            x,
            target: Target::Class(class),
        });
    }
    Ok(TimeSeriesDataset {
        task: Task::Classification,
        t_len: t,
        n_features: d,
        n_classes: spec.n_classes,
        feature_names: (0..d).map(|j| format!("f{j}")).collect(),
        class_names: (0..spec.n_classes).map(|c| c.to_string()).collect(),
        samples,
        norm: None,
    })
}

/// Adds independent N(0, sigma²) noise to one feature of every sample.
pub fn inject_noise(dataset: &TimeSeriesDataset, feature: usize, sigma: f64, rng: &mut impl Rng) -> Result<TimeSeriesDataset> {
    if feature >= dataset.n_features {
        return Err(Error::InvalidArgument(format!(
            "noise feature {feature} out of range for {} features",
            dataset.n_features
        )));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(dataset.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = dataset.clone();
    for s in &mut out.samples {
        for ti in 0..dataset.t_len {
            let v = s.x.get(&[ti, feature]) + normal.sample(rng);
            s.x.set(&[ti, feature], v);
        }
    }
    Ok(out)
}

/// Seeded split into `(train, test)`. Classification splits are stratified:
/// each class contributes its share, rounded by largest remainder so the train
/// size is `round(n · train_frac)`.
pub fn split(dataset: &TimeSeriesDataset, train_frac: f64, seed: u64) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument(format!("train_frac must be in (0, 1), got {train_frac}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dataset.len();
    let groups: Vec<Vec<usize>> = match dataset.task {
        Task::Classification => {
            let mut g = vec![Vec::new(); dataset.n_classes];
            for i in 0..n {
                g[dataset.class_of(i).expect("classification target")].push(i);
            }
            g
        }
        Task::Regression => vec![(0..n).collect()],
    };
    let want = (n as f64 * train_frac).round() as usize;
    let exact: Vec<f64> = groups.iter().map(|g| g.len() as f64 * train_frac).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = want.saturating_sub(take.iter().sum());
    for &g in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if take[g] < groups[g].len() {
            take[g] += 1;
            missing -= 1;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, g) in groups.into_iter().enumerate() {
        let mut g = g;
        g.shuffle(&mut rng);
        if dataset.task == Task::Classification && take[c] == 0 {
            return Err(Error::Data(format!("split leaves class {c} empty in train")));
        }
        train.extend_from_slice(&g[..take[c]]);
        test.extend_from_slice(&g[take[c]..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

fn csv_err(file: &Path, row: usize, column: &str, reason: impl Into<String>) -> Error {
    Error::Csv {
        file: file.display().to_string(),
        row,
        column: column.to_string(),
        reason: reason.into(),
    }
}

/// Parses a dataset file. `task = None` treats the file as classification
/// when every label is a non-negative integer.
pub fn load_csv(path: &Path, task: Option<Task>) -> Result<TimeSeriesDataset> {
    let bytes = artifact::read(path)?;
    parse_csv(&bytes, path, task)
}

pub fn parse_csv(bytes: &[u8], path: &Path, task: Option<Task>) -> Result<TimeSeriesDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, 1, "", e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 4 || header[0] != "series_id" || header[1] != "t" || header.last().map(String::as_str) != Some("label") {
        return Err(csv_err(path, 1, "", "header must be `series_id,t,<features...>,label`"));
    }
    let feature_names = header[2..header.len() - 1].to_vec();
    let d = feature_names.len();

    struct Parsed {
        id: String,
        row: usize,
        rows: Vec<Vec<f64>>,
        label: String,
    }
    let mut series: Vec<Parsed> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| csv_err(path, row, "", e.to_string()))?;
        if record.len() != header.len() {
            return Err(csv_err(path, row, "", format!("expected {} fields, found {}", header.len(), record.len())));
        }
        let id = record[0].to_string();
        let t: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| csv_err(path, row, "t", format!("`{}` is not a time index", &record[1])))?;
        let mut values = Vec::with_capacity(d);
        for j in 0..d {
            let cell = record[j + 2].trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| csv_err(path, row, &header[j + 2], format!("`{cell}` is not numeric")))?;
            if !v.is_finite() {
                return Err(csv_err(path, row, &header[j + 2], "value is not finite"));
            }
            values.push(v);
        }
        let label = record[header.len() - 1].trim().to_string();
        match series.last_mut() {
            Some(s) if s.id == id => {
                if label != s.label {
                    return Err(csv_err(path, row, "label", format!("label changes within series `{id}`")));
                }
                if t != s.rows.len() {
                    return Err(csv_err(path, row, "t", format!("expected t = {}, found {t}", s.rows.len())));
                }
                s.rows.push(values);
            }
            _ => {
                if series.iter().any(|s| s.id == id) {
                    return Err(csv_err(path, row, "series_id", format!("rows of series `{id}` are not contiguous")));
                }
                if t != 0 {
                    return Err(csv_err(path, row, "t", format!("series `{id}` must start at t = 0")));
                }
                series.push(Parsed {
                    id,
                    row,
                    rows: vec![values],
                    label,
                });
            }
        }
    }
    let first = series.first().ok_or_else(|| csv_err(path, 2, "", "no data rows"))?;
    let t_len = first.rows.len();
    if let Some(s) = series.iter().find(|s| s.rows.len() != t_len) {
        return Err(csv_err(path, s.row, "t", format!("series `{}` has {} steps, expected {t_len}", s.id, s.rows.len())));
    }
    let is_class = |l: &str| l.parse::<usize>().is_ok();
    let task = task.unwrap_or(if series.iter().all(|s| is_class(&s.label)) {
        Task::Classification
    } else {
        Task::Regression
    });
    let mut samples = Vec::with_capacity(series.len());
    let mut n_classes = 0;
    for s in series {
        let target = match task {
            Task::Classification => {
                let c: usize = s
                    .label
                    .parse()
                    .map_err(|_| csv_err(path, s.row, "label", format!("`{}` is not a class index", s.label)))?;
                n_classes = n_classes.max(c + 1);
                Target::Class(c)
            }
            Task::Regression => {
                let v: f64 = s
                    .label
                    .parse()
                    .map_err(|_| csv_err(path, s.row, "label", format!("`{}` is not numeric", s.label)))?;
                Target::Value(v)
            }
        };
        samples.push(Sample {
            id: s.id,
            x: Tensor::new(vec![t_len, d], s.rows.concat())?,
            target,
        });
    }
    Ok(TimeSeriesDataset {
        task,
        t_len,
        n_features: d,
        n_classes,
        feature_names,
        class_names: (0..n_classes).map(|c| c.to_string()).collect(),
        samples,
        norm: None,
    })
}

/// Serializes to the CSV layout; values use the shortest representation that
/// parses back to the same `f64`.
pub fn to_csv(dataset: &TimeSeriesDataset) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec!["series_id".to_string(), "t".to_string()];
    header.extend(dataset.feature_names.iter().cloned());
    header.push("label".into());
    let io = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(&header).map_err(io)?;
    for s in &dataset.samples {
        let label = match s.target {
            Target::Class(c) => c.to_string(),
            Target::Value(v) => format!("{v:?}"),
        };
        for t in 0..dataset.t_len {
            let mut rec = vec![s.id.clone(), t.to_string()];
            rec.extend((0..dataset.n_features).map(|j| format!("{:?}", s.x.get(&[t, j]))));
            rec.push(label.clone());
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

pub fn write_csv(dataset: &TimeSeriesDataset, path: &Path) -> Result<()> {
    artifact::write_atomic(path, &to_csv(dataset)?)
}

/// Reproducibility record written next to every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub format_version: u32,
    pub task: Task,
    pub t_len: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub n_samples: usize,
    pub class_counts: BTreeMap<String, usize>,
    pub data_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

/// Writes `data.csv` and `manifest.json` into `dir`.
pub fn write_dir(dataset: &TimeSeriesDataset, dir: &Path, synthetic: Option<&SyntheticSpec>) -> Result<DataManifest> {
    let bytes = to_csv(dataset)?;
    let manifest = DataManifest {
        format_version: MANIFEST_VERSION,
        task: dataset.task,
        t_len: dataset.t_len,
        n_features: dataset.n_features,
        n_classes: dataset.n_classes,
        n_samples: dataset.len(),
        class_counts: dataset
            .class_counts()
            .into_iter()
            .enumerate()
            .map(|(c, n)| (c.to_string(), n))
            .collect(),
        data_sha256: artifact::sha256_hex(&bytes),
        synthetic: synthetic.cloned(),
    };
    artifact::write_atomic(&dir.join(DATA_FILE), &bytes)?;
    artifact::write_atomic(&dir.join(MANIFEST_FILE), &artifact::to_json_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads `dir/data.csv`, taking the task and class count from
/// `dir/manifest.json` when present.
pub fn load_dir(dir: &Path) -> Result<TimeSeriesDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Option<DataManifest> = if manifest_path.exists() {
        Some(serde_json::from_slice(&artifact::read(&manifest_path)?)?)
    } else {
        None
    };
    let mut ds = load_csv(&dir.join(DATA_FILE), manifest.as_ref().map(|m| m.task))?;
    if let Some(m) = manifest {
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Data(format!("unsupported manifest version {}", m.format_version)));
        }
        if m.task == Task::Classification {
            if ds.n_classes > m.n_classes {
                return Err(Error::Data(format!("labels exceed the manifest's {} classes", m.n_classes)));
            }
            ds.n_classes = m.n_classes;
            ds.class_names = (0..m.n_classes).map(|c| c.to_string()).collect();
        }
    }
    ds.validate()?;
    Ok(ds)
}
