use std::path::{Path, PathBuf};

use serde::Serialize;

use super::manifest::{FileRecord, Outputs, RunManifest};
use super::{svg, Command, Common, Split, TrainArgs};
use crate::artifact;
use crate::data::{self, SyntheticSpec, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, LatencyReport, Metric, NoiseSweepConfig, Provenance};
use crate::masking::{Baseline, Level};
use crate::model::{aggregate_cells, ShapTstModel};
use crate::oracle::{oracle_explain, OracleConfig, OracleMethod};
use crate::training::{
    finetune, metrics_csv, parse_toml_with_env, pretrain, prepare, Checkpoint, Stage, TrainConfig, TrainOptions, TrainState,
};

pub const EXPLAIN_SCHEMA_VERSION: u32 = 1;
pub const COMPARE_SCHEMA_VERSION: u32 = 1;
pub const LATENCY_SCHEMA_VERSION: u32 = 1;
pub const NOISE_SCHEMA_VERSION: u32 = 1;

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::SynthData { spec, out, common } => synth_data(&spec, &out, &common),
        Command::Pretrain(args) => train(Stage::Pretrain, &args),
        Command::Finetune(args) => train(Stage::Finetune, &args),
        Command::Explain {
            ckpt,
            data,
            level,
            out,
            svg,
            split,
            limit,
            common,
        } => explain(&ckpt, &data, level, &out, svg, split, limit, &common),
        Command::Eval {
            ckpt,
            data,
            metrics,
            level,
            subsets,
            split,
            limit,
            out,
            common,
        } => evaluate(&ckpt, &data, &metrics, level, subsets, split, limit, &out, &common),
        Command::OracleCompare {
            ckpt,
            data,
            method,
            budget,
            level,
            split,
            limit,
            out,
            common,
        } => oracle_compare(&ckpt, &data, method, budget, level, split, limit, &out, &common),
        Command::NoiseSweep {
            config,
            sigmas,
            out,
            common,
        } => noise_sweep(&config, sigmas, &out, &common),
        Command::BenchLatency {
            ckpt,
            data,
            budget,
            method,
            level,
            split,
            limit,
            out,
            common,
        } => bench_latency(&ckpt, &data, budget, method, level, split, limit, &out, &common),
    }
}

fn check_threads(common: &Common) -> Result<()> {
    if common.threads == 0 {
        return Err(Error::InvalidArgument("--threads must be at least 1".into()));
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(artifact::read(path)?).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))
}

fn json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    artifact::to_json_pretty(value)
}

fn data_file(dir: &Path) -> PathBuf {
    dir.join(data::DATA_FILE)
}

fn synth_data(spec_path: &Path, out: &Path, common: &Common) -> Result<()> {
    check_threads(common)?;
    let text = read_text(spec_path)?;
    let mut spec: SyntheticSpec = parse_toml_with_env(&text, std::env::vars())?;
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let ds = data::generate_synthetic(&spec)?;
    let mut manifest = RunManifest::new("synth-data", Some(spec.seed), common.threads);
    manifest.config = Some(FileRecord::of(spec_path, text.as_bytes()));
    // write_dir writes data.csv and manifest.json atomically
    data::write_dir(&ds, out, Some(&spec))?;
    let mut outputs = Outputs::default();
    for name in [data::DATA_FILE, data::MANIFEST_FILE] {
        let p = out.join(name);
        outputs.add(p.clone(), artifact::read(&p)?);
    }
    outputs.commit(manifest, &out.join("run_manifest.json"))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(stage: Stage, args: &TrainArgs) -> Result<()> {
    check_threads(&args.common)?;
    let text = read_text(&args.config)?;
    let mut cfg: TrainConfig = parse_toml_with_env(&text, std::env::vars())?;
    cfg.stage = stage;
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ds = data::load_dir(&args.data)?;
    let prep = prepare(&ds, cfg.train_frac, cfg.seed)?;
    let model_cfg = cfg.model.model_config(&prep.train);

    let mut manifest = RunManifest::new(
        match stage {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        },
        Some(cfg.seed),
        args.common.threads,
    );
    manifest.config = Some(FileRecord::of(&args.config, text.as_bytes()));
    manifest.inputs.push(FileRecord::read(&data_file(&args.data))?);

    let (mut model, mut state) = match (&args.resume, &args.pretrained) {
        (Some(_), Some(_)) => return Err(Error::InvalidArgument("--resume and --pretrained are mutually exclusive".into())),
        (Some(path), None) => {
            manifest.inputs.push(FileRecord::read(path)?);
            let ck = Checkpoint::load(path)?;
            let state = ck
                .state
                .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state to resume".into()))?;
            if state.stage != stage {
                return Err(Error::Checkpoint(format!("checkpoint is from a {:?} run", state.stage)));
            }
            if ck.train.as_ref() != Some(&cfg) {
                return Err(Error::Config("config differs from the run being resumed".into()));
            }
            (ck.model, state)
        }
        (None, Some(path)) => {
            if stage == Stage::Pretrain {
                return Err(Error::InvalidArgument("--pretrained applies to finetune only".into()));
            }
            manifest.inputs.push(FileRecord::read(path)?);
            let ck = Checkpoint::load(path)?;
            if ck.model.config() != &model_cfg {
                return Err(Error::Config("pre-trained model architecture differs from the config".into()));
            }
            let state = TrainState::new(stage, &ck.model, cfg.seed);
            (ck.model, state)
        }
        (None, None) => {
            let m = ShapTstModel::new(model_cfg, cfg.seed)?;
            let s = TrainState::new(stage, &m, cfg.seed);
            (m, s)
        }
    };

    let existed = args.out.exists();
    let norm = prep.norm.clone();
    let mut save = |m: &ShapTstModel, s: &TrainState| {
        Checkpoint {
            model: m.clone(),
            train: Some(cfg.clone()),
            norm: Some(norm.clone()),
            state: Some(s.clone()),
        }
        .save(&args.out)
    };
    let opts = TrainOptions {
        stop_after_epoch: args.stop_after_epoch,
        on_epoch_end: Some(&mut save),
    };
    let result = match stage {
        Stage::Pretrain => pretrain(&mut model, &prep.train, Some(&prep.test), &cfg, &mut state, opts),
        Stage::Finetune => finetune(&mut model, &prep.train, Some(&prep.test), &cfg, &mut state, opts),
    };
    if let Err(e) = result {
        if !existed {
            let _ = std::fs::remove_file(&args.out);
        }
        return Err(e);
    }
    let ck = Checkpoint {
        model,
        train: Some(cfg.clone()),
        norm: Some(prep.norm.clone()),
        state: Some(state),
    };
    let mut outputs = Outputs::default();
    outputs.add(args.out.clone(), ck.to_bytes()?);
    let log = &ck.state.as_ref().expect("state present").log;
    outputs.add(sibling(&args.out, ".metrics.csv"), metrics_csv(stage, log));
    outputs.commit(manifest, &sibling(&args.out, ".manifest.json"))
}

/// Loads a checkpoint and the requested split of a dataset, normalized with
/// the checkpoint's training statistics.
fn load_split(ckpt: &Path, data_dir: &Path, split: Split, limit: Option<usize>) -> Result<(Checkpoint, TimeSeriesDataset)> {
    let ck = Checkpoint::load(ckpt)?;
    let ds = data::load_dir(data_dir)?;
    let c = ck.model.config();
    if (ds.t_len, ds.n_features) != (c.t_len, c.n_features) || ds.task != c.task {
        return Err(Error::InvalidArgument(format!(
            "dataset shape {}x{} does not match the checkpoint's {}x{}",
            ds.t_len, ds.n_features, c.t_len, c.n_features
        )));
    }
    let part = match (split, &ck.train) {
        (Split::All, _) => ds,
        (_, None) => return Err(Error::Checkpoint("checkpoint has no training config to recover the split".into())),
        (s, Some(cfg)) => {
            let (train, test) = data::split(&ds, cfg.train_frac, cfg.seed)?;
            if s == Split::Train {
                train
            } else {
                test
            }
        }
    };
    let mut part = match &ck.norm {
        Some(n) => part.normalized(n)?,
        None => part,
    };
    if let Some(n) = limit {
        part = part.subset(&(0..n.min(part.len())).collect::<Vec<_>>());
    }
    if part.is_empty() {
        return Err(Error::Data("selected split is empty".into()));
    }
    Ok((ck, part))
}

fn inputs(ckpt: &Path, data_dir: &Path) -> Result<Vec<FileRecord>> {
    Ok(vec![FileRecord::read(ckpt)?, FileRecord::read(&data_file(data_dir))?])
}

fn baseline_of(ck: &Checkpoint) -> Baseline {
    ck.train.as_ref().map(TrainConfig::baseline).unwrap_or_default()
}

#[derive(Serialize)]
struct SampleExplanation {
    sample_id: String,
    predicted_class: usize,
    /// `phi[k]` lists the players of the level for class `k`, row-major.
    phi: Vec<Vec<f64>>,
    v_full: Vec<f64>,
    v_empty: Vec<f64>,
}

#[derive(Serialize)]
struct ExplainOutput {
    schema_version: u32,
    level: Level,
    lambda: usize,
    player_shape: Vec<usize>,
    samples: Vec<SampleExplanation>,
}

fn file_safe(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[allow(clippy::too_many_arguments)]
fn explain(
    ckpt: &Path,
    data_dir: &Path,
    level: Level,
    out: &Path,
    with_svg: bool,
    split: Split,
    limit: Option<usize>,
    common: &Common,
) -> Result<()> {
    check_threads(common)?;
    let (ck, ds) = load_split(ckpt, data_dir, split, limit)?;
    let mut manifest = RunManifest::new("explain", common.seed, common.threads);
    manifest.inputs = inputs(ckpt, data_dir)?;
    let model = &ck.model;
    let c = model.config();
    let attrs = model.explain_batch(&ds.all()?.x, baseline_of(&ck))?;
    let blocks = c.t_len / c.lambda;
    let player_shape = match level {
        Level::Time => vec![blocks],
        Level::Feature => vec![c.n_features],
        Level::Cell => vec![blocks, c.n_features],
    };
    let mut outputs = Outputs::default();
    let mut samples = Vec::with_capacity(attrs.len());
    for (a, s) in attrs.iter().zip(&ds.samples) {
        let k = a.v_full.len();
        samples.push(SampleExplanation {
            sample_id: s.id.clone(),
            predicted_class: a.predicted_class,
            phi: (0..k).map(|y| a.aggregate(level, y)).collect(),
            v_full: a.v_full.clone(),
            v_empty: a.v_empty.clone(),
        });
        if with_svg {
            let y = a.predicted_class;
            let cells = aggregate_cells(&a.class_phi(y), c.t_len, c.n_features, c.lambda, Level::Cell);
            let grid: Vec<Vec<f64>> = cells.chunks(c.n_features).map(<[f64]>::to_vec).collect();
            let rows: Vec<String> = (0..blocks).map(|b| format!("t{}-{}", b * c.lambda, (b + 1) * c.lambda - 1)).collect();
            let title = format!("{} class {y}", s.id);
            let svg = svg::heatmap(&title, &grid, &rows, &ds.feature_names);
            outputs.add(out.join(format!("heatmap_{}.svg", file_safe(&s.id))), svg);
        }
    }
    let doc = ExplainOutput {
        schema_version: EXPLAIN_SCHEMA_VERSION,
        level,
        lambda: c.lambda,
        player_shape,
        samples,
    };
    outputs.add(out.join("explanations.json"), json(&doc)?);
    outputs.commit(manifest, &out.join("run_manifest.json"))
}

fn provenance(ckpt: &Path, data_dir: &Path, ck: &Checkpoint, seed: u64) -> Result<Provenance> {
    let config_sha256 = match &ck.train {
        Some(t) => Some(artifact::sha256_hex(t.to_toml()?.as_bytes())),
        None => None,
    };
    Ok(Provenance {
        checkpoint_sha256: Some(artifact::sha256_hex(&artifact::read(ckpt)?)),
        config_sha256,
        data_sha256: Some(artifact::sha256_hex(&artifact::read(&data_file(data_dir))?)),
        seed,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    ckpt: &Path,
    data_dir: &Path,
    metric_names: &[String],
    level: Level,
    subsets: usize,
    split: Split,
    limit: Option<usize>,
    out: &Path,
    common: &Common,
) -> Result<()> {
    check_threads(common)?;
    let metrics = metric_names.iter().map(|m| m.parse()).collect::<Result<Vec<Metric>>>()?;
    let (ck, ds) = load_split(ckpt, data_dir, split, limit)?;
    let seed = common.seed.unwrap_or(0);
    let mut manifest = RunManifest::new("eval", Some(seed), common.threads);
    manifest.inputs = inputs(ckpt, data_dir)?;
    let opts = EvalOptions {
        metrics: metrics.clone(),
        level,
        n_subsets: subsets,
        seed,
        baseline: baseline_of(&ck),
    };
    let report = eval::evaluate(&ck.model, &ds, &opts, provenance(ckpt, data_dir, &ck, seed)?)?;
    let mut outputs = Outputs::default();
    outputs.add(out.join("report.json"), json(&report)?);
    outputs.add(out.join("metrics.csv"), report.metrics_csv());
    outputs.add(out.join("samples.csv"), report.samples_csv());
    if metrics.contains(&Metric::Pruning) {
        outputs.add(out.join("pruning.csv"), report.pruning_csv());
        let pts = |f: fn(&eval::PrunePoint) -> f64| report.pruning.iter().map(|p| (p.prefix as f64, f(p))).collect::<Vec<_>>();
        let series = vec![
            ("covered".to_string(), pts(|p| p.covered)),
            ("uncovered".to_string(), pts(|p| p.uncovered)),
            ("masked value".to_string(), pts(|p| p.masked_value)),
        ];
        outputs.add(
            out.join("pruning.svg"),
            svg::line_plot("Time-prefix pruning", "masked leading blocks", "impact", &series),
        );
    }
    outputs.commit(manifest, &out.join("run_manifest.json"))
}

#[derive(Serialize)]
struct CompareSample {
    sample_id: String,
    predicted_class: usize,
    spearman: Option<f64>,
    pearson: Option<f64>,
    max_abs_error: f64,
    oracle_efficiency_residual: f64,
    amortized_efficiency_residual: f64,
    forward_passes: u64,
}

#[derive(Serialize)]
struct CompareSummary {
    mean_spearman: f64,
    mean_pearson: f64,
    n_undefined: usize,
    max_oracle_efficiency_residual: f64,
    max_amortized_efficiency_residual: f64,
    mean_abs_error: f64,
}

#[derive(Serialize)]
struct CompareOutput {
    schema_version: u32,
    oracle: OracleConfig,
    summary: CompareSummary,
    samples: Vec<CompareSample>,
}

#[allow(clippy::too_many_arguments)]
fn oracle_compare(
    ckpt: &Path,
    data_dir: &Path,
    method: OracleMethod,
    budget: usize,
    level: Level,
    split: Split,
    limit: Option<usize>,
    out: &Path,
    common: &Common,
) -> Result<()> {
    check_threads(common)?;
    let (ck, ds) = load_split(ckpt, data_dir, split, limit)?;
    let seed = common.seed.unwrap_or(0);
    let mut manifest = RunManifest::new("oracle-compare", Some(seed), common.threads);
    manifest.inputs = inputs(ckpt, data_dir)?;
    let model = &ck.model;
    let baseline = baseline_of(&ck);
    let cfg = OracleConfig {
        method,
        level,
        n_samples: budget,
        seed,
    };
    let attrs = model.explain_batch(&ds.all()?.x, baseline)?;
    let mut samples = Vec::with_capacity(ds.len());
    for (a, s) in attrs.iter().zip(&ds.samples) {
        let o = oracle_explain(model, &s.x, &cfg, baseline)?;
        let y = a.predicted_class;
        let amortized = a.aggregate(level, y);
        let oracle = &o.estimate.phi[y];
        let residual = |phi: &dyn Fn(usize) -> f64, full: &[f64], empty: &[f64]| {
            (0..full.len()).map(|k| (phi(k) - (full[k] - empty[k])).abs()).fold(0.0, f64::max)
        };
        let est = &o.estimate;
        samples.push(CompareSample {
            sample_id: s.id.clone(),
            predicted_class: y,
            spearman: eval::spearman(&amortized, oracle),
            pearson: eval::pearson(&amortized, oracle),
            max_abs_error: amortized.iter().zip(oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
            oracle_efficiency_residual: residual(&|k| est.phi[k].iter().sum(), &est.v_full, &est.v_empty),
            amortized_efficiency_residual: residual(&|k| a.total(k), &a.v_full, &a.v_empty),
            forward_passes: o.forward_passes,
        });
    }
    let sp: Vec<Option<f64>> = samples.iter().map(|s| s.spearman).collect();
    let pe: Vec<Option<f64>> = samples.iter().map(|s| s.pearson).collect();
    let summary = CompareSummary {
        mean_spearman: eval::mean_defined(&sp).mean,
        mean_pearson: eval::mean_defined(&pe).mean,
        n_undefined: eval::mean_defined(&sp).n_undefined,
        max_oracle_efficiency_residual: samples.iter().map(|s| s.oracle_efficiency_residual).fold(0.0, f64::max),
        max_amortized_efficiency_residual: samples.iter().map(|s| s.amortized_efficiency_residual).fold(0.0, f64::max),
        mean_abs_error: samples.iter().map(|s| s.max_abs_error).sum::<f64>() / samples.len() as f64,
    };
    let mut csv = String::from("sample_id,predicted_class,spearman,pearson,max_abs_error,oracle_efficiency_residual,forward_passes\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for s in &samples {
        csv.push_str(&format!(
            "{},{},{},{},{:?},{:?},{}\n",
            s.sample_id,
            s.predicted_class,
            opt(s.spearman),
            opt(s.pearson),
            s.max_abs_error,
            s.oracle_efficiency_residual,
            s.forward_passes
        ));
    }
    let doc = CompareOutput {
        schema_version: COMPARE_SCHEMA_VERSION,
        oracle: cfg,
        summary,
        samples,
    };
    let mut outputs = Outputs::default();
    outputs.add(out.join("compare.json"), json(&doc)?);
    outputs.add(out.join("compare.csv"), csv);
    outputs.commit(manifest, &out.join("run_manifest.json"))
}

#[derive(Serialize)]
struct NoiseOutput<'a> {
    schema_version: u32,
    config: &'a NoiseSweepConfig,
    report: &'a eval::NoiseSweepReport,
}

fn noise_sweep(config: &Path, sigmas: Option<Vec<f64>>, out: &Path, common: &Common) -> Result<()> {
    check_threads(common)?;
    let text = read_text(config)?;
    let mut cfg: NoiseSweepConfig = parse_toml_with_env(&text, std::env::vars())?;
    if let Some(s) = sigmas {
        cfg.sigmas = s;
    }
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    let mut manifest = RunManifest::new("noise-sweep", Some(cfg.data.seed), common.threads);
    manifest.config = Some(FileRecord::of(config, text.as_bytes()));
    let report = eval::noise_sweep(&cfg)?;
    let mut outputs = Outputs::default();
    outputs.add(
        out.join("report.json"),
        json(&NoiseOutput {
            schema_version: NOISE_SCHEMA_VERSION,
            config: &cfg,
            report: &report,
        })?,
    );
    outputs.add(out.join("rows.csv"), report.rows_csv());
    outputs.add(out.join("summary.csv"), report.summary_csv());
    let pts = |f: fn(&eval::NoiseSummary) -> f64| report.summary.iter().map(|s| (s.sigma, f(s))).collect::<Vec<_>>();
    let metric = vec![
        ("regularized".to_string(), pts(|s| s.regularized_metric)),
        ("unregularized".to_string(), pts(|s| s.unregularized_metric)),
    ];
    outputs.add(out.join("noise_metric.svg"), svg::line_plot("Test metric under noise", "sigma", "metric", &metric));
    let phi = vec![
        ("regularized".to_string(), pts(|s| s.regularized_abs_phi)),
        ("unregularized".to_string(), pts(|s| s.unregularized_abs_phi)),
    ];
    outputs.add(
        out.join("noise_phi.svg"),
        svg::line_plot("Mean |phi| of the noisy feature", "sigma", "mean |phi|", &phi),
    );
    outputs.commit(manifest, &out.join("run_manifest.json"))
}

#[derive(Serialize)]
struct LatencyCounts {
    schema_version: u32,
    n_samples: usize,
    oracle: OracleConfig,
    amortized_passes: u64,
    oracle_passes: u64,
    amortized_passes_per_sample: f64,
    oracle_passes_per_sample: f64,
    pass_ratio: f64,
}

#[derive(Serialize)]
struct LatencyTiming {
    schema_version: u32,
    amortized_seconds: f64,
    oracle_seconds: f64,
    wall_clock_ratio: f64,
}

#[allow(clippy::too_many_arguments)]
fn bench_latency(
    ckpt: &Path,
    data_dir: &Path,
    budget: usize,
    method: OracleMethod,
    level: Level,
    split: Split,
    limit: Option<usize>,
    out: &Path,
    common: &Common,
) -> Result<()> {
    check_threads(common)?;
    let (ck, ds) = load_split(ckpt, data_dir, split, limit)?;
    let seed = common.seed.unwrap_or(0);
    let mut manifest = RunManifest::new("bench-latency", Some(seed), common.threads);
    manifest.inputs = inputs(ckpt, data_dir)?;
    let cfg = OracleConfig {
        method,
        level,
        n_samples: budget,
        seed,
    };
    let xs: Vec<_> = ds.samples.iter().map(|s| &s.x).collect();
    let r: LatencyReport = eval::latency_benchmark(&ck.model, &xs, &cfg, baseline_of(&ck))?;
    let counts = LatencyCounts {
        schema_version: LATENCY_SCHEMA_VERSION,
        n_samples: r.n_samples,
        oracle: r.oracle.clone(),
        amortized_passes: r.amortized_passes,
        oracle_passes: r.oracle_passes,
        amortized_passes_per_sample: r.amortized_passes_per_sample,
        oracle_passes_per_sample: r.oracle_passes_per_sample,
        pass_ratio: r.pass_ratio,
    };
    let timing = LatencyTiming {
        schema_version: LATENCY_SCHEMA_VERSION,
        amortized_seconds: r.amortized_seconds,
        oracle_seconds: r.oracle_seconds,
        wall_clock_ratio: r.wall_clock_ratio,
    };
    println!(
        "passes/sample: amortized {:.1}, oracle {:.1} (ratio {:.1}x); wall clock ratio {:.1}x",
        r.amortized_passes_per_sample, r.oracle_passes_per_sample, r.pass_ratio, r.wall_clock_ratio
    );
    let mut outputs = Outputs::default();
    outputs.add(out.join("report.json"), json(&counts)?);
    outputs.add_unhashed(out.join("timing.json"), json(&timing)?);
    outputs.commit(manifest, &out.join("run_manifest.json"))
}
