//! The `simulate`, `estimate` and `bench` subcommands.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ellipse_robust::applications::{estimate_scale, projector_error, top_eigenvector, TailModel};
use ellipse_robust::contamination::{corrupt, CorruptedSample};
use ellipse_robust::elliptical::{sample, SampleSet};
use ellipse_robust::filter::TraceRecord;
use ellipse_robust::io::{read_points, write_points};
use ellipse_robust::linalg::{ScatterMatrix, SymMatrix};
use ellipse_robust::pipeline::{estimate_scatter, naive_sign_covariance, ErrorMetrics, PipelineConfig, PipelineReport};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const RESULTS_HEADER: [&str; 12] = [
    "seed",
    "epsilon",
    "d",
    "n",
    "strategy",
    "estimator",
    "rel_spectral",
    "rel_frobenius",
    "pca_projector_error",
    "scale_error",
    "wall_time_ms",
    "filter_iterations",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Pipeline,
    NaiveSignCov,
    OracleClean,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Pipeline, Estimator::NaiveSignCov, Estimator::OracleClean];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Pipeline => "pipeline",
            Estimator::NaiveSignCov => "naive-sign-cov",
            Estimator::OracleClean => "oracle-clean",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown estimator {s:?}; expected pipeline, naive-sign-cov or oracle-clean")))
    }
}

fn rows(m: &SymMatrix) -> Vec<Vec<f64>> {
    m.to_rows()
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Clean and corrupted samples for one grid cell. The corruption uses the
/// same seed for every epsilon, so corrupted sets are nested in epsilon.
pub fn generate(cfg: &ExperimentConfig, epsilon: f64, seed: u64) -> Result<(SampleSet, CorruptedSample), CliError> {
    let model = cfg.model_for()?;
    let clean = sample(&model, cfg.model.n, seed).map_err(CliError::Abort)?;
    let corrupted = corrupt(&clean, epsilon, &cfg.strategy()?, seed).map_err(CliError::Abort)?;
    Ok((clean, corrupted))
}

pub fn dataset_name(epsilon: f64, seed: u64, ext: &str) -> String {
    format!("eps{epsilon}_seed{seed}.{ext}")
}

pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<usize, CliError> {
    create_dir(out)?;
    let truth = cfg.scatter_truth()?;
    let cov = cfg.model_for()?.covariance().map_err(CliError::Abort)?;
    let ext = cfg.output.format.extension();
    let mut datasets = Vec::new();
    for &eps in &cfg.contamination.epsilon.values {
        for &seed in &cfg.seeds {
            let (_, c) = generate(cfg, eps, seed)?;
            let file = dataset_name(eps, seed, ext);
            write_points(c.data().points(), &out.join(&file)).map_err(|e| CliError::Io(e.to_string()))?;
            datasets.push(json!({
                "file": file,
                "epsilon": eps,
                "seed": seed,
                "corrupted": c.corrupted_count(),
            }));
        }
    }
    let manifest = json!({
        "config": cfg,
        "d": cfg.model.d,
        "n": cfg.model.n,
        "scatter": rows(truth.sym()),
        "covariance": cov.as_ref().map(rows),
        "datasets": datasets,
    });
    write_file(&out.join("config.json"), &cfg.to_json())?;
    write_file(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest).expect("json"))?;
    log::info!("wrote {} datasets to {}", datasets.len(), out.display());
    Ok(datasets.len())
}

/// Reads the ground-truth scatter from a manifest written by `simulate`.
pub fn read_truth(path: &Path) -> Result<ScatterMatrix, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let m: Vec<Vec<f64>> = serde_json::from_value(v["scatter"].clone())
        .map_err(|e| CliError::Usage(format!("{}: no usable \"scatter\" matrix: {e}", path.display())))?;
    SymMatrix::from_rows(&m)
        .and_then(ScatterMatrix::new)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct StageRecord<'a> {
    stage: usize,
    #[serde(flatten)]
    record: &'a TraceRecord,
}

fn pipeline_json(r: &PipelineReport) -> Value {
    json!({
        "scatter": rows(r.scatter.sym()),
        "cumulative": r.cumulative.iter().map(|c| rows(c.sym())).collect::<Vec<_>>(),
        "sizes": r.sizes,
        "dropped_pairs": r.dropped_pairs,
        "band_fraction": r.band_fraction,
        "filter_rounds": r.filter_rounds(),
        "stops": r.stages.iter().map(|s| s.stop).collect::<Vec<_>>(),
        "metrics": r.metrics,
    })
}

pub struct EstimateArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub estimator: Estimator,
    pub pipeline: PipelineConfig,
    pub tail: TailModel,
    pub truth: Option<ScatterMatrix>,
}

/// Runs one estimator on a dataset file. On an estimator failure the report
/// records the reason and the error is returned.
pub fn estimate(a: &EstimateArgs) -> Result<(), CliError> {
    create_dir(a.out)?;
    let points = read_points(a.data).map_err(|e| match e {
        ellipse_robust::Error::Io(io) => CliError::Io(format!("cannot read {}: {io}", a.data.display())),
        other => CliError::Parse(other),
    })?;
    let data = SampleSet::new(points, 0).map_err(CliError::Abort)?;
    let report_path = a.out.join("report.json");
    let trace_path = a.out.join("trace.jsonl");
    let base = json!({
        "estimator": a.estimator.name(),
        "data": a.data.display().to_string(),
        "n": data.len(),
        "d": data.dim(),
        "epsilon": a.pipeline.epsilon,
    });
    let result = match a.estimator {
        Estimator::Pipeline => estimate_scatter(&data, &a.pipeline, a.truth.as_ref()).map(|r| {
            let mut v = pipeline_json(&r);
            v["scale"] = match estimate_scale(&data, &r.scatter, a.pipeline.epsilon, a.tail) {
                Ok(s) => json!({
                    "gamma": s.gamma,
                    "trimmed_mean": s.trimmed_mean,
                    "kurtosis": s.kurtosis,
                    "tail_flag": s.tail_flag,
                    "moment_order": s.moment_order,
                    "covariance": rows(&s.covariance),
                }),
                Err(e) => json!({ "error": e.to_string() }),
            };
            (v, Some(r))
        }),
        Estimator::NaiveSignCov => naive_sign_covariance(&data).and_then(|s| {
            let metrics = a.truth.as_ref().map(|t| ErrorMetrics::of(t, &s)).transpose()?;
            Ok((json!({ "scatter": rows(s.sym()), "metrics": metrics }), None))
        }),
        Estimator::OracleClean => {
            return Err(CliError::Usage(
                "oracle-clean needs the uncorrupted sample and is only available in bench".into(),
            ))
        }
    };
    let mut trace = BufWriter::new(
        fs::File::create(&trace_path).map_err(|e| CliError::Io(format!("cannot write {}: {e}", trace_path.display())))?,
    );
    let outcome = match result {
        Ok((body, report)) => {
            if let Some(r) = &report {
                for (i, st) in r.stages.iter().enumerate() {
                    for rec in &st.trace {
                        let line = serde_json::to_string(&StageRecord { stage: i + 1, record: rec }).expect("json");
                        writeln!(trace, "{line}").map_err(|e| CliError::Io(e.to_string()))?;
                    }
                }
            }
            let mut v = base;
            v["status"] = json!("ok");
            for (k, val) in body.as_object().expect("object").iter() {
                v[k] = val.clone();
            }
            write_file(&report_path, &serde_json::to_string_pretty(&v).expect("json"))?;
            Ok(())
        }
        Err(e) => {
            let mut v = base;
            v["status"] = json!("aborted");
            v["reason"] = json!(e.kind());
            v["stage"] = json!(e.stage());
            v["message"] = json!(e.to_string());
            write_file(&report_path, &serde_json::to_string_pretty(&v).expect("json"))?;
            Err(CliError::Abort(e))
        }
    };
    trace.flush().map_err(|e| CliError::Io(e.to_string()))?;
    outcome
}

/// One line of the results table. Missing values are written as empty
/// fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub epsilon: f64,
    pub d: usize,
    pub n: usize,
    pub strategy: String,
    pub estimator: Estimator,
    pub rel_spectral: Option<f64>,
    pub rel_frobenius: Option<f64>,
    pub pca_projector_error: Option<f64>,
    pub scale_error: Option<f64>,
    pub wall_time_ms: f64,
    pub filter_iterations: Option<usize>,
}

impl ResultRow {
    fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.seed.to_string(),
            self.epsilon.to_string(),
            self.d.to_string(),
            self.n.to_string(),
            self.strategy.clone(),
            self.estimator.name().to_string(),
            opt(self.rel_spectral),
            opt(self.rel_frobenius),
            opt(self.pca_projector_error),
            opt(self.scale_error),
            self.wall_time_ms.to_string(),
            self.filter_iterations.map(|v| v.to_string()).unwrap_or_default(),
        ]
    }
}

struct CellTruth {
    scatter: ScatterMatrix,
    /// `d / tr(Cov)`, when the covariance exists.
    gamma: Option<f64>,
    /// Top eigenvector of the scatter, when its top eigenvalue is simple.
    top: Option<Vec<f64>>,
}

fn cell_truth(cfg: &ExperimentConfig) -> Result<CellTruth, CliError> {
    let scatter = cfg.scatter_truth()?;
    let cov = cfg.model_for()?.covariance().map_err(CliError::Abort)?;
    let d = cfg.model.d as f64;
    let eig = scatter.sym().eig();
    let simple = eig.values[0] - eig.values[1] > 1e-9 * eig.values[0];
    Ok(CellTruth {
        gamma: cov.map(|c| d / c.trace()),
        top: simple.then(|| top_eigenvector(scatter.sym())),
        scatter,
    })
}

fn run_cell(
    cfg: &ExperimentConfig,
    truth: &CellTruth,
    est: Estimator,
    data: &SampleSet,
    epsilon: f64,
) -> Result<(ScatterMatrix, Option<usize>), ellipse_robust::Error> {
    let pc = cfg.estimator.pipeline.clone().with_epsilon(epsilon);
    match est {
        Estimator::Pipeline | Estimator::OracleClean => {
            let r = estimate_scatter(data, &pc, Some(&truth.scatter))?;
            let rounds = r.filter_rounds();
            Ok((r.scatter, Some(rounds)))
        }
        Estimator::NaiveSignCov => Ok((naive_sign_covariance(data)?, Some(0))),
    }
}

pub struct BenchSummary {
    pub rows: usize,
    pub failures: usize,
}

/// Runs the full grid and writes `results.csv` (and `failures.jsonl` when a
/// cell aborts). Rows are ordered by epsilon, seed, then estimator.
pub fn bench(cfg: &ExperimentConfig, out: &Path, only: Option<Estimator>) -> Result<BenchSummary, CliError> {
    create_dir(out)?;
    let truth = cell_truth(cfg)?;
    let estimators: Vec<Estimator> = match only {
        Some(e) => vec![e],
        None => Estimator::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &eps in &cfg.contamination.epsilon.values {
        for &seed in &cfg.seeds {
            let (clean, corrupted) = generate(cfg, eps, seed)?;
            for &est in &estimators {
                // The oracle sees the clean sample and is told there is no
                // contamination.
                let (data, rate) = match est {
                    Estimator::OracleClean => (&clean, 0.0),
                    _ => (corrupted.data(), eps),
                };
                let start = Instant::now();
                let result = run_cell(cfg, &truth, est, data, rate);
                let elapsed = start.elapsed().as_secs_f64() * 1e3;
                let mut row = ResultRow {
                    seed,
                    epsilon: eps,
                    d: cfg.model.d,
                    n: cfg.model.n,
                    strategy: cfg.strategy_name().to_string(),
                    estimator: est,
                    rel_spectral: None,
                    rel_frobenius: None,
                    pca_projector_error: None,
                    scale_error: None,
                    wall_time_ms: if cfg.output.record_wall_time { (elapsed * 1e3).round() / 1e3 } else { 0.0 },
                    filter_iterations: None,
                };
                match result.and_then(|(s, iters)| Ok((ErrorMetrics::of(&truth.scatter, &s)?, s, iters))) {
                    Ok((m, s, iters)) => {
                        row.rel_spectral = Some(m.rel_spectral);
                        row.rel_frobenius = Some(m.rel_frobenius);
                        row.filter_iterations = iters;
                        row.pca_projector_error = truth.top.as_ref().map(|t| projector_error(&top_eigenvector(s.sym()), t));
                        if let Some(g) = truth.gamma {
                            match estimate_scale(data, &s, rate, cfg.estimator.tail) {
                                Ok(sc) => row.scale_error = Some((sc.gamma / g - 1.0).abs()),
                                Err(e) => log::warn!("scale estimate failed (eps {eps}, seed {seed}, {}): {e}", est.name()),
                            }
                        }
                    }
                    Err(e) => {
                        log::warn!("{} aborted at eps {eps}, seed {seed}: {e}", est.name());
                        failures.push(json!({
                            "seed": seed,
                            "epsilon": eps,
                            "estimator": est.name(),
                            "reason": e.kind(),
                            "message": e.to_string(),
                        }));
                    }
                }
                rows.push(row);
            }
        }
    }
    let path = out.join("results.csv");
    let file = fs::File::create(&path).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(RESULTS_HEADER).map_err(|e| CliError::Io(e.to_string()))?;
    for r in &rows {
        w.write_record(r.fields()).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    let fail_path = out.join("failures.jsonl");
    if failures.is_empty() {
        let _ = fs::remove_file(&fail_path);
    } else {
        let text: String = failures.iter().map(|f| format!("{f}\n")).collect();
        write_file(&fail_path, &text)?;
    }
    Ok(BenchSummary {
        rows: rows.len(),
        failures: failures.len(),
    })
}

pub fn default_out(cfg: Option<&ExperimentConfig>, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.and_then(|c| c.output.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}
