//! Experiment configuration: parsing, validation and the derived models.

use std::fmt;
use std::path::PathBuf;

use ellipse_robust::applications::TailModel;
use ellipse_robust::contamination::AdversaryStrategy;
use ellipse_robust::elliptical::{EllipticalModel, RadialLaw};
use ellipse_robust::linalg::{matrix_power, sym_eig, trace_normalize, Power, ScatterMatrix, SymMatrix};
use ellipse_robust::pipeline::PipelineConfig;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Largest supported dimension.
pub const MAX_DIM: usize = 64;

/// A config problem located by a JSON pointer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub pointer: String,
    pub message: String,
}

impl ConfigError {
    fn at(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = if self.pointer.is_empty() { "/" } else { &self.pointer };
        write!(f, "config error at {p}: {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub contamination: ContaminationSpec,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d: usize,
    /// Points per dataset, before symmetrization.
    pub n: usize,
    #[serde(default)]
    pub scatter: ScatterSource,
    #[serde(default = "default_radial")]
    pub radial: RadialLaw,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<Vec<f64>>,
}

fn default_radial() -> RadialLaw {
    RadialLaw::ChiD
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScatterSource {
    #[default]
    Identity,
    Diagonal {
        values: Vec<f64>,
    },
    Explicit {
        matrix: Vec<Vec<f64>>,
    },
    /// Geometric spectrum with the given effective rank, randomly rotated.
    Random {
        erk_target: f64,
        #[serde(default)]
        seed: u64,
    },
}

/// One or more contamination rates. A scalar in the input stays a scalar
/// on output.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonGrid {
    pub values: Vec<f64>,
    scalar: bool,
}

impl EpsilonGrid {
    pub fn single(eps: f64) -> Self {
        Self {
            values: vec![eps],
            scalar: true,
        }
    }

    pub fn list(values: Vec<f64>) -> Self {
        Self { values, scalar: false }
    }

    fn pointer(&self, i: usize) -> String {
        if self.scalar {
            "/contamination/epsilon".into()
        } else {
            format!("/contamination/epsilon/{i}")
        }
    }
}

impl Default for EpsilonGrid {
    fn default() -> Self {
        Self::single(0.0)
    }
}

impl Serialize for EpsilonGrid {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.scalar && self.values.len() == 1 {
            self.values[0].serialize(s)
        } else {
            self.values.serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for EpsilonGrid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            One(f64),
            Many(Vec<f64>),
        }
        match Raw::deserialize(d).map_err(|_| serde::de::Error::custom("expected a number or a list of numbers"))? {
            Raw::One(v) => Ok(Self::single(v)),
            Raw::Many(v) => Ok(Self::list(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContaminationSpec {
    #[serde(default)]
    pub epsilon: EpsilonGrid,
    #[serde(default)]
    pub strategy: StrategySpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategySpec {
    #[default]
    None,
    SpikeCluster {
        direction: Direction,
        /// Distance of the spike from the location; defaults to `10 sqrt(d)`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        magnitude: Option<f64>,
    },
    ScaleInflation {
        factor: f64,
    },
    /// Outliers from the same model with the scatter multiplied by `scale`.
    HuberMixture {
        scale: f64,
        #[serde(default = "default_radial")]
        radial: RadialLaw,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Direction {
    /// Coordinate axis, 0-based.
    Axis(usize),
    /// Eigenvector of the scatter matrix, 0 being the largest eigenvalue.
    Eigenvector(usize),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default = "TailModel::hanson_wright")]
    pub tail: TailModel,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            tail: TailModel::hanson_wright(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    #[default]
    Binary,
    Csv,
}

impl DataFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DataFormat::Binary => "bin",
            DataFormat::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub format: DataFormat,
    /// Record wall-clock times in bench results. Off by default so that
    /// results are reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => {}
        }
    }
    out
}

impl ExperimentConfig {
    /// Parses and validates a JSON config.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = pointer_of(e.path());
            let inner = e.into_inner().to_string();
            let message = inner.split(" at line ").next().unwrap_or(&inner).to_string();
            ConfigError::at(pointer, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        let d = m.d;
        if !(2..=MAX_DIM).contains(&d) {
            return Err(ConfigError::at("/model/d", format!("dimension must be in 2..={MAX_DIM}, got {d}")));
        }
        if m.n == 0 {
            return Err(ConfigError::at("/model/n", "sample size must be positive"));
        }
        if let Some(loc) = &m.location {
            if loc.len() != d || loc.iter().any(|v| !v.is_finite()) {
                return Err(ConfigError::at("/model/location", format!("expected {d} finite values")));
            }
        }
        m.radial
            .validate()
            .map_err(|e| ConfigError::at("/model/radial", e.to_string()))?;
        self.scatter_truth()?;
        for (i, &e) in self.contamination.epsilon.values.iter().enumerate() {
            if !(0.0..1.0 / 3.0).contains(&e) {
                return Err(ConfigError::at(
                    self.contamination.epsilon.pointer(i),
                    format!("epsilon must lie in [0, 1/3), got {e}"),
                ));
            }
        }
        if self.contamination.epsilon.values.is_empty() {
            return Err(ConfigError::at("/contamination/epsilon", "empty epsilon grid"));
        }
        self.validate_strategy()?;
        if self.seeds.is_empty() {
            return Err(ConfigError::at("/seeds", "at least one seed is required"));
        }
        let mut p = self.estimator.pipeline.clone();
        p.epsilon = 0.0;
        p.validate().map_err(|e| ConfigError::at("/estimator/pipeline", e.to_string()))?;
        Ok(())
    }

    fn validate_strategy(&self) -> Result<(), ConfigError> {
        let d = self.model.d;
        let base = "/contamination/strategy";
        match &self.contamination.strategy {
            StrategySpec::None => {}
            StrategySpec::SpikeCluster { direction, magnitude } => {
                match direction {
                    Direction::Axis(k) | Direction::Eigenvector(k) if *k >= d => {
                        return Err(ConfigError::at(format!("{base}/direction"), format!("index {k} out of range for d = {d}")));
                    }
                    Direction::Vector(v) if v.len() != d || !v.iter().any(|x| *x != 0.0) || v.iter().any(|x| !x.is_finite()) => {
                        return Err(ConfigError::at(
                            format!("{base}/direction/vector"),
                            format!("expected {d} finite values, not all zero"),
                        ));
                    }
                    _ => {}
                }
                if magnitude.is_some_and(|m| !m.is_finite()) {
                    return Err(ConfigError::at(format!("{base}/magnitude"), "magnitude must be finite"));
                }
            }
            StrategySpec::ScaleInflation { factor } => {
                if !factor.is_finite() {
                    return Err(ConfigError::at(format!("{base}/factor"), "factor must be finite"));
                }
            }
            StrategySpec::HuberMixture { scale, radial } => {
                if !(*scale > 0.0 && scale.is_finite()) {
                    return Err(ConfigError::at(format!("{base}/scale"), "scale must be positive"));
                }
                radial
                    .validate()
                    .map_err(|e| ConfigError::at(format!("{base}/radial"), e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Ground-truth scatter matrix, normalized to trace `d`.
    pub fn scatter_truth(&self) -> Result<ScatterMatrix, ConfigError> {
        let d = self.model.d;
        let ptr = "/model/scatter";
        let raw = match &self.model.scatter {
            ScatterSource::Identity => SymMatrix::identity(d),
            ScatterSource::Diagonal { values } => {
                if values.len() != d || values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return Err(ConfigError::at(format!("{ptr}/values"), format!("expected {d} positive values")));
                }
                SymMatrix::from_diagonal(values)
            }
            ScatterSource::Explicit { matrix } => {
                if matrix.len() != d || matrix.iter().any(|r| r.len() != d) {
                    return Err(ConfigError::at(format!("{ptr}/matrix"), format!("expected a {d}x{d} matrix")));
                }
                SymMatrix::from_rows(matrix).map_err(|e| ConfigError::at(format!("{ptr}/matrix"), e.to_string()))?
            }
            ScatterSource::Random { erk_target, seed } => {
                if !(*erk_target >= 1.0 && *erk_target <= d as f64) {
                    return Err(ConfigError::at(
                        format!("{ptr}/erk_target"),
                        format!("effective rank must lie in [1, {d}], got {erk_target}"),
                    ));
                }
                random_scatter(d, *erk_target, *seed)
            }
        };
        trace_normalize(&raw).map_err(|e| ConfigError::at(ptr, e.to_string()))
    }

    pub fn model_for(&self) -> Result<EllipticalModel, ConfigError> {
        let truth = self.scatter_truth()?;
        let a = matrix_power(truth.sym(), Power::Half).map_err(|e| ConfigError::at("/model/scatter", e.to_string()))?;
        let loc = self.model.location.clone().unwrap_or_else(|| vec![0.0; self.model.d]);
        EllipticalModel::new(loc, a.into_inner(), self.model.radial).map_err(|e| ConfigError::at("/model", e.to_string()))
    }

    /// The adversary with config-relative quantities resolved.
    pub fn strategy(&self) -> Result<AdversaryStrategy, ConfigError> {
        let d = self.model.d;
        let model = self.model_for()?;
        Ok(match &self.contamination.strategy {
            StrategySpec::None => AdversaryStrategy::NoOp,
            StrategySpec::SpikeCluster { direction, magnitude } => {
                let dir = match direction {
                    Direction::Axis(k) => {
                        let mut v = vec![0.0; d];
                        v[*k] = 1.0;
                        v
                    }
                    Direction::Eigenvector(k) => {
                        let truth = self.scatter_truth()?;
                        let eig = sym_eig(truth.matrix()).map_err(|e| ConfigError::at("/model/scatter", e.to_string()))?;
                        eig.vectors.column(*k).iter().copied().collect()
                    }
                    Direction::Vector(v) => v.clone(),
                };
                AdversaryStrategy::SpikeCluster {
                    direction: dir,
                    magnitude: magnitude.unwrap_or(10.0 * (d as f64).sqrt()),
                    center: self.model.location.clone(),
                }
            }
            StrategySpec::ScaleInflation { factor } => AdversaryStrategy::ScaleInflation(*factor),
            StrategySpec::HuberMixture { scale, radial } => {
                let mixing = model.mixing() * scale.sqrt();
                let outlier = EllipticalModel::new(model.location().to_vec(), mixing, *radial)
                    .map_err(|e| ConfigError::at("/contamination/strategy", e.to_string()))?;
                AdversaryStrategy::HuberMixture(outlier)
            }
        })
    }

    pub fn strategy_name(&self) -> &'static str {
        match self.contamination.strategy {
            StrategySpec::None => "none",
            StrategySpec::SpikeCluster { .. } => "spike_cluster",
            StrategySpec::ScaleInflation { .. } => "scale_inflation",
            StrategySpec::HuberMixture { .. } => "huber_mixture",
        }
    }
}

/// Eigenvalues `rho^i`, with `rho` chosen by bisection so that the effective
/// rank `sum rho^i` hits the target, rotated by a Haar-random orthogonal
/// matrix.
fn random_scatter(d: usize, erk: f64, seed: u64) -> SymMatrix {
    let erk_of = |rho: f64| (0..d).map(|i| rho.powi(i as i32)).sum::<f64>();
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if erk_of(mid) < erk {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let rho = 0.5 * (lo + hi);
    let values: Vec<f64> = (0..d).map(|i| rho.powi(i as i32)).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    SymMatrix::from_diagonal(&values).conjugate(&q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ellipse_robust::linalg::effective_rank;

    const MINIMAL: &str = r#"{"model": {"d": 3, "n": 100}, "contamination": {"epsilon": 0.0}}"#;

    #[test]
    fn minimal_config_parses() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.model.d, 3);
        assert_eq!(c.contamination.epsilon.values, vec![0.0]);
        assert_eq!(c.seeds, vec![0]);
        assert!(c.to_json().contains("\"epsilon\": 0.0"));
    }

    #[test]
    fn invalid_epsilon_points_at_field() {
        let e = ExperimentConfig::from_json(r#"{"model": {"d": 3, "n": 100}, "contamination": {"epsilon": 0.5}}"#)
            .unwrap_err();
        assert_eq!(e.pointer, "/contamination/epsilon");
        let e = ExperimentConfig::from_json(r#"{"model": {"d": 3, "n": 100}, "contamination": {"epsilon": [0.1, 0.4]}}"#)
            .unwrap_err();
        assert_eq!(e.pointer, "/contamination/epsilon/1");
    }

    #[test]
    fn schema_errors_carry_pointer() {
        let e = ExperimentConfig::from_json(r#"{"model": {"d": "three", "n": 100}}"#).unwrap_err();
        assert_eq!(e.pointer, "/model/d");
        let e = ExperimentConfig::from_json(r#"{"model": {"d": 3, "n": 100, "colour": 1}}"#).unwrap_err();
        assert_eq!(e.pointer, "/model/colour");
        assert!(e.message.contains("colour"));
        let e = ExperimentConfig::from_json(r#"{"model": {"d": 3, "n": 10}, "seeds": [1, -2]}"#).unwrap_err();
        assert_eq!(e.pointer, "/seeds/1");
        let e = ExperimentConfig::from_json(
            r#"{"model": {"d": 3, "n": 10, "scatter": {"kind": "diagonal", "values": [1, 2]}}}"#,
        )
        .unwrap_err();
        assert_eq!(e.pointer, "/model/scatter/values");
    }

    #[test]
    fn round_trip_is_identity() {
        let text = r#"{
            "model": {"d": 4, "n": 500, "scatter": {"kind": "random", "erk_target": 2.5, "seed": 3},
                      "radial": {"kind": "student_t", "nu": 3.0}},
            "contamination": {"epsilon": [0.02, 0.05],
                              "strategy": {"kind": "spike_cluster", "direction": {"eigenvector": 1}}},
            "estimator": {"pipeline": {"coarse_c": 2.5}, "tail": {"kind": "sub_exponential", "p": 4}},
            "seeds": [1, 2, 3],
            "output": {"format": "csv", "record_wall_time": true}
        }"#;
        let a = ExperimentConfig::from_json(text).unwrap();
        let b = ExperimentConfig::from_json(&a.to_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn random_scatter_hits_erk_target() {
        let c = ExperimentConfig::from_json(
            r#"{"model": {"d": 8, "n": 10, "scatter": {"kind": "random", "erk_target": 3.0, "seed": 5}}}"#,
        )
        .unwrap();
        let s = c.scatter_truth().unwrap();
        assert!((effective_rank(&s) - 3.0).abs() < 1e-8);
        assert!(s.is_normalized());
    }

    #[test]
    fn spike_defaults() {
        let c = ExperimentConfig::from_json(
            r#"{"model": {"d": 4, "n": 10}, "contamination": {"epsilon": 0.1,
                "strategy": {"kind": "spike_cluster", "direction": {"axis": 2}}}}"#,
        )
        .unwrap();
        match c.strategy().unwrap() {
            AdversaryStrategy::SpikeCluster { direction, magnitude, .. } => {
                assert_eq!(direction, vec![0.0, 0.0, 1.0, 0.0]);
                assert!((magnitude - 20.0).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
