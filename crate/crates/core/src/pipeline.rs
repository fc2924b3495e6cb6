//! The three-stage scatter estimator.
//!
//! Input points are symmetrized in pairs (so the location drops out),
//! projected to the radius-`sqrt(d)` sphere and split into three disjoint
//! parts. Each stage filters one part:
//!
//! 1. a coarse estimate from the Euclidean oracle on re-whitened sign outer
//!    products, with a loose stopping threshold;
//! 2. a spectral refinement on signs whitened by stage 1, using the
//!    sum-of-squares oracle;
//! 3. a Frobenius-norm pass on signs whitened by stages 1 and 2, using the
//!    Euclidean oracle on flattened outer products with no re-transform.
//!
//! The stages are composed symmetrically and the result is normalized to
//! trace `d`. Symmetrizing turns an `eps`-corruption of the points into at
//! most a `2 eps`-corruption of the pairs, and the filters are run at that
//! rate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::contamination::corrupted_count;
use crate::elliptical::{default_delta, spatial_signs, symmetrize, SampleSet};
use crate::error::{Error, Result};
use crate::filter::{
    flattened_outer_products, run_filter, unflatten_symmetric, FilterConfig, FilterOutput, OracleKind,
    StopReason, TraceRecord, TransformRule,
};
use crate::linalg::{
    matrix_power, relative_frobenius_error, relative_spectral_error, trace_normalize, PointMatrix, Power,
    ScatterMatrix,
};
use crate::moments::{reference_tensor_s, second_moment};
use crate::sos::MAX_SOS_DIM;

/// How `delta` is derived from the filtering rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeltaRule {
    /// `delta = eps * ln(1 / eps)`.
    EpsLogInvEps,
    /// `delta = factor * eps * ln(1 / eps)`.
    Scaled { factor: f64 },
}

impl DeltaRule {
    pub fn delta(&self, epsilon: f64) -> f64 {
        if epsilon <= 0.0 {
            return 0.0;
        }
        let base = epsilon * (1.0 / epsilon).ln();
        match self {
            DeltaRule::EpsLogInvEps => base,
            DeltaRule::Scaled { factor } => factor * base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Fraction of corrupted input points.
    pub epsilon: f64,
    pub delta_rule: DeltaRule,
    /// Shares of the sign sample given to the three stages.
    pub split: [f64; 3],
    /// Constant in the norm band `d +- C sqrt(d ln d)` of the band diagnostic.
    pub truncation_c: f64,
    /// Radius of the oracle families.
    pub radius: f64,
    /// Stopping constants of the three filters.
    pub coarse_c: f64,
    pub spectral_c: f64,
    pub frobenius_c: f64,
    /// Round cap for the coarse filter; `None` means no cap beyond `n + 1`.
    pub coarse_max_iters: Option<usize>,
    /// Oracle of the spectral stage. Falls back to the Euclidean oracle above
    /// the largest dimension the sum-of-squares solver accepts.
    pub spectral_oracle: OracleKind,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            delta_rule: DeltaRule::EpsLogInvEps,
            split: [1.0 / 3.0; 3],
            truncation_c: crate::elliptical::DEFAULT_TRUNCATION_C,
            radius: 1.0,
            coarse_c: 2.0,
            spectral_c: 1.0,
            frobenius_c: 1.0,
            coarse_max_iters: None,
            spectral_oracle: OracleKind::Sos,
        }
    }
}

impl PipelineConfig {
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Corruption rate seen by the filters after pairing.
    pub fn sign_epsilon(&self) -> f64 {
        2.0 * self.epsilon
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0 / 3.0).contains(&self.epsilon) {
            return Err(Error::InvalidFraction(self.epsilon));
        }
        if self.split.iter().any(|f| !(*f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvariantViolation(format!(
                "split fractions {:?} must be positive and sum to 1",
                self.split
            )));
        }
        for (name, c) in [
            ("coarse_c", self.coarse_c),
            ("spectral_c", self.spectral_c),
            ("frobenius_c", self.frobenius_c),
            ("truncation_c", self.truncation_c),
            ("radius", self.radius),
        ] {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::InvariantViolation(format!("{name} = {c} must be positive")));
            }
        }
        if let DeltaRule::Scaled { factor } = self.delta_rule {
            if !(factor >= 1.0) || !factor.is_finite() {
                return Err(Error::InvariantViolation(format!("delta factor {factor} must be at least 1")));
            }
        }
        Ok(())
    }

    fn filter_config(&self, d: usize, c: f64, oracle: OracleKind) -> FilterConfig {
        let eps = self.sign_epsilon();
        let df = d as f64;
        let r2 = match oracle {
            OracleKind::Euclidean => 2.0 * df / (df + 2.0),
            OracleKind::Sos => 2.0 * (df - 1.0) / (df + 2.0),
        } * self.radius
            * self.radius;
        FilterConfig::new(eps, self.delta_rule.delta(eps), r2.sqrt())
            .with_threshold(c)
            .with_oracle(oracle)
            .with_radius(self.radius)
    }
}

/// The three sign samples handed to the stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub parts: [PointMatrix; 3],
    /// Symmetrized pairs before projection, zero pairs removed.
    pub pairs: PointMatrix,
    /// Number of pairs dropped because both points coincided.
    pub dropped: usize,
}

/// Symmetrizes, drops zero pairs, takes spatial signs and splits.
pub fn preprocess(z: &SampleSet, cfg: &PipelineConfig) -> Result<Preprocessed> {
    cfg.validate()?;
    if z.len() < 6 {
        return Err(Error::TooFewSamples { needed: 6, got: z.len() });
    }
    let pairs = symmetrize(z)?.into_points();
    let keep: Vec<bool> = pairs.rows().map(|r| r.iter().any(|&v| v != 0.0)).collect();
    let dropped = keep.iter().filter(|&&k| !k).count();
    if dropped > 0 {
        let first = keep.iter().position(|&k| !k);
        log::info!("dropping {dropped} zero pairs out of {}", pairs.len());
        if pairs.len() - dropped < 3 {
            return Err(Error::DegenerateInput { index: first });
        }
    }
    let pairs = crate::contamination::select_rows(&pairs, &keep)?;
    let signs = spatial_signs(&pairs)?;
    let m = signs.len();
    let n1 = corrupted_count(cfg.split[0], m);
    let n2 = corrupted_count(cfg.split[1], m);
    if n1 == 0 || n2 == 0 || n1 + n2 >= m {
        return Err(Error::TooFewSamples { needed: 3, got: m });
    }
    let parts = [
        signs.slice_rows(0, n1),
        signs.slice_rows(n1, n1 + n2),
        signs.slice_rows(n1 + n2, m),
    ];
    Ok(Preprocessed { parts, pairs, dropped })
}

/// Result of one filtering stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub estimate: ScatterMatrix,
    pub trace: Vec<TraceRecord>,
    pub stop: StopReason,
}

impl StageOutput {
    fn from_filter(estimate: ScatterMatrix, out: FilterOutput) -> Self {
        Self {
            estimate,
            trace: out.trace,
            stop: out.stop,
        }
    }

    /// Downweighting rounds performed.
    pub fn rounds(&self) -> usize {
        self.trace.len().saturating_sub(1)
    }
}

fn check_nondegenerate(signs: &PointMatrix) -> Result<()> {
    if signs.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    ScatterMatrix::new(second_moment(signs)).map(|_| ())
}

/// Applies `t` to every row and projects back to the sphere.
fn whiten_signs(signs: &PointMatrix, t: &DMatrix<f64>) -> Result<PointMatrix> {
    spatial_signs(&signs.transform(t)?)
}

fn reisotropized(
    signs: &PointMatrix,
    cfg: &PipelineConfig,
    c: f64,
    oracle: OracleKind,
    max_iters: Option<usize>,
) -> Result<StageOutput> {
    let d = signs.dim();
    check_nondegenerate(signs)?;
    if signs.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: signs.len() });
    }
    let q = reference_tensor_s(d)?.into_matrix();
    let mut fc = cfg.filter_config(d, c, oracle).with_transform(TransformRule::Reisotropize);
    if let Some(cap) = max_iters {
        fc = fc.with_max_iters(cap.max(fc.min_iters(signs.len())));
    }
    let out = run_filter(signs, &q, &fc)?;
    let second = out.second_moment.clone().expect("reisotropize returns the second moment");
    Ok(StageOutput::from_filter(trace_normalize(&second)?, out))
}

/// Coarse estimate of the sign covariance.
pub fn stage1_coarse(signs: &PointMatrix, cfg: &PipelineConfig) -> Result<StageOutput> {
    cfg.validate()?;
    reisotropized(signs, cfg, cfg.coarse_c, OracleKind::Euclidean, cfg.coarse_max_iters)
}

/// Spectral refinement on signs whitened by `sigma1`.
pub fn stage2_spectral(signs: &PointMatrix, sigma1: &ScatterMatrix, cfg: &PipelineConfig) -> Result<StageOutput> {
    cfg.validate()?;
    let d = signs.dim();
    let w = matrix_power(sigma1.sym(), Power::NegHalf)?;
    let z = whiten_signs(signs, w.matrix())?;
    let oracle = if cfg.spectral_oracle == OracleKind::Sos && d > MAX_SOS_DIM {
        log::warn!("dimension {d} exceeds the sum-of-squares limit; spectral stage uses the Euclidean oracle");
        OracleKind::Euclidean
    } else {
        cfg.spectral_oracle
    };
    reisotropized(&z, cfg, cfg.spectral_c, oracle, None)
}

/// `Sigma2^{-1/2} Sigma1^{-1/2}`, the map whose inverse composes the stages.
fn stage3_whitener(sigma1: &ScatterMatrix, sigma2: &ScatterMatrix) -> Result<DMatrix<f64>> {
    let a = matrix_power(sigma1.sym(), Power::NegHalf)?;
    let b = matrix_power(sigma2.sym(), Power::NegHalf)?;
    Ok(b.matrix() * a.matrix())
}

/// Frobenius-norm pass on signs whitened by both earlier stages.
pub fn stage3_frobenius(
    signs: &PointMatrix,
    sigma1: &ScatterMatrix,
    sigma2: &ScatterMatrix,
    cfg: &PipelineConfig,
) -> Result<StageOutput> {
    cfg.validate()?;
    let d = signs.dim();
    let z = whiten_signs(signs, &stage3_whitener(sigma1, sigma2)?)?;
    check_nondegenerate(&z)?;
    let x = flattened_outer_products(&z);
    let q = reference_tensor_s(d)?.into_matrix();
    let fc = cfg.filter_config(d, cfg.frobenius_c, OracleKind::Euclidean);
    if z.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: z.len() });
    }
    let out = run_filter(&x, &q, &fc)?;
    let est = trace_normalize(&unflatten_symmetric(&out.estimate, d)?)?;
    Ok(StageOutput::from_filter(est, out))
}

/// `S1^{1/2} S2^{1/2} S3 S2^{1/2} S1^{1/2}`, normalized to trace `d`.
pub fn compose(s1: &ScatterMatrix, s2: &ScatterMatrix, s3: &ScatterMatrix) -> Result<ScatterMatrix> {
    let a = matrix_power(s1.sym(), Power::Half)?;
    let b = matrix_power(s2.sym(), Power::Half)?;
    let inner = s3.sym().conjugate(b.matrix());
    trace_normalize(&inner.conjugate(a.matrix()))
}

/// Errors of an estimate relative to a known scatter matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub rel_spectral: f64,
    pub rel_frobenius: f64,
}

impl ErrorMetrics {
    pub fn of(truth: &ScatterMatrix, estimate: &ScatterMatrix) -> Result<Self> {
        let truth = trace_normalize(truth.sym())?;
        Ok(Self {
            rel_spectral: relative_spectral_error(&truth, estimate.sym())?,
            rel_frobenius: relative_frobenius_error(&truth, estimate.sym())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub scatter: ScatterMatrix,
    pub stages: [StageOutput; 3],
    /// Estimates after one, two and three stages, composed.
    pub cumulative: [ScatterMatrix; 3],
    pub sizes: [usize; 3],
    pub dropped_pairs: usize,
    /// Share of whitened pairs whose rescaled squared norm lies in the
    /// band `d +- C sqrt(d ln d)`.
    pub band_fraction: f64,
    /// Errors of `cumulative` against the ground truth, when supplied.
    pub metrics: Option<[ErrorMetrics; 3]>,
}

impl PipelineReport {
    pub fn filter_rounds(&self) -> usize {
        self.stages.iter().map(StageOutput::rounds).sum()
    }

    pub fn final_metrics(&self) -> Option<ErrorMetrics> {
        self.metrics.map(|m| m[2])
    }
}

fn band_fraction(pairs: &PointMatrix, whitener: &DMatrix<f64>, c: f64) -> Result<f64> {
    let d = pairs.dim();
    if d < 2 {
        return Ok(1.0);
    }
    let delta = default_delta(d, c)?;
    let y = pairs.transform(whitener)?;
    let mut sq: Vec<f64> = y.rows().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut sorted = sq.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    if !(median > 0.0) {
        return Ok(0.0);
    }
    let df = d as f64;
    sq.iter_mut().for_each(|s| *s *= df / median);
    let inside = sq.iter().filter(|&&s| (s - df).abs() <= delta).count();
    Ok(inside as f64 / sq.len() as f64)
}

/// Runs all stages. With `truth`, the report carries error metrics.
pub fn estimate_scatter(z: &SampleSet, cfg: &PipelineConfig, truth: Option<&ScatterMatrix>) -> Result<PipelineReport> {
    let pre = preprocess(z, cfg).map_err(|e| e.in_stage("preprocess"))?;
    let [p1, p2, p3] = &pre.parts;
    let s1 = stage1_coarse(p1, cfg).map_err(|e| e.in_stage("stage1"))?;
    let s2 = stage2_spectral(p2, &s1.estimate, cfg).map_err(|e| e.in_stage("stage2"))?;
    let s3 = stage3_frobenius(p3, &s1.estimate, &s2.estimate, cfg).map_err(|e| e.in_stage("stage3"))?;
    let c2 = compose(&s1.estimate, &s2.estimate, &ScatterMatrix::identity(z.dim()))
        .map_err(|e| e.in_stage("compose"))?;
    let scatter = compose(&s1.estimate, &s2.estimate, &s3.estimate).map_err(|e| e.in_stage("compose"))?;
    let cumulative = [s1.estimate.clone(), c2, scatter.clone()];
    let metrics = match truth {
        Some(t) => Some([
            ErrorMetrics::of(t, &cumulative[0])?,
            ErrorMetrics::of(t, &cumulative[1])?,
            ErrorMetrics::of(t, &cumulative[2])?,
        ]),
        None => None,
    };
    let whitener = matrix_power(scatter.sym(), Power::NegHalf)?;
    let band = band_fraction(&pre.pairs, whitener.matrix(), cfg.truncation_c)?;
    log::info!(
        "pipeline done: {} filter rounds, band fraction {band:.3}",
        s1.rounds() + s2.rounds() + s3.rounds()
    );
    Ok(PipelineReport {
        scatter,
        sizes: [p1.len(), p2.len(), p3.len()],
        stages: [s1, s2, s3],
        cumulative,
        dropped_pairs: pre.dropped,
        band_fraction: band,
        metrics,
    })
}

/// Trace-normalized second moment of the signs of all nonzero pairs.
pub fn naive_sign_covariance(z: &SampleSet) -> Result<ScatterMatrix> {
    let pairs = symmetrize(z)?.into_points();
    let keep: Vec<bool> = pairs.rows().map(|r| r.iter().any(|&v| v != 0.0)).collect();
    let pairs = crate::contamination::select_rows(&pairs, &keep)?;
    if pairs.is_empty() {
        return Err(Error::DegenerateInput { index: Some(0) });
    }
    trace_normalize(&second_moment(&spatial_signs(&pairs)?))
}

/// Trace-normalized empirical second moment of the symmetrized pairs.
pub fn naive_covariance(z: &SampleSet) -> Result<ScatterMatrix> {
    let pairs = symmetrize(z)?.into_points();
    trace_normalize(&second_moment(&pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contamination::{corrupt, AdversaryStrategy};
    use crate::elliptical::{sample, EllipticalModel, RadialLaw};
    use crate::linalg::SymMatrix;

    fn gaussian(diag: &[f64], n: usize, seed: u64) -> (ScatterMatrix, SampleSet) {
        let truth = trace_normalize(&SymMatrix::from_diagonal(diag)).unwrap();
        let m = EllipticalModel::centered(&truth, RadialLaw::ChiD).unwrap();
        (truth, sample(&m, n, seed).unwrap())
    }

    #[test]
    fn six_points_split_one_each() {
        let (_, s) = gaussian(&[1.0, 1.0], 6, 0);
        let pre = preprocess(&s, &PipelineConfig::default()).unwrap();
        assert_eq!(pre.parts.each_ref().map(|p| p.len()), [1, 1, 1]);
        assert_eq!(pre.dropped, 0);
    }

    #[test]
    fn too_few_and_degenerate_inputs() {
        let (_, s) = gaussian(&[1.0, 1.0], 5, 0);
        assert!(matches!(
            preprocess(&s, &PipelineConfig::default()),
            Err(Error::TooFewSamples { needed: 6, got: 5 })
        ));
        let same = SampleSet::new(PointMatrix::new(2, vec![1.0; 40]).unwrap(), 0).unwrap();
        let err = estimate_scatter(&same, &PipelineConfig::default(), None).unwrap_err();
        assert_eq!(err.stage(), Some("preprocess"));
        assert!(matches!(err.root(), Error::DegenerateInput { index: Some(0) }));
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().with_epsilon(0.4).validate().is_err());
        assert!(PipelineConfig::default().with_epsilon(-0.1).validate().is_err());
        let mut c = PipelineConfig::default();
        c.split = [0.5, 0.5, 0.5];
        assert!(c.validate().is_err());
        let c: PipelineConfig = serde_json::from_str(r#"{"epsilon":0.1}"#).unwrap();
        assert_eq!(c.epsilon, 0.1);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"epsilonn":0.1}"#).is_err());
    }

    #[test]
    fn compose_examples() {
        let id = ScatterMatrix::identity(3);
        let s = trace_normalize(&SymMatrix::from_diagonal(&[3.0, 2.0, 1.0])).unwrap();
        assert!((compose(&id, &id, &s).unwrap().matrix() - s.matrix()).amax() < 1e-12);
        assert!((compose(&s, &id, &id).unwrap().matrix() - s.matrix()).amax() < 1e-12);
        // Reciprocal diagonal factors cancel.
        let t = trace_normalize(&SymMatrix::from_diagonal(&[1.0 / 3.0, 0.5, 1.0])).unwrap();
        let c = compose(&s, &t, &id).unwrap();
        for i in 0..3 {
            assert!((c.matrix()[(i, i)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clean_isotropic_close_to_identity() {
        let (truth, s) = gaussian(&[1.0; 4], 12_000, 7);
        let cfg = PipelineConfig::default().with_epsilon(0.0);
        let r = estimate_scatter(&s, &cfg, Some(&truth)).unwrap();
        let m = r.final_metrics().unwrap();
        assert!(m.rel_frobenius < 0.15, "{m:?}");
        assert!(r.scatter.is_normalized());
        assert!(r.scatter.sym().min_eigenvalue() > 0.0);
        assert_eq!(r.filter_rounds(), 0);
    }

    #[test]
    fn eps_zero_stage3_is_empirical_sign_covariance() {
        let (_, s) = gaussian(&[2.0, 1.0, 0.5], 900, 3);
        let signs = spatial_signs(s.points()).unwrap();
        let cfg = PipelineConfig::default().with_epsilon(0.0);
        let id = ScatterMatrix::identity(3);
        let out = stage3_frobenius(&signs, &id, &id, &cfg).unwrap();
        let expect = trace_normalize(&second_moment(&signs)).unwrap();
        assert!((out.estimate.matrix() - expect.matrix()).amax() < 1e-12);
        assert_eq!(out.stop, StopReason::Converged);
    }

    #[test]
    fn stage_errors_carry_stage_name() {
        // Every point on one axis: stage 1 sees a singular sign covariance.
        let mut data = vec![0.0; 60 * 2];
        for i in 0..60 {
            data[2 * i] = (i as f64) - 30.5;
        }
        let s = SampleSet::new(PointMatrix::new(2, data).unwrap(), 0).unwrap();
        let err = estimate_scatter(&s, &PipelineConfig::default(), None).unwrap_err();
        assert_eq!(err.stage(), Some("stage1"));
        assert!(matches!(err.root(), Error::NotPositiveDefinite { .. }));
    }

    #[test]
    fn spike_is_removed_and_output_is_valid() {
        let (truth, s) = gaussian(&[4.0, 2.0, 1.0, 1.0, 0.5, 0.25], 20_000, 11);
        let spike = AdversaryStrategy::SpikeCluster {
            direction: vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            magnitude: 10.0 * 6f64.sqrt(),
            center: None,
        };
        let c = corrupt(&s, 0.05, &spike, 11).unwrap();
        let cfg = PipelineConfig::default().with_epsilon(0.05);
        let r = estimate_scatter(c.data(), &cfg, Some(&truth)).unwrap();
        let naive = ErrorMetrics::of(&truth, &naive_sign_covariance(c.data()).unwrap()).unwrap();
        let m = r.metrics.unwrap();
        assert!(m[2].rel_frobenius < 0.2, "{m:?}");
        assert!(naive.rel_frobenius > 5.0 * m[2].rel_frobenius);
        assert!(m[2].rel_frobenius <= m[1].rel_frobenius + 1e-12);
        assert!(r.scatter.is_normalized());
        assert!(r.scatter.sym().min_eigenvalue() > 0.0);
        assert!(r.stages.iter().all(|st| st.stop == StopReason::Converged));
    }
}
