//! Robust PCA and covariance-scale recovery on top of the scatter estimate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::elliptical::{symmetrize, SampleSet};
use crate::error::{Error, Result};
use crate::linalg::{matrix_power, Power, ScatterMatrix, SymMatrix};
use crate::moments::second_moment;
use crate::pipeline::{estimate_scatter, ErrorMetrics, PipelineConfig, PipelineReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailKind {
    HansonWright,
    SubExponential,
}

/// Tail assumption on the data-generating law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailModel {
    pub kind: TailKind,
    /// Moment order of the tail diagnostic; `None` picks the default.
    pub p: Option<u32>,
}

impl TailModel {
    pub fn hanson_wright() -> Self {
        Self {
            kind: TailKind::HansonWright,
            p: None,
        }
    }

    pub fn sub_exponential() -> Self {
        Self {
            kind: TailKind::SubExponential,
            p: None,
        }
    }

    /// `ceil(ln(1/eps))` rounded up to even, at least 2 and at most `d`
    /// (rounded down to even).
    pub fn moment_order(&self, epsilon: f64, d: usize) -> u32 {
        if let Some(p) = self.p {
            return p.max(2);
        }
        let raw = if epsilon > 0.0 { (1.0 / epsilon).ln().ceil() as u32 } else { 2 };
        let even = raw + raw % 2;
        let cap = (d as u32 - d as u32 % 2).max(2);
        even.clamp(2, cap)
    }

    /// Reference value of `E s^2 / (E s)^2` for `s` the squared norm of a
    /// whitened point.
    fn reference_kurtosis(&self, d: usize) -> f64 {
        let base = 1.0 + 2.0 / d as f64;
        match self.kind {
            TailKind::HansonWright => base,
            TailKind::SubExponential => 2.0 * base,
        }
    }
}

/// Top eigenvector with its first nonzero coordinate made positive.
pub fn top_eigenvector(m: &SymMatrix) -> Vec<f64> {
    let eig = m.eig();
    let mut v: Vec<f64> = eig.vectors.column(0).iter().copied().collect();
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    v
}

/// `||u u^T - v v^T||_F` for unit vectors.
pub fn projector_error(u: &[f64], v: &[f64]) -> f64 {
    let d = u.len();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            let e = u[i] * u[j] - v[i] * v[j];
            s += e * e;
        }
    }
    s.sqrt()
}

/// Top eigenvector of the robust scatter estimate. Without an eigengap the
/// direction is arbitrary but deterministic.
pub fn robust_pca(z: &SampleSet, cfg: &PipelineConfig) -> Result<Vec<f64>> {
    let report = estimate_scatter(z, cfg, None)?;
    Ok(top_eigenvector(report.scatter.sym()))
}

/// Top eigenvector of the empirical covariance of the symmetrized pairs.
pub fn naive_pca(z: &SampleSet) -> Result<Vec<f64>> {
    let pairs = symmetrize(z)?;
    Ok(top_eigenvector(&second_moment(pairs.points())))
}

/// Mean after removing the `ceil(2 eps n)` largest and smallest values.
pub fn truncated_mean_1d(values: &[f64], epsilon: f64) -> Result<f64> {
    let n = values.len();
    if n < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: n });
    }
    if !(0.0..0.25).contains(&epsilon) {
        return Err(Error::InvalidFraction(epsilon));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvariantViolation("non-finite value".into()));
    }
    let k = (2.0 * epsilon * n as f64 - 1e-9).ceil().max(0.0) as usize;
    if 2 * k >= n {
        return Err(Error::TooFewSamples { needed: 2 * k + 1, got: n });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let kept = &sorted[k..n - k];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleEstimate {
    /// `d / T`, the factor by which the trace-`d` scatter exceeds the
    /// covariance.
    pub gamma: f64,
    /// `(T / d) * Sigma_hat`.
    pub covariance: SymMatrix,
    /// Trimmed mean of the whitened squared norms.
    pub trimmed_mean: f64,
    /// `E s^2 / (E s)^2` of the retained squared norms `s`.
    pub kurtosis: f64,
    /// Set when `kurtosis` exceeds three times the value expected under the
    /// declared tail model; the scale is then unreliable.
    pub tail_flag: bool,
    pub moment_order: u32,
}

/// Recovers the covariance scale from whitened squared norms of the
/// symmetrized pairs. Pairs carry up to twice the point corruption, and the
/// trimming uses that rate.
pub fn estimate_scale(z: &SampleSet, scatter: &ScatterMatrix, epsilon: f64, tail: TailModel) -> Result<ScaleEstimate> {
    let d = z.dim();
    if scatter.dim() != d {
        return Err(Error::ShapeError(format!("scatter is {}x{}, data has dimension {d}", scatter.dim(), scatter.dim())));
    }
    let pairs = symmetrize(z)?;
    let w = matrix_power(scatter.sym(), Power::NegHalf)?;
    let y = pairs.points().transform(w.matrix())?;
    let sq: Vec<f64> = y.rows().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let rate = 2.0 * epsilon;
    let t = truncated_mean_1d(&sq, rate)?;
    if !(t > 0.0) {
        return Err(Error::InvalidScale(format!("trimmed mean of squared norms is {t}")));
    }
    let kurtosis = trimmed_kurtosis(&sq, rate);
    let df = d as f64;
    Ok(ScaleEstimate {
        gamma: df / t,
        covariance: scatter.sym().scaled(t / df),
        trimmed_mean: t,
        kurtosis,
        tail_flag: kurtosis > 3.0 * tail.reference_kurtosis(d),
        moment_order: tail.moment_order(epsilon, d),
    })
}

fn trimmed_kurtosis(sq: &[f64], rate: f64) -> f64 {
    let n = sq.len();
    let k = (2.0 * rate * n as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut sorted = sq.to_vec();
    sorted.sort_by(f64::total_cmp);
    let kept = &sorted[..n - k.min(n - 1)];
    let m1 = kept.iter().sum::<f64>() / kept.len() as f64;
    let m2 = kept.iter().map(|s| s * s).sum::<f64>() / kept.len() as f64;
    m2 / (m1 * m1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    pub scatter: PipelineReport,
    pub scale: ScaleEstimate,
    /// Errors of the covariance estimate against the true covariance.
    pub metrics: Option<ErrorMetrics>,
}

/// Scatter estimate followed by scale recovery. `truth` is the true
/// covariance, not a trace-normalized scatter.
pub fn estimate_covariance(
    z: &SampleSet,
    cfg: &PipelineConfig,
    tail: TailModel,
    truth: Option<&SymMatrix>,
) -> Result<CovarianceReport> {
    let scatter_truth = truth.map(|t| ScatterMatrix::new(t.clone())).transpose()?;
    let report = estimate_scatter(z, cfg, scatter_truth.as_ref())?;
    let scale = estimate_scale(z, &report.scatter, cfg.epsilon, tail)?;
    let metrics = match truth {
        Some(t) => Some(covariance_metrics(t, &scale.covariance)?),
        None => None,
    };
    Ok(CovarianceReport {
        scatter: report,
        scale,
        metrics,
    })
}

/// Relative errors of a covariance estimate, without trace normalization.
pub fn covariance_metrics(truth: &SymMatrix, estimate: &SymMatrix) -> Result<ErrorMetrics> {
    let w = matrix_power(truth, Power::NegHalf)?;
    let mut dev: DMatrix<f64> = estimate.conjugate(w.matrix()).into_inner();
    for i in 0..dev.nrows() {
        dev[(i, i)] -= 1.0;
    }
    let dev = SymMatrix::symmetrize(dev);
    Ok(ErrorMetrics {
        rel_spectral: dev.norm(),
        rel_frobenius: dev.frobenius(),
    })
}

/// Empirical covariance of the symmetrized pairs.
pub fn naive_covariance_of_pairs(z: &SampleSet) -> Result<SymMatrix> {
    Ok(second_moment(symmetrize(z)?.points()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::PointMatrix;
    use crate::elliptical::{sample, EllipticalModel, RadialLaw};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn truncated_mean_examples() {
        assert_eq!(truncated_mean_1d(&[2.5; 10], 0.1).unwrap(), 2.5);
        let mut v = vec![0.0; 98];
        v.extend([1e6, 1e6]);
        assert_eq!(truncated_mean_1d(&v, 0.02).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
        assert!(truncated_mean_1d(&g, 0.05).unwrap().abs() < 0.02);
        assert!(matches!(truncated_mean_1d(&[1.0, 2.0], 0.0), Err(Error::TooFewSamples { .. })));
        assert!(matches!(truncated_mean_1d(&[1.0; 4], 0.3), Err(Error::InvalidFraction(_))));
        assert!(matches!(truncated_mean_1d(&[1.0; 3], 0.2), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn moment_order_defaults() {
        let t = TailModel::sub_exponential();
        assert_eq!(t.moment_order(0.05, 20), 4);
        assert_eq!(t.moment_order(0.001, 20), 8);
        assert_eq!(t.moment_order(1e-9, 5), 4);
        assert_eq!(t.moment_order(0.4, 20), 2);
    }

    #[test]
    fn projector_error_examples() {
        assert_eq!(projector_error(&[1.0, 0.0], &[-1.0, 0.0]), 0.0);
        assert!((projector_error(&[1.0, 0.0], &[0.0, 1.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn top_eigenvector_sign_convention() {
        let m = SymMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(top_eigenvector(&m), vec![0.0, 1.0]);
        let m = SymMatrix::from_rows(&[vec![2.0, -1.0], vec![-1.0, 2.0]]).unwrap();
        let v = top_eigenvector(&m);
        assert!(v[0] > 0.0 && v[1] < 0.0);
    }

    #[test]
    fn scale_is_one_for_standard_gaussian() {
        let d = 5;
        let m = EllipticalModel::new(vec![0.0; d], DMatrix::identity(d, d), RadialLaw::ChiD).unwrap();
        let s = sample(&m, 40_000, 2).unwrap();
        let est = estimate_scale(&s, &ScatterMatrix::identity(d), 0.0, TailModel::hanson_wright()).unwrap();
        assert!((est.gamma - 1.0).abs() < 0.02, "{}", est.gamma);
        assert!(!est.tail_flag);
    }

    #[test]
    fn scale_tracks_input_scaling() {
        let d = 4;
        let m = EllipticalModel::new(vec![0.0; d], DMatrix::identity(d, d), RadialLaw::ChiD).unwrap();
        let s = sample(&m, 20_000, 3).unwrap();
        let scaled = SampleSet::new(
            PointMatrix::new(d, s.points().as_slice().iter().map(|x| 3.0 * x).collect()).unwrap(),
            3,
        )
        .unwrap();
        let a = estimate_scale(&s, &ScatterMatrix::identity(d), 0.05, TailModel::hanson_wright()).unwrap();
        let b = estimate_scale(&scaled, &ScatterMatrix::identity(d), 0.05, TailModel::hanson_wright()).unwrap();
        let ratio = b.covariance.matrix() - a.covariance.matrix() * 9.0;
        assert!(ratio.amax() < 1e-9);
    }

    #[test]
    fn cauchy_data_is_flagged() {
        let d = 5;
        let m = EllipticalModel::new(vec![0.0; d], DMatrix::identity(d, d), RadialLaw::StudentT { nu: 1.0 }).unwrap();
        let s = sample(&m, 20_000, 5).unwrap();
        let est = estimate_scale(&s, &ScatterMatrix::identity(d), 0.0, TailModel::hanson_wright()).unwrap();
        assert!(est.tail_flag, "kurtosis {}", est.kurtosis);
    }
}
