//! Weighted filtering.
//!
//! Each round computes the weighted mean and covariance of the (possibly
//! re-transformed) points, asks an oracle for the direction `P` in which the
//! covariance departs most from the target `Q`, and stops once that
//! departure is below `C * (delta^2 / eps + eps * r^2)`. Otherwise points
//! are scored by `<P, (x - mu)(x - mu)^T>` and the highest-scoring `2 eps`
//! of the remaining mass is softly downweighted, the top point to zero.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::elliptical::spatial_signs;
use crate::error::{Error, Result};
use crate::linalg::{matrix_power, PointMatrix, Power, SymMatrix};
use crate::moments::{weighted_mean_and_second_moment, weighted_second_moment_about};
use crate::par;
use crate::sos::{worst_p_euclidean, Certificate, OracleResult, SosOracle};

/// Which family of test matrices the oracle optimizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Rank-one `v v^T` with `||v|| <= R`.
    Euclidean,
    /// Degree-4 pseudo-expectations over the sphere `||v||^2 = R`; points
    /// must be flattened `d x d` matrices.
    Sos,
}

/// How points are recomputed from the current weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformRule {
    /// Points are used as given.
    Identity,
    /// Input rows are `d`-vectors `z`; each round uses `flatten(s s^T)`
    /// with `s` the spatial sign of `A z` and `A` the inverse square root
    /// of the weighted second moment of the `z`. Projecting back to the
    /// sphere keeps the trace of every point at `d`, as for the target.
    Reisotropize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub r: f64,
    pub c_threshold: f64,
    /// Hard cap on the number of downweighting rounds; `None` means `n + 1`.
    pub max_iters: Option<usize>,
    pub oracle: OracleKind,
    /// Radius `R` of the oracle family.
    pub radius: f64,
    pub transform: TransformRule,
}

impl FilterConfig {
    /// Euclidean oracle, identity transform, `C = 10`, `R = 1`.
    pub fn new(epsilon: f64, delta: f64, r: f64) -> Self {
        Self {
            epsilon,
            delta,
            r,
            c_threshold: 10.0,
            max_iters: None,
            oracle: OracleKind::Euclidean,
            radius: 1.0,
            transform: TransformRule::Identity,
        }
    }

    pub fn with_threshold(mut self, c: f64) -> Self {
        self.c_threshold = c;
        self
    }

    pub fn with_oracle(mut self, oracle: OracleKind) -> Self {
        self.oracle = oracle;
        self
    }

    pub fn with_transform(mut self, transform: TransformRule) -> Self {
        self.transform = transform;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = Some(max_iters);
        self
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = radius;
        self
    }

    /// `C * (delta^2 / eps + eps * r^2)`; infinite at `eps = 0`, where no
    /// point may be removed.
    pub fn threshold(&self) -> f64 {
        if self.epsilon == 0.0 {
            return f64::INFINITY;
        }
        self.c_threshold * (self.delta * self.delta / self.epsilon + self.epsilon * self.r * self.r)
    }

    /// Smallest admissible iteration cap for `n` points.
    pub fn min_iters(&self, n: usize) -> usize {
        (2.0 * self.epsilon * n as f64).ceil() as usize + 1
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(0.0..0.5).contains(&self.epsilon) {
            return Err(Error::InvalidFraction(self.epsilon));
        }
        if !(self.delta >= self.epsilon) || !self.delta.is_finite() {
            return Err(Error::InvariantViolation(format!(
                "delta {} must be finite and at least epsilon {}",
                self.delta, self.epsilon
            )));
        }
        if !(self.r >= 0.0) || !self.r.is_finite() {
            return Err(Error::InvariantViolation(format!("r = {} must be finite and nonnegative", self.r)));
        }
        if !(self.c_threshold > 0.0) {
            return Err(Error::InvariantViolation(format!(
                "threshold constant {} must be positive",
                self.c_threshold
            )));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::InvalidScale(format!("oracle radius {} must be positive", self.radius)));
        }
        if let Some(cap) = self.max_iters {
            let need = self.min_iters(n);
            if cap < need {
                return Err(Error::InvariantViolation(format!(
                    "max_iters {cap} is below the required {need}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    Timeout,
    /// Remaining weight fell below `1 - 2 eps - 1/n`, a level no run on a
    /// well-conditioned sample reaches; the current estimate is returned.
    MassExhausted,
}

/// One while-check of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub lambda: f64,
    /// Sign of `<P, Q - Sigma>`: negative when the weighted covariance
    /// exceeds the target along `P`.
    pub sign: f64,
    pub threshold: f64,
    /// Number of sorted ranks that were reweighted, absent on the final check.
    pub reweighted: Option<usize>,
    /// Weight mass removed this round.
    pub removed_mass: f64,
    pub witness: String,
    pub stop: Option<StopReason>,
}

/// Writes one JSON object per record.
pub fn write_trace_jsonl<W: Write>(trace: &[TraceRecord], mut out: W) -> Result<()> {
    for rec in trace {
        serde_json::to_writer(&mut out, rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Weights and trace as seen by an observer after each while-check.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub t: usize,
    pub lambda: f64,
    pub weights: Vec<f64>,
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    /// Weighted mean of the final transformed points.
    pub estimate: Vec<f64>,
    /// Final weighted second moment of the input rows under `Reisotropize`.
    pub second_moment: Option<SymMatrix>,
    pub weights: Vec<f64>,
    pub trace: Vec<TraceRecord>,
    pub stop: StopReason,
}

impl FilterOutput {
    /// Number of times the loop condition was evaluated.
    pub fn while_checks(&self) -> usize {
        self.trace.len()
    }
}

/// `tau_i = <P, (x_i - mu)(x_i - mu)^T>`, clamped below at zero.
pub fn score(points: &PointMatrix, mu: &[f64], certificate: &Certificate) -> Result<Vec<f64>> {
    let m = points.dim();
    if mu.len() != m {
        return Err(Error::ShapeError(format!("mean of length {} for dimension {m}", mu.len())));
    }
    let tau = match certificate {
        Certificate::Vector(v) => {
            if v.len() != m {
                return Err(Error::ShapeError(format!("witness of length {} for dimension {m}", v.len())));
            }
            par::map_indexed(points.len(), |i| {
                let s: f64 = points.row(i).iter().zip(mu).zip(v).map(|((x, c), a)| (x - c) * a).sum();
                s * s
            })
        }
        Certificate::Pseudo(pe) => {
            let p = pe.p_matrix();
            if p.nrows() != m {
                return Err(Error::ShapeError(format!("certificate of size {} for dimension {m}", p.nrows())));
            }
            par::map_indexed(points.len(), |i| {
                let y = DVector::from_iterator(m, points.row(i).iter().zip(mu).map(|(x, c)| x - c));
                y.dot(&(&p * &y))
            })
        }
    };
    Ok(tau.into_iter().map(|t| t.max(0.0)).collect())
}

/// Indices with positive weight, sorted by score descending and then by
/// index ascending.
pub fn sort_by_score(weights: &[f64], tau: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| tau[b].total_cmp(&tau[a]).then(a.cmp(&b)));
    order
}

/// Downweights the first `N` entries of `order`, where `N` is the shortest
/// prefix carrying weight mass above `2 eps`. Returns `N` and the mass
/// removed.
pub fn downweight(weights: &mut [f64], order: &[usize], tau: &[f64], epsilon: f64) -> Result<(usize, f64)> {
    let Some(&top) = order.first() else {
        return Err(Error::DegenerateWeights);
    };
    let tau_max = tau[top];
    if !(tau_max > 0.0) {
        return Err(Error::InconsistentState(format!(
            "largest score is {tau_max} while the stopping condition fails"
        )));
    }
    let mut prefix = 0.0;
    let mut count = order.len();
    for (rank, &i) in order.iter().enumerate() {
        prefix += weights[i];
        if prefix > 2.0 * epsilon {
            count = rank + 1;
            break;
        }
    }
    let floor = 1e-15 / weights.len() as f64;
    let mut removed = 0.0;
    for &i in &order[..count] {
        let old = weights[i];
        let mut new = (1.0 - tau[i] / tau_max) * old;
        if new < floor {
            new = 0.0;
        }
        removed += old - new;
        weights[i] = new;
    }
    Ok((count, removed))
}

fn reisotropize(z: &PointMatrix, weights: &[f64]) -> Result<(PointMatrix, SymMatrix)> {
    let d = z.dim();
    let sigma = weighted_second_moment_about(z, weights, &vec![0.0; d])?;
    let a = matrix_power(&sigma, Power::NegHalf)?.into_inner();
    let y = spatial_signs(&z.transform(&a)?)?;
    Ok((flattened_outer_products(&y), sigma))
}

enum Oracle {
    Euclidean(f64),
    Sos(SosOracle),
}

impl Oracle {
    fn query(&self, m: &SymMatrix) -> Result<OracleResult> {
        match self {
            Oracle::Euclidean(radius) => Ok(worst_p_euclidean(m, *radius)),
            Oracle::Sos(o) => o.worst_p(m),
        }
    }
}

/// Runs the filter on `points` with target covariance `q`.
///
/// Under [`TransformRule::Reisotropize`] the rows of `points` are the
/// underlying `d`-vectors and `q` is `d^2 x d^2`.
pub fn run_filter(points: &PointMatrix, q: &SymMatrix, cfg: &FilterConfig) -> Result<FilterOutput> {
    run_filter_with(points, q, cfg, |_| {})
}

/// [`run_filter`] calling `observer` after every while-check, before the
/// weights of that round are updated.
pub fn run_filter_with<F>(
    points: &PointMatrix,
    q: &SymMatrix,
    cfg: &FilterConfig,
    mut observer: F,
) -> Result<FilterOutput>
where
    F: FnMut(&FilterState),
{
    let n = points.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    cfg.validate(n)?;
    let m = match cfg.transform {
        TransformRule::Identity => points.dim(),
        TransformRule::Reisotropize => points.dim() * points.dim(),
    };
    if q.dim() != m {
        return Err(Error::ShapeError(format!("target is {0}x{0}, points need {m}x{m}", q.dim())));
    }
    let oracle = match cfg.oracle {
        OracleKind::Euclidean => Oracle::Euclidean(cfg.radius),
        OracleKind::Sos => {
            let d = (m as f64).sqrt().round() as usize;
            if d * d != m {
                return Err(Error::ShapeError(format!(
                    "sum-of-squares oracle needs flattened square matrices, got dimension {m}"
                )));
            }
            Oracle::Sos(SosOracle::new(d, cfg.radius)?)
        }
    };
    let threshold = cfg.threshold();
    let max_iters = cfg.max_iters.unwrap_or(n + 1);
    let mut weights = vec![1.0 / n as f64; n];
    let mass_floor = 1.0 - 2.0 * cfg.epsilon - 1.0 / n as f64;
    let mut trace = Vec::new();
    let mut t = 0;
    loop {
        let (x, second) = match cfg.transform {
            TransformRule::Identity => (None, None),
            TransformRule::Reisotropize => {
                let (x, s) = reisotropize(points, &weights)?;
                (Some(x), Some(s))
            }
        };
        let x = x.as_ref().unwrap_or(points);
        let (mu, cov) = weighted_mean_and_second_moment(x, &weights)?;
        let gap = SymMatrix::symmetrize(q.matrix() - cov.matrix());
        let res = oracle.query(&gap)?;
        let lambda = res.value;
        let witness = res.certificate.summary();
        let stop = if lambda <= threshold {
            Some(StopReason::Converged)
        } else if t >= max_iters {
            Some(StopReason::Timeout)
        } else if weights.iter().sum::<f64>() < mass_floor {
            Some(StopReason::MassExhausted)
        } else {
            None
        };
        trace.push(TraceRecord {
            t,
            lambda,
            sign: res.sign,
            threshold,
            reweighted: None,
            removed_mass: 0.0,
            witness,
            stop,
        });
        observer(&FilterState {
            t,
            lambda,
            weights: weights.clone(),
            trace: trace.clone(),
        });
        if let Some(stop) = stop {
            log::debug!("filter stopped at t={t} ({stop:?}), lambda {lambda:.4e}");
            return Ok(FilterOutput {
                estimate: mu,
                second_moment: second,
                weights,
                trace,
                stop,
            });
        }
        let tau = score(x, &mu, &res.certificate)?;
        let order = sort_by_score(&weights, &tau);
        let (count, removed) = downweight(&mut weights, &order, &tau, cfg.epsilon)?;
        let last = trace.last_mut().expect("pushed above");
        last.reweighted = Some(count);
        last.removed_mass = removed;
        log::trace!("filter t={t}: lambda {lambda:.4e}, reweighted {count}, removed {removed:.3e}");
        t += 1;
    }
}

/// The `d x d` matrix whose flattening is `v`, symmetrized.
pub fn unflatten_symmetric(v: &[f64], d: usize) -> Result<SymMatrix> {
    Ok(SymMatrix::symmetrize(crate::linalg::unflatten(v, d)?))
}

/// Flattened outer products `z z^T` of the rows.
pub fn flattened_outer_products(z: &PointMatrix) -> PointMatrix {
    let d = z.dim();
    let m = d * d;
    let mut data = vec![0.0; z.len() * m];
    par::for_each_block_mut(&mut data, m * par::CHUNK, |b, block| {
        for (k, out) in block.chunks_mut(m).enumerate() {
            crate::linalg::outer_flat(z.row(b * par::CHUNK + k), out);
        }
    });
    PointMatrix::new(m, data).expect("length is a multiple of d^2")
}
