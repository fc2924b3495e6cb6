//! Strong-contamination adversaries.
//!
//! The adversary replaces exactly `floor(eps * n)` points. Replaced indices
//! are the first `floor(eps * n)` entries of a seeded permutation, so for a
//! fixed seed the corrupted set grows with `eps`. The ground-truth mask is
//! kept for diagnostics; estimators never see it.

use rand::seq::SliceRandom;

use crate::elliptical::{sample, stream_rng, EllipticalModel, SampleSet};
use crate::error::{Error, Result};
use crate::linalg::{norm2, PointMatrix};

/// How the replaced points are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum AdversaryStrategy {
    /// Replacements drawn i.i.d. from another elliptical model.
    HuberMixture(EllipticalModel),
    /// All replacements at the single point `center + magnitude * u`, with
    /// `u` the normalized `direction` and `center` defaulting to the origin.
    SpikeCluster {
        direction: Vec<f64>,
        magnitude: f64,
        center: Option<Vec<f64>>,
    },
    /// Replacements are the original points multiplied by `factor`.
    ScaleInflation(f64),
    /// Replacements are the original points.
    NoOp,
}

impl AdversaryStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            AdversaryStrategy::HuberMixture(_) => "huber_mixture",
            AdversaryStrategy::SpikeCluster { .. } => "spike_cluster",
            AdversaryStrategy::ScaleInflation(_) => "scale_inflation",
            AdversaryStrategy::NoOp => "noop",
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        match self {
            AdversaryStrategy::HuberMixture(m) if m.dim() != d => Err(Error::ShapeError(format!(
                "outlier model has dimension {}, data has {d}",
                m.dim()
            ))),
            AdversaryStrategy::SpikeCluster {
                direction,
                magnitude,
                center,
            } => {
                if direction.len() != d || center.as_ref().is_some_and(|c| c.len() != d) {
                    return Err(Error::ShapeError(format!(
                        "spike parameters must have dimension {d}"
                    )));
                }
                let len = norm2(direction);
                if !(len > 0.0) || !len.is_finite() || !magnitude.is_finite() {
                    return Err(Error::InvariantViolation(
                        "spike direction must be nonzero and parameters finite".into(),
                    ));
                }
                if center.as_ref().is_some_and(|c| c.iter().any(|v| !v.is_finite())) {
                    return Err(Error::InvariantViolation("spike center must be finite".into()));
                }
                Ok(())
            }
            AdversaryStrategy::ScaleInflation(f) if !f.is_finite() => Err(
                Error::InvariantViolation(format!("inflation factor {f} is not finite")),
            ),
            _ => Ok(()),
        }
    }
}

/// An epsilon-corrupted sample with its hidden corruption mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedSample {
    data: SampleSet,
    mask: Vec<bool>,
    epsilon: f64,
}

impl CorruptedSample {
    /// Wraps clean data as a zero-corruption sample.
    pub fn clean(data: SampleSet) -> Self {
        let n = data.len();
        Self {
            data,
            mask: vec![false; n],
            epsilon: 0.0,
        }
    }

    pub fn data(&self) -> &SampleSet {
        &self.data
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Ground truth, for diagnostics and tests only.
    pub fn ground_truth_mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn corrupted_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// `floor(eps * n)`, robust to representation error in `eps * n`.
pub fn corrupted_count(epsilon: f64, n: usize) -> usize {
    let x = epsilon * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * (1.0 + x) {
        r as usize
    } else {
        x.floor() as usize
    }
}

/// Replaces `floor(eps * n)` points of `s` according to `strategy`.
pub fn corrupt(
    s: &SampleSet,
    epsilon: f64,
    strategy: &AdversaryStrategy,
    seed: u64,
) -> Result<CorruptedSample> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidFraction(epsilon));
    }
    let d = s.dim();
    strategy.validate(d)?;
    let n = s.len();
    let k = corrupted_count(epsilon, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, u64::MAX));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();

    let mut points = s.points().clone();
    let mut mask = vec![false; n];
    match strategy {
        AdversaryStrategy::HuberMixture(model) => {
            if k > 0 {
                let outliers = sample(model, k, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?;
                for (j, &i) in chosen.iter().enumerate() {
                    points.row_mut(i).copy_from_slice(outliers.points().row(j));
                }
            }
        }
        AdversaryStrategy::SpikeCluster {
            direction,
            magnitude,
            center,
        } => {
            let len = norm2(direction);
            let target: Vec<f64> = direction
                .iter()
                .enumerate()
                .map(|(c, u)| center.as_ref().map_or(0.0, |m| m[c]) + magnitude * u / len)
                .collect();
            for &i in &chosen {
                points.row_mut(i).copy_from_slice(&target);
            }
        }
        AdversaryStrategy::ScaleInflation(f) => {
            for &i in &chosen {
                points.row_mut(i).iter_mut().for_each(|v| *v *= f);
            }
        }
        AdversaryStrategy::NoOp => {}
    }
    for &i in &chosen {
        mask[i] = true;
    }
    Ok(CorruptedSample {
        data: SampleSet::new(points, s.seed())?,
        mask,
        epsilon,
    })
}

/// Mask of the symmetrized pairs `(i, floor(n/2) + i)` that touch a
/// corrupted point.
pub fn pair_mask(mask: &[bool]) -> Vec<bool> {
    let m = mask.len() / 2;
    (0..m).map(|i| mask[i] || mask[m + i]).collect()
}

/// Weight mass removed from the good and from the bad points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemovedMass {
    pub good: f64,
    pub bad: f64,
}

/// `sum over good i of (1/n - w_i)` and the same over bad `i`.
pub fn planted_error_report(mask: &[bool], weights: &[f64]) -> Result<RemovedMass> {
    if mask.len() != weights.len() {
        return Err(Error::ShapeError(format!(
            "{} weights for a mask of length {}",
            weights.len(),
            mask.len()
        )));
    }
    let u = 1.0 / mask.len() as f64;
    let mut out = RemovedMass { good: 0.0, bad: 0.0 };
    for (&bad, &w) in mask.iter().zip(weights) {
        if bad {
            out.bad += u - w;
        } else {
            out.good += u - w;
        }
    }
    Ok(out)
}

/// Convenience form of [`planted_error_report`] for a corrupted sample.
pub fn planted_error_report_for(c: &CorruptedSample, weights: &[f64]) -> Result<RemovedMass> {
    planted_error_report(&c.mask, weights)
}

/// Keeps the rows where `keep` is true.
pub fn select_rows(points: &PointMatrix, keep: &[bool]) -> Result<PointMatrix> {
    let data = points
        .rows()
        .zip(keep)
        .filter(|(_, &k)| k)
        .flat_map(|(r, _)| r.iter().copied())
        .collect();
    PointMatrix::new(points.dim(), data)
}
