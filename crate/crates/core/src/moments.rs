//! First, second and fourth moments.
//!
//! Fourth-moment tensors are stored as `d^2 x d^2` matrices with the pair
//! `(i, j)` mapped to row `i * d + j`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{PointMatrix, SymMatrix};
use crate::par;

/// A fourth-moment tensor flattened to a symmetric `d^2 x d^2` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FourthMomentTensor {
    dim: usize,
    matrix: SymMatrix,
}

impl FourthMomentTensor {
    pub fn new(dim: usize, matrix: SymMatrix) -> Result<Self> {
        if matrix.dim() != dim * dim {
            return Err(Error::ShapeError(format!(
                "tensor of dimension {dim} needs a {0}x{0} matrix, got {1}x{1}",
                dim * dim,
                matrix.dim()
            )));
        }
        Ok(Self { dim, matrix })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> SymMatrix {
        self.matrix
    }

    /// Entry `T_{ijkl}`.
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let d = self.dim;
        self.matrix.matrix()[(i * d + j, k * d + l)]
    }
}

/// Closed-form `E (phi phi^T - Id)^{(x)2}` for `phi = sqrt(d) g / ||g||`,
/// `g` standard normal.
///
/// Nonzero entries: `iiii = (2d-2)/(d+2)`, `ijij = ijji = d/(d+2)` and
/// `iijj = -2/(d+2)` for `i != j`. This equals `2d/(d+2)` times the
/// orthogonal projector onto symmetric traceless matrices.
pub fn reference_tensor_s(d: usize) -> Result<FourthMomentTensor> {
    if d < 2 {
        return Err(Error::InvalidDim(d));
    }
    let df = d as f64;
    let iiii = (2.0 * df - 2.0) / (df + 2.0);
    let ijij = df / (df + 2.0);
    let iijj = -2.0 / (df + 2.0);
    let mut m = DMatrix::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            if i == j {
                m[(i * d + i, i * d + i)] = iiii;
            } else {
                m[(i * d + j, i * d + j)] = ijij;
                m[(i * d + j, j * d + i)] = ijij;
                m[(i * d + i, j * d + j)] = iijj;
            }
        }
    }
    FourthMomentTensor::new(d, SymMatrix::new(m)?)
}

fn check_weights(n: usize, weights: &[f64]) -> Result<f64> {
    if weights.len() != n {
        return Err(Error::ShapeError(format!(
            "{} weights for {n} points",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvariantViolation("weights must be finite and nonnegative".into()));
    }
    let total = par::sum(n, |i| weights[i]);
    if !(total > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    Ok(total)
}

/// Weighted average of `(z z^T - Id)^{(x)2}` over the rows of `samples`.
pub fn empirical_fourth(samples: &PointMatrix, weights: &[f64]) -> Result<FourthMomentTensor> {
    let n = samples.len();
    let total = check_weights(n, weights)?;
    let d = samples.dim();
    let m = d * d;
    let acc = par::chunked_reduce(
        n,
        || (vec![0.0; m * m], vec![0.0; m]),
        |(acc, y), i| {
            let w = weights[i];
            if w == 0.0 {
                return;
            }
            let z = samples.row(i);
            for a in 0..d {
                for b in 0..d {
                    y[a * d + b] = z[a] * z[b] - if a == b { 1.0 } else { 0.0 };
                }
            }
            for r in 0..m {
                let wr = w * y[r];
                let row = &mut acc[r * m..(r + 1) * m];
                for c in r..m {
                    row[c] += wr * y[c];
                }
            }
        },
        |(a, _), (b, _)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
    )
    .0;
    let mut out = DMatrix::zeros(m, m);
    for r in 0..m {
        for c in r..m {
            let v = acc[r * m + c] / total;
            out[(r, c)] = v;
            out[(c, r)] = v;
        }
    }
    FourthMomentTensor::new(d, SymMatrix::new(out)?)
}

/// Weighted mean and weighted covariance about that mean.
pub fn weighted_mean_and_second_moment(
    points: &PointMatrix,
    weights: &[f64],
) -> Result<(Vec<f64>, SymMatrix)> {
    let n = points.len();
    let total = check_weights(n, weights)?;
    let m = points.dim();
    let mut mean = par::chunked_reduce(
        n,
        || vec![0.0; m],
        |acc, i| {
            let w = weights[i];
            if w != 0.0 {
                acc.iter_mut().zip(points.row(i)).for_each(|(a, x)| *a += w * x);
            }
        },
        |a, b| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
    );
    mean.iter_mut().for_each(|v| *v /= total);
    let cov = weighted_second_moment_about(points, weights, &mean)?;
    Ok((mean, cov))
}

/// `(1 / sum w) sum_i w_i (x_i - c)(x_i - c)^T`.
pub fn weighted_second_moment_about(
    points: &PointMatrix,
    weights: &[f64],
    center: &[f64],
) -> Result<SymMatrix> {
    let n = points.len();
    let total = check_weights(n, weights)?;
    let m = points.dim();
    if center.len() != m {
        return Err(Error::ShapeError(format!(
            "center of length {} for points of dimension {m}",
            center.len()
        )));
    }
    let acc = par::chunked_reduce(
        n,
        || (vec![0.0; m * m], vec![0.0; m]),
        |(acc, y), i| {
            let w = weights[i];
            if w == 0.0 {
                return;
            }
            for ((yk, x), c) in y.iter_mut().zip(points.row(i)).zip(center) {
                *yk = x - c;
            }
            for r in 0..m {
                let wr = w * y[r];
                let row = &mut acc[r * m..(r + 1) * m];
                for c in r..m {
                    row[c] += wr * y[c];
                }
            }
        },
        |(a, _), (b, _)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
    )
    .0;
    let mut out = DMatrix::zeros(m, m);
    for r in 0..m {
        for c in r..m {
            let v = acc[r * m + c] / total;
            out[(r, c)] = v;
            out[(c, r)] = v;
        }
    }
    Ok(SymMatrix::symmetrize(out))
}

/// Unweighted second moment about the origin.
pub fn second_moment(points: &PointMatrix) -> SymMatrix {
    let w = vec![1.0; points.len()];
    weighted_second_moment_about(points, &w, &vec![0.0; points.dim()])
        .expect("uniform weights on a nonempty set")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptical::{sample, spatial_signs, EllipticalModel, RadialLaw};
    use proptest::prelude::*;

    #[test]
    fn reference_tensor_small_d() {
        let s = reference_tensor_s(2).unwrap();
        assert!((s.get(0, 0, 0, 0) - 0.5).abs() < 1e-15);
        assert!((s.get(0, 1, 0, 1) - 0.5).abs() < 1e-15);
        assert!((s.get(0, 1, 1, 0) - 0.5).abs() < 1e-15);
        assert!((s.get(0, 0, 1, 1) + 0.5).abs() < 1e-15);
        assert_eq!(s.get(0, 0, 0, 1), 0.0);
        assert!(matches!(reference_tensor_s(1), Err(Error::InvalidDim(1))));
    }

    #[test]
    fn reference_tensor_structure() {
        for d in [3, 5, 9] {
            let s = reference_tensor_s(d).unwrap();
            // Lone indices vanish.
            assert_eq!(s.get(0, 0, 1, 2), 0.0);
            assert_eq!(s.get(1, 2, 0, 0), 0.0);
            // ijij - iijj = 1.
            assert!((s.get(0, 1, 0, 1) - s.get(0, 0, 1, 1) - 1.0).abs() < 1e-15);
            // Scaled projector: S^2 = (2d/(d+2)) S.
            let m = s.matrix().matrix();
            let k = 2.0 * d as f64 / (d as f64 + 2.0);
            assert!((m * m - m * k).norm() < 1e-12);
            assert!(s.matrix().min_eigenvalue() > -1e-12);
        }
        let big = reference_tensor_s(40).unwrap();
        assert!((big.get(0, 0, 0, 0) - 2.0).abs() < 0.15);
    }

    #[test]
    fn empirical_fourth_trivial() {
        let p = PointMatrix::new(1, vec![1.0]).unwrap();
        let t = empirical_fourth(&p, &[1.0]).unwrap();
        assert_eq!(t.get(0, 0, 0, 0), 0.0);
        let p = PointMatrix::new(1, vec![1.0, -1.0, 2.0]).unwrap();
        let t = empirical_fourth(&p, &[1.0, 1.0, 2.0]).unwrap();
        // (0 + 0 + 2 * 9) / 4
        assert!((t.get(0, 0, 0, 0) - 4.5).abs() < 1e-15);
        assert!(matches!(empirical_fourth(&p, &[1.0]), Err(Error::ShapeError(_))));
    }

    #[test]
    fn empirical_fourth_matches_reference() {
        let d = 3;
        let n = 1_000_000;
        let m = EllipticalModel::new(vec![0.0; d], DMatrix::identity(d, d), RadialLaw::ChiD).unwrap();
        let signs = spatial_signs(sample(&m, n, 17).unwrap().points()).unwrap();
        let t = empirical_fourth(&signs, &vec![1.0; n]).unwrap();
        let s = reference_tensor_s(d).unwrap();
        for (i, j, k, l) in [(0, 0, 0, 0), (0, 1, 0, 1), (0, 0, 1, 1), (0, 0, 1, 2), (1, 2, 1, 2)] {
            let samples: Vec<f64> = signs
                .rows()
                .map(|z| {
                    let a = z[i] * z[j] - if i == j { 1.0 } else { 0.0 };
                    let b = z[k] * z[l] - if k == l { 1.0 } else { 0.0 };
                    a * b
                })
                .collect();
            let mean = samples.iter().sum::<f64>() / n as f64;
            let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - t.get(i, j, k, l)).abs() < 1e-9);
            assert!(
                (mean - s.get(i, j, k, l)).abs() <= 5.0 * se,
                "entry {i}{j}{k}{l}: {mean} vs {}",
                s.get(i, j, k, l)
            );
        }
    }

    #[test]
    fn weighted_moment_examples() {
        let p = PointMatrix::new(1, vec![0.0, 2.0]).unwrap();
        let (mu, cov) = weighted_mean_and_second_moment(&p, &[0.5, 0.5]).unwrap();
        assert_eq!(mu, vec![1.0]);
        assert_eq!(cov.matrix()[(0, 0)], 1.0);

        let p = PointMatrix::new(2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (mu, cov) = weighted_mean_and_second_moment(&p, &[0.0, 1.0 / 3.0, 0.0]).unwrap();
        assert_eq!(mu, vec![3.0, 4.0]);
        assert_eq!(cov.frobenius(), 0.0);

        assert!(matches!(
            weighted_mean_and_second_moment(&p, &[0.0; 3]),
            Err(Error::DegenerateWeights)
        ));
    }

    #[test]
    fn weighted_moments_of_gaussian() {
        let d = 4;
        let n = 100_000;
        let m = EllipticalModel::new(vec![0.0; d], DMatrix::identity(d, d), RadialLaw::ChiD).unwrap();
        let s = sample(&m, n, 5).unwrap();
        let (mu, cov) = weighted_mean_and_second_moment(s.points(), &vec![1.0 / n as f64; n]).unwrap();
        // Standard error of each mean coordinate is 1/sqrt(n) ~ 3.2e-3.
        assert!(mu.iter().all(|v| v.abs() < 0.016));
        let dev = (cov.matrix() - DMatrix::identity(d, d)).norm();
        assert!(dev < 0.04, "{dev}");
    }

    proptest! {
        #[test]
        fn empirical_fourth_is_psd(
            data in prop::collection::vec(-3.0f64..3.0, 3 * 12),
            w in prop::collection::vec(0.0f64..1.0, 12),
        ) {
            prop_assume!(w.iter().sum::<f64>() > 1e-3);
            let p = PointMatrix::new(3, data).unwrap();
            let t = empirical_fourth(&p, &w).unwrap();
            let scale = 1.0 + t.matrix().norm();
            prop_assert!(t.matrix().min_eigenvalue() >= -1e-10 * scale);
            // Index swap within a factor leaves entries unchanged.
            prop_assert!((t.get(0, 1, 2, 0) - t.get(1, 0, 0, 2)).abs() <= 1e-12 * scale);
        }
    }
}
