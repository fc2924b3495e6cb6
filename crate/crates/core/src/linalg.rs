//! Dense symmetric matrices, matrix powers and the relative error metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used for symmetry checks.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// `n` points in `R^dim`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl PointMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDim(0));
        }
        if data.len() % dim != 0 {
            return Err(Error::ShapeError(format!(
                "{} values do not split into rows of length {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; n * dim],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or(Error::TooFewSamples { needed: 1, got: 0 })?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::ShapeError(format!(
                    "row {i} has length {}, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Keeps the rows in `range`.
    pub fn slice_rows(&self, start: usize, end: usize) -> PointMatrix {
        PointMatrix {
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        }
    }

    /// Applies `m` to every row: `x -> m x`.
    pub fn transform(&self, m: &DMatrix<f64>) -> Result<PointMatrix> {
        if m.ncols() != self.dim {
            return Err(Error::ShapeError(format!(
                "cannot apply a {}x{} matrix to points of dimension {}",
                m.nrows(),
                m.ncols(),
                self.dim
            )));
        }
        let out_dim = m.nrows();
        let mut data = vec![0.0; self.len() * out_dim];
        crate::par::for_each_block_mut(&mut data, out_dim * crate::par::CHUNK, |b, block| {
            for (k, out) in block.chunks_exact_mut(out_dim).enumerate() {
                let x = self.row(b * crate::par::CHUNK + k);
                for (r, o) in out.iter_mut().enumerate() {
                    *o = (0..self.dim).map(|c| m[(r, c)] * x[c]).sum();
                }
            }
        });
        Ok(PointMatrix { dim: out_dim, data })
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, matching `values`.
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    /// Rebuilds `V diag(f(lambda)) V^T`.
    pub fn recompose(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, &l) in self.values.iter().enumerate() {
            let s = f(l);
            for i in 0..d {
                scaled[(i, j)] *= s;
            }
        }
        let mut out = &scaled * self.vectors.transpose();
        symmetrize_in_place(&mut out);
        out
    }

    /// Largest eigenvalue in absolute value, with its index.
    pub fn max_abs(&self) -> (usize, f64) {
        let first = self.values[0];
        let last = *self.values.last().expect("nonempty spectrum");
        if last.abs() > first.abs() {
            (self.values.len() - 1, last)
        } else {
            (0, first)
        }
    }
}

fn max_abs_entry(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, &x| a.max(x.abs()))
}

fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Checks `|M[i,j] - M[j,i]| <= tol * (1 + max|M|)`.
pub fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::ShapeError(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let tol = SYMMETRY_TOL * (1.0 + max_abs_entry(m));
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let gap = (m[(i, j)] - m[(j, i)]).abs();
            if gap > tol || !m[(i, j)].is_finite() {
                return Err(Error::InvariantViolation(format!(
                    "matrix is not symmetric at ({i},{j}): asymmetry {gap:e}"
                )));
            }
        }
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix with descending eigenvalues.
pub fn sym_eig(m: &DMatrix<f64>) -> Result<SymEigen> {
    check_symmetric(m)?;
    Ok(eig_unchecked(m))
}

pub(crate) fn eig_unchecked(m: &DMatrix<f64>) -> SymEigen {
    let n = m.nrows();
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    SymEigen { values, vectors }
}

/// A dense symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps `m` after checking symmetry; the stored value is `(M + M^T)/2`.
    pub fn new(mut m: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&m)?;
        symmetrize_in_place(&mut m);
        Ok(Self(m))
    }

    /// Replaces `m` by `(M + M^T)/2` without checking how asymmetric it was.
    pub fn symmetrize(mut m: DMatrix<f64>) -> Self {
        symmetrize_in_place(&mut m);
        Self(m)
    }

    pub fn identity(d: usize) -> Self {
        Self(DMatrix::identity(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeError("matrix rows must form a square".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| (0..self.dim()).map(|j| self.0[(i, j)]).collect())
            .collect()
    }

    pub fn eig(&self) -> SymEigen {
        eig_unchecked(&self.0)
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Spectral norm.
    pub fn norm(&self) -> f64 {
        self.eig().max_abs().1.abs()
    }

    pub fn frobenius(&self) -> f64 {
        self.0.norm()
    }

    pub fn scaled(&self, c: f64) -> SymMatrix {
        SymMatrix(&self.0 * c)
    }

    /// `A M A^T`.
    pub fn conjugate(&self, a: &DMatrix<f64>) -> SymMatrix {
        SymMatrix::symmetrize(a * &self.0 * a.transpose())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        *self.eig().values.last().expect("nonempty")
    }
}

/// A positive-definite scatter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterMatrix {
    base: SymMatrix,
    normalized: bool,
}

impl ScatterMatrix {
    pub fn new(base: SymMatrix) -> Result<Self> {
        let min = base.min_eigenvalue();
        if !(min > 0.0) {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: min,
            });
        }
        let d = base.dim() as f64;
        let normalized = (base.trace() - d).abs() <= 1e-9 * d;
        Ok(Self { base, normalized })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            base: SymMatrix::identity(d),
            normalized: true,
        }
    }

    pub fn sym(&self) -> &SymMatrix {
        &self.base
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        self.base.matrix()
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Whether `Tr = d` holds.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn into_sym(self) -> SymMatrix {
        self.base
    }
}

/// Rescales a positive-definite matrix so that its trace equals its dimension.
pub fn trace_normalize(m: &SymMatrix) -> Result<ScatterMatrix> {
    let tr = m.trace();
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(Error::InvalidScale(format!("trace {tr} is not positive")));
    }
    let scaled = m.scaled(m.dim() as f64 / tr);
    let mut out = ScatterMatrix::new(scaled)?;
    out.normalized = true;
    Ok(out)
}

/// Supported exponents for [`matrix_power`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Power {
    Half,
    NegHalf,
    NegOne,
}

impl Power {
    fn exponent(self) -> f64 {
        match self {
            Power::Half => 0.5,
            Power::NegHalf => -0.5,
            Power::NegOne => -1.0,
        }
    }
}

/// `V diag(lambda^p) V^T` for positive-definite `m`.
pub fn matrix_power(m: &SymMatrix, p: Power) -> Result<SymMatrix> {
    sym_power(m, p.exponent())
}

/// Real power of a positive-definite matrix.
pub fn sym_power(m: &SymMatrix, p: f64) -> Result<SymMatrix> {
    let eig = m.eig();
    let min = *eig.values.last().expect("nonempty");
    if !(min > 0.0) {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: min,
        });
    }
    Ok(SymMatrix(eig.recompose(|l| l.powf(p))))
}

/// `Sigma^{-1/2} Est Sigma^{-1/2} - Id`.
fn relative_deviation(sigma: &ScatterMatrix, estimate: &SymMatrix) -> Result<SymMatrix> {
    if sigma.dim() != estimate.dim() {
        return Err(Error::ShapeError(format!(
            "dimension mismatch: {} vs {}",
            sigma.dim(),
            estimate.dim()
        )));
    }
    let w = matrix_power(sigma.sym(), Power::NegHalf)?;
    let mut dev = estimate.conjugate(w.matrix()).into_inner();
    for i in 0..dev.nrows() {
        dev[(i, i)] -= 1.0;
    }
    Ok(SymMatrix(dev))
}

/// `||Sigma^{-1/2} Est Sigma^{-1/2} - Id||` in spectral norm.
pub fn relative_spectral_error(sigma: &ScatterMatrix, estimate: &SymMatrix) -> Result<f64> {
    Ok(relative_deviation(sigma, estimate)?.norm())
}

/// `||Sigma^{-1/2} Est Sigma^{-1/2} - Id||_F`.
pub fn relative_frobenius_error(sigma: &ScatterMatrix, estimate: &SymMatrix) -> Result<f64> {
    Ok(relative_deviation(sigma, estimate)?.frobenius())
}

/// `Tr(Sigma) / ||Sigma||`.
pub fn effective_rank(sigma: &ScatterMatrix) -> f64 {
    sigma.sym().trace() / sigma.sym().norm()
}

/// Row-major flattening of `x x^T`.
pub fn outer_flat(x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = x[i] * x[j];
        }
    }
}

/// Reshapes a length-`d^2` vector into a `d x d` matrix (row-major).
pub fn unflatten(v: &[f64], d: usize) -> Result<DMatrix<f64>> {
    if v.len() != d * d {
        return Err(Error::ShapeError(format!(
            "vector of length {} is not a flattened {d}x{d} matrix",
            v.len()
        )));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| v[i * d + j]))
}

/// Row-major flattening of a square matrix.
pub fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = vec![0.0; d * m.ncols()];
    for i in 0..d {
        for j in 0..m.ncols() {
            out[i * m.ncols() + j] = m[(i, j)];
        }
    }
    out
}

/// Euclidean norm of a slice.
pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::*;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
        }
    }

    fn random_sym(d: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a + a.transpose()
    }

    fn random_pd(d: usize, seed: u64) -> SymMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::symmetrize(&a * a.transpose() + DMatrix::identity(d, d) * 0.1)
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = sym_eig(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        let e = sym_eig(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]))).unwrap();
        assert_eq!(e.values, vec![9.0, 4.0]);
        assert!((e.vectors[(1, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((e.vectors[(0, 1)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eig_round_trip() {
        for seed in 0..20 {
            let m = random_sym(7, seed);
            let e = sym_eig(&m).unwrap();
            let back = e.recompose(|l| l);
            let resid = (&back - &m).norm() / m.norm();
            assert!(resid <= 1e-9, "residual {resid}");
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
            let vtv = e.vectors.transpose() * &e.vectors;
            assert!((vtv - DMatrix::identity(7, 7)).norm() < 1e-10);
        }
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(sym_eig(&m), Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn powers() {
        let id = SymMatrix::identity(4);
        let r = matrix_power(&id, Power::NegHalf).unwrap();
        assert!((r.matrix() - DMatrix::identity(4, 4)).norm() < 1e-14);

        let m = SymMatrix::from_diagonal(&[4.0, 9.0]);
        let r = matrix_power(&m, Power::Half).unwrap();
        assert!((r.matrix() - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).norm() < 1e-14);

        let singular = SymMatrix::from_diagonal(&[1.0, 0.0]);
        assert!(matches!(
            matrix_power(&singular, Power::NegOne),
            Err(Error::NotPositiveDefinite { .. })
        ));

        let pd = random_pd(6, 3);
        let h = matrix_power(&pd, Power::Half).unwrap();
        let sq = h.matrix() * h.matrix();
        assert!((sq - pd.matrix()).norm() / pd.matrix().norm() < 1e-8);
        let inv = matrix_power(&pd, Power::NegOne).unwrap();
        assert!((inv.matrix() * pd.matrix() - DMatrix::identity(6, 6)).norm() < 1e-8);
    }

    #[test]
    fn relative_errors_examples() {
        let s = ScatterMatrix::new(random_pd(4, 1)).unwrap();
        assert!(relative_spectral_error(&s, s.sym()).unwrap() < 1e-12);
        assert!(relative_frobenius_error(&s, s.sym()).unwrap() < 1e-12);

        let id2 = ScatterMatrix::identity(2);
        let two = SymMatrix::identity(2).scaled(2.0);
        assert!(close(relative_spectral_error(&id2, &two).unwrap(), 1.0, 1e-14));
        assert!(close(relative_frobenius_error(&id2, &two).unwrap(), 2f64.sqrt(), 1e-14));

        let d5 = ScatterMatrix::identity(5);
        let two5 = SymMatrix::identity(5).scaled(2.0);
        assert!(close(relative_frobenius_error(&d5, &two5).unwrap(), 5f64.sqrt(), 1e-14));

        let s14 = ScatterMatrix::new(SymMatrix::from_diagonal(&[1.0, 4.0])).unwrap();
        assert!(close(
            relative_spectral_error(&s14, &SymMatrix::identity(2)).unwrap(),
            0.75,
            1e-14
        ));
    }

    #[test]
    fn effective_rank_examples() {
        assert!(close(effective_rank(&ScatterMatrix::identity(7)), 7.0, 1e-14));
        let s = ScatterMatrix::new(SymMatrix::from_diagonal(&[2.0, 1.0, 1.0])).unwrap();
        assert!(close(effective_rank(&s), 2.0, 1e-14));
    }

    #[test]
    fn trace_normalize_examples() {
        let n = trace_normalize(&SymMatrix::identity(3)).unwrap();
        assert!(n.is_normalized());
        assert!((n.matrix() - DMatrix::identity(3, 3)).norm() < 1e-14);
        let n = trace_normalize(&SymMatrix::identity(4).scaled(5.0)).unwrap();
        assert!((n.matrix() - DMatrix::identity(4, 4)).norm() < 1e-14);
        let n = trace_normalize(&SymMatrix::from_diagonal(&[1.0, 3.0])).unwrap();
        assert!(close(n.matrix()[(0, 0)], 0.5, 1e-14));
        assert!(close(n.matrix()[(1, 1)], 1.5, 1e-14));
        let neg = SymMatrix::identity(2).scaled(-1.0);
        assert!(matches!(trace_normalize(&neg), Err(Error::InvalidScale(_))));
    }

    #[test]
    fn point_matrix_shape_checks() {
        assert!(PointMatrix::new(3, vec![0.0; 7]).is_err());
        let p = PointMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.row(1), &[3.0, 4.0]);
        let t = p.transform(&DMatrix::from_row_slice(1, 2, &[1.0, 1.0])).unwrap();
        assert_eq!(t.as_slice(), &[3.0, 7.0]);
    }

    fn pd_from(d: usize, seed: u64) -> ScatterMatrix {
        ScatterMatrix::new(random_pd(d, seed)).unwrap()
    }

    fn orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
        sym_eig(&random_sym(d, seed)).unwrap().vectors
    }

    proptest::proptest! {
        #[test]
        fn frobenius_dominates_spectral(d in 1usize..7, s1 in 0u64..1000, s2 in 0u64..1000) {
            let sigma = pd_from(d, s1);
            let est = random_pd(d, s2);
            let spectral = relative_spectral_error(&sigma, &est).unwrap();
            let frob = relative_frobenius_error(&sigma, &est).unwrap();
            proptest::prop_assert!(frob >= spectral * (1.0 - 1e-12));
            proptest::prop_assert!(frob <= spectral * (d as f64).sqrt() * (1.0 + 1e-9));
        }

        #[test]
        fn errors_invariant_under_rotation(d in 2usize..6, s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000) {
            let sigma = pd_from(d, s1);
            let est = random_pd(d, s2);
            let o = orthogonal(d, s3);
            let rs = ScatterMatrix::new(sigma.sym().conjugate(&o)).unwrap();
            let re = est.conjugate(&o);
            let a = relative_frobenius_error(&sigma, &est).unwrap();
            let b = relative_frobenius_error(&rs, &re).unwrap();
            proptest::prop_assert!(close(a, b, 1e-7), "{} vs {}", a, b);
            let a = relative_spectral_error(&sigma, &est).unwrap();
            let b = relative_spectral_error(&rs, &re).unwrap();
            proptest::prop_assert!(close(a, b, 1e-7), "{} vs {}", a, b);
        }

        #[test]
        fn effective_rank_scale_invariant(d in 1usize..7, seed in 0u64..1000, c in 0.01f64..100.0) {
            let sigma = pd_from(d, seed);
            let scaled = ScatterMatrix::new(sigma.sym().scaled(c)).unwrap();
            let r = effective_rank(&sigma);
            proptest::prop_assert!(close(r, effective_rank(&scaled), 1e-10));
            proptest::prop_assert!(r >= 1.0 - 1e-12 && r <= d as f64 + 1e-12);
        }

        #[test]
        fn relative_error_triangle(d in 1usize..6, s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000) {
            // err(A, C) <= err(A, B) + (1 + err(A, B)) err(B, C)
            let a = pd_from(d, s1);
            let b = pd_from(d, s2);
            let c = random_pd(d, s3);
            let ab = relative_spectral_error(&a, b.sym()).unwrap();
            let bc = relative_spectral_error(&b, &c).unwrap();
            let ac = relative_spectral_error(&a, &c).unwrap();
            proptest::prop_assert!(ac <= (ab + (1.0 + ab) * bc) * (1.0 + 1e-9) + 1e-12);
        }

        #[test]
        fn trace_normalize_is_idempotent(d in 1usize..7, seed in 0u64..1000) {
            let n = trace_normalize(&random_pd(d, seed)).unwrap();
            proptest::prop_assert!(n.is_normalized());
            let again = trace_normalize(n.sym()).unwrap();
            proptest::prop_assert!((again.matrix() - n.matrix()).amax() < 1e-12);
        }
    }
}
