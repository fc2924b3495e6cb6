//! Worst-case direction oracles for the filter.
//!
//! Both oracles maximize `|<P, M>|` over a family of `d^2 x d^2` matrices
//! `P`. The Euclidean family is `{V V^T : ||V|| <= R}`, solved by an
//! eigendecomposition. The sum-of-squares family contains the fourth-moment
//! matrices `P_{(ij),(kl)} = E~ v_i v_j v_k v_l` of degree-4
//! pseudo-expectations on the sphere `||v||^2 = R`, solved as two
//! semidefinite programs.

mod moment;
pub mod sdp;

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{eig_unchecked, SymMatrix};
use moment::{add, monomials, Exponent, MomentRelaxation};
use sdp::SdpSettings;

/// Largest dimension accepted by the sum-of-squares oracle.
pub const MAX_SOS_DIM: usize = 16;

/// A degree-4 pseudo-expectation over `v` in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoExpectation {
    dim: usize,
    radius: f64,
    moments: HashMap<Exponent, f64>,
}

impl PseudoExpectation {
    fn from_moments(dim: usize, radius: f64, table: &[Exponent], values: Vec<f64>) -> Self {
        Self {
            dim,
            radius,
            moments: table.iter().cloned().zip(values).collect(),
        }
    }

    /// The point mass at `v`; its radius is `||v||^2`.
    pub fn point_mass(v: &[f64]) -> Self {
        let d = v.len();
        let table = monomials(d, 4);
        let values = table
            .iter()
            .map(|e| e.iter().zip(v).map(|(&p, x)| x.powi(p as i32)).product())
            .collect();
        Self::from_moments(d, v.iter().map(|x| x * x).sum(), &table, values)
    }

    /// Convex combination `sum_k w_k E~_k`; weights are normalized.
    pub fn mixture(parts: &[(f64, PseudoExpectation)]) -> Result<Self> {
        let first = &parts
            .first()
            .ok_or_else(|| Error::ShapeError("empty mixture".into()))?
            .1;
        let total: f64 = parts.iter().map(|p| p.0).sum();
        if !(total > 0.0) || parts.iter().any(|p| p.0 < 0.0) {
            return Err(Error::DegenerateWeights);
        }
        if parts
            .iter()
            .any(|p| p.1.dim != first.dim || (p.1.radius - first.radius).abs() > 1e-12 * (1.0 + first.radius))
        {
            return Err(Error::ShapeError("mixture components differ in dimension or radius".into()));
        }
        let mut moments = first.moments.clone();
        for (e, m) in moments.iter_mut() {
            *m = parts.iter().map(|(w, p)| w * p.moments[e]).sum::<f64>() / total;
        }
        Ok(Self {
            dim: first.dim,
            radius: first.radius,
            moments,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// `E~ v^e` for an exponent vector of degree at most 4.
    pub fn moment(&self, exponent: &[u8]) -> f64 {
        self.moments[exponent]
    }

    fn basis(&self) -> Vec<Exponent> {
        monomials(self.dim, 2)
    }

    /// Moment matrix over `{1, v_i, v_i v_j (i <= j)}`.
    pub fn moment_matrix(&self) -> DMatrix<f64> {
        let basis = self.basis();
        let n = basis.len();
        DMatrix::from_fn(n, n, |a, b| self.moments[&add(&basis[a], &basis[b])])
    }

    /// `P_{(ij),(kl)} = E~ v_i v_j v_k v_l`.
    pub fn p_matrix(&self) -> DMatrix<f64> {
        let d = self.dim;
        let mut p = DMatrix::zeros(d * d, d * d);
        let mut e = vec![0u8; d];
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        e.iter_mut().for_each(|x| *x = 0);
                        e[i] += 1;
                        e[j] += 1;
                        e[k] += 1;
                        e[l] += 1;
                        p[(i * d + j, k * d + l)] = self.moments[&e];
                    }
                }
            }
        }
        p
    }

    /// `<P, M>`.
    pub fn evaluate(&self, m: &DMatrix<f64>) -> f64 {
        self.p_matrix().iter().zip(m.iter()).map(|(a, b)| a * b).sum()
    }

    /// Checks normalization, the sphere constraint against every monomial
    /// of degree at most two, and positivity of the moment matrix.
    pub fn check_membership(&self, tol: f64) -> Result<()> {
        let zero = vec![0u8; self.dim];
        if (self.moments[&zero] - 1.0).abs() > tol {
            return Err(Error::InvariantViolation(format!(
                "E~ 1 = {}",
                self.moments[&zero]
            )));
        }
        let scale = 1.0 + self.radius * self.radius;
        for q in self.basis() {
            let sphere: f64 = (0..self.dim)
                .map(|i| {
                    let mut e = q.clone();
                    e[i] += 2;
                    self.moments[&e]
                })
                .sum::<f64>()
                - self.radius * self.moments[&q];
            if sphere.abs() > tol * scale {
                return Err(Error::InvariantViolation(format!(
                    "sphere constraint violated by {sphere:e} against {q:?}"
                )));
            }
        }
        let y = self.moment_matrix();
        let min = eig_unchecked(&y).values.last().copied().unwrap_or(0.0);
        if min < -tol * (1.0 + y.norm()) {
            return Err(Error::InvariantViolation(format!(
                "moment matrix has eigenvalue {min:e}"
            )));
        }
        Ok(())
    }
}

/// The maximizing `P` of an oracle call.
#[derive(Debug, Clone, PartialEq)]
pub enum Certificate {
    /// `P = V V^T`.
    Vector(Vec<f64>),
    Pseudo(PseudoExpectation),
}

impl Certificate {
    /// The `m x m` matrix `P`.
    pub fn p_matrix(&self) -> DMatrix<f64> {
        match self {
            Certificate::Vector(v) => {
                let col = nalgebra::DVector::from_column_slice(v);
                &col * col.transpose()
            }
            Certificate::Pseudo(pe) => pe.p_matrix(),
        }
    }

    /// Short description for traces.
    pub fn summary(&self) -> String {
        match self {
            Certificate::Vector(v) => {
                let (k, x) = v
                    .iter()
                    .enumerate()
                    .fold((0, 0.0_f64), |a, (i, &x)| if x.abs() > a.1.abs() { (i, x) } else { a });
                format!("vector, dominant coordinate {k} ({x:.3})")
            }
            Certificate::Pseudo(pe) => format!("pseudo-expectation, d={}, R={}", pe.dim, pe.radius),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// `|<P*, M>|`.
    pub value: f64,
    /// Sign of `<P*, M>`.
    pub sign: f64,
    pub certificate: Certificate,
}

/// Euclidean oracle: `R^2` times the largest-magnitude eigenvalue of `M`.
pub fn worst_p_euclidean(m: &SymMatrix, radius: f64) -> OracleResult {
    let eig = m.eig();
    let (k, lambda) = eig.max_abs();
    let v: Vec<f64> = eig.vectors.column(k).iter().map(|x| x * radius).collect();
    OracleResult {
        value: radius * radius * lambda.abs(),
        sign: if lambda < 0.0 { -1.0 } else { 1.0 },
        certificate: Certificate::Vector(v),
    }
}

/// Reusable sum-of-squares oracle for a fixed dimension and radius.
#[derive(Debug, Clone)]
pub struct SosOracle {
    relaxation: MomentRelaxation,
    settings: SdpSettings,
}

impl SosOracle {
    pub fn new(d: usize, radius: f64) -> Result<Self> {
        if d == 0 || d > MAX_SOS_DIM {
            return Err(Error::InvalidDim(d));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidScale(format!("radius {radius} must be positive")));
        }
        Ok(Self {
            relaxation: MomentRelaxation::new(d, radius),
            settings: SdpSettings {
                gap_tol: 1e-8,
                ..SdpSettings::default()
            },
        })
    }

    pub fn with_settings(mut self, settings: SdpSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn dim(&self) -> usize {
        self.relaxation.d
    }

    pub fn radius(&self) -> f64 {
        self.relaxation.radius
    }

    /// Maximizes `|<E~ v^{(x)4}, M>|` over the relaxation.
    pub fn worst_p(&self, m: &SymMatrix) -> Result<OracleResult> {
        let d = self.dim();
        if m.dim() != d * d {
            return Err(Error::ShapeError(format!(
                "objective must be {0}x{0}, got {1}x{1}",
                d * d,
                m.dim()
            )));
        }
        let rel = &self.relaxation;
        let obj = rel.quartic_objective(m.matrix());
        let mut c = vec![0.0; rel.free.len()];
        for &(k, v) in &obj.terms {
            c[k] = v;
        }
        let (hi, lo) = crate::par::join(
            || sdp::maximize(&rel.lmi, &c, &self.settings),
            || sdp::minimize(&rel.lmi, &c, &self.settings),
        );
        let (hi, lo) = match (hi, lo) {
            (Ok(h), Ok(l)) => (h, l),
            (h, l) => {
                let best = [h, l]
                    .into_iter()
                    .filter_map(|r| match r {
                        Ok(s) => Some(s.value),
                        Err(Error::SolverFailure { best_value, .. }) => best_value,
                        Err(_) => None,
                    })
                    .map(|v| (v + obj.c0).abs())
                    .fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))));
                return Err(Error::SolverFailure {
                    iterations: self.settings.max_iters,
                    reason: "sum-of-squares relaxation did not converge".into(),
                    best_value: best,
                });
            }
        };
        let vhi = hi.value + obj.c0;
        let vlo = lo.value + obj.c0;
        let (sol, value) = if vhi.abs() >= vlo.abs() { (hi, vhi) } else { (lo, vlo) };
        let pe = PseudoExpectation::from_moments(
            d,
            rel.radius,
            &rel.table,
            rel.all_moments(&sol.t),
        );
        Ok(OracleResult {
            value: value.abs(),
            sign: if value < 0.0 { -1.0 } else { 1.0 },
            certificate: Certificate::Pseudo(pe),
        })
    }
}

/// One-shot form of [`SosOracle::worst_p`].
pub fn worst_p_sos(m: &SymMatrix, radius: f64) -> Result<OracleResult> {
    let dd = m.dim();
    let d = (dd as f64).sqrt().round() as usize;
    if d * d != dd {
        return Err(Error::ShapeError(format!("{dd} is not a square dimension")));
    }
    SosOracle::new(d, radius)?.worst_p(m)
}

/// The fourth-moment matrix of a pseudo-expectation.
pub fn extract_p_matrix(pe: &PseudoExpectation) -> DMatrix<f64> {
    pe.p_matrix()
}

/// `<v^{(x)4}, M>` for a vector `v`.
pub fn rank_one_value(v: &[f64], m: &DMatrix<f64>) -> f64 {
    let d = v.len();
    let mut flat = vec![0.0; d * d];
    crate::linalg::outer_flat(v, &mut flat);
    let x = nalgebra::DVector::from_vec(flat);
    (x.transpose() * m * &x)[(0, 0)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_sym(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn scalar_objective() {
        for m in [2.0, -3.5] {
            let r = worst_p_sos(&SymMatrix::from_diagonal(&[m]), 1.0).unwrap();
            assert!((r.value - m.abs()).abs() < 1e-6);
            assert_eq!(r.sign, m.signum());
        }
    }

    #[test]
    fn identity_objective_is_constant() {
        let r = worst_p_sos(&SymMatrix::identity(9), 1.0).unwrap();
        assert!((r.value - 1.0).abs() < 1e-6, "{}", r.value);
    }

    #[test]
    fn rank_one_objective() {
        let d = 3;
        let mut m = DMatrix::zeros(9, 9);
        m[(0, 0)] = 1.0;
        let r = worst_p_sos(&SymMatrix::new(m.clone()).unwrap(), 1.0).unwrap();
        assert!((r.value - 1.0).abs() < 1e-6, "{}", r.value);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let best = (0..10_000)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = crate::linalg::norm2(&v);
                let v: Vec<f64> = v.iter().map(|x| x / n).collect();
                rank_one_value(&v, &m).abs()
            })
            .fold(0.0, f64::max);
        assert!(r.value >= best - 1e-6);
        assert!(r.value <= 1.0 + 1e-6);
    }

    #[test]
    fn certificates_are_feasible_and_consistent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let oracle = SosOracle::new(3, 1.0).unwrap();
        for _ in 0..5 {
            let m = SymMatrix::new(random_sym(9, &mut rng)).unwrap();
            let r = oracle.worst_p(&m).unwrap();
            let Certificate::Pseudo(pe) = &r.certificate else { panic!() };
            pe.check_membership(1e-6).unwrap();
            let signed = pe.evaluate(m.matrix());
            assert!((signed - r.sign * r.value).abs() < 1e-6 * (1.0 + r.value));
        }
    }

    #[test]
    fn euclidean_examples() {
        let r = worst_p_euclidean(&SymMatrix::from_diagonal(&[0.0, 0.0]), 1.0);
        assert_eq!(r.value, 0.0);
        let r = worst_p_euclidean(&SymMatrix::from_diagonal(&[3.0, -5.0]), 1.0);
        assert_eq!(r.value, 5.0);
        assert_eq!(r.sign, -1.0);
        let Certificate::Vector(v) = r.certificate else { panic!() };
        assert!(v[0].abs() < 1e-12 && (v[1].abs() - 1.0).abs() < 1e-12);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let m = SymMatrix::new(random_sym(6, &mut rng)).unwrap();
        let r = worst_p_euclidean(&m, 2.0);
        let eig = nalgebra::SymmetricEigen::new(m.matrix().clone());
        let top = eig.eigenvalues.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        assert!((r.value - 4.0 * top).abs() < 1e-10);
        let p = r.certificate.p_matrix();
        let inner: f64 = p.iter().zip(m.matrix().iter()).map(|(a, b)| a * b).sum();
        assert!((inner - r.sign * r.value).abs() < 1e-9);
    }

    #[test]
    fn point_mass_and_mixture_p_matrices() {
        let pe = PseudoExpectation::point_mass(&[1.0, 0.0]);
        let p = extract_p_matrix(&pe);
        let mut expected = DMatrix::zeros(4, 4);
        expected[(0, 0)] = 1.0;
        assert_eq!(p, expected);
        pe.check_membership(1e-12).unwrap();

        let parts: Vec<(f64, PseudoExpectation)> = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
            .iter()
            .map(|v| (0.25, PseudoExpectation::point_mass(v)))
            .collect();
        let mix = PseudoExpectation::mixture(&parts).unwrap();
        mix.check_membership(1e-12).unwrap();
        let p = mix.p_matrix();
        assert_eq!(p[(0, 0)], 0.5);
        assert_eq!(p[(3, 3)], 0.5);
        assert_eq!(p[(0, 3)], 0.0);
        assert_eq!(p[(1, 1)], 0.0);
    }

    #[test]
    fn objective_mapping_matches_p_matrix() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let d = 3;
        let rel = MomentRelaxation::new(d, 1.0);
        for _ in 0..5 {
            let m = random_sym(d * d, &mut rng);
            let obj = rel.quartic_objective(&m);
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = crate::linalg::norm2(&v);
            let v: Vec<f64> = v.iter().map(|x| x / n).collect();
            let pe = PseudoExpectation::point_mass(&v);
            let t: Vec<f64> = rel.free.iter().map(|e| pe.moment(e)).collect();
            assert!((obj.eval(&t) - pe.evaluate(&m)).abs() < 1e-10);
            assert!((obj.eval(&t) - rank_one_value(&v, &m)).abs() < 1e-10);
        }
    }
}
