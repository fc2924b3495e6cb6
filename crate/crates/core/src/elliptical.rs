//! Elliptical samplers and the spatial-sign maps.
//!
//! A draw is `x = mu + xi * A * U` with `U` uniform on the unit sphere and
//! `xi >= 0` independent of `U`. Sampling runs in blocks of
//! [`SAMPLE_BLOCK`] points. Block `b` draws its directions from ChaCha
//! stream `2b` and its radii from stream `2b + 1`, both keyed by the seed,
//! so output is independent of the thread count and two models that differ
//! only in their radial law share the same directions under the same seed.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, PointMatrix, ScatterMatrix, SymMatrix};
use crate::par;

/// Points per independently seeded sampling block.
pub const SAMPLE_BLOCK: usize = 4096;

/// Default constant `C` in `Delta = C * sqrt(d ln d)`.
pub const DEFAULT_TRUNCATION_C: f64 = 3.0;

/// Law of the radial factor `xi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RadialLaw {
    /// `xi = ||g||` for a standard normal `g`; the Gaussian case.
    ChiD,
    /// `xi = sqrt(d)`; uniform on the ellipsoid surface.
    Constant,
    /// `xi = ||g|| * sqrt(nu / chi2_nu)`; multivariate t, Cauchy-type at `nu = 1`.
    StudentT { nu: f64 },
    /// `xi = sqrt(W) ||g||` with `W ~ Exp(1)`; multivariate Laplace.
    ExponentialNorm,
    /// Uniform over the solid ellipsoid, scaled so that `E xi^2 = d`.
    BallUniform,
}

impl RadialLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RadialLaw::StudentT { nu } if !(nu > 0.0 && nu.is_finite()) => Err(
                Error::InvariantViolation(format!("degrees of freedom must be positive, got {nu}")),
            ),
            _ => Ok(()),
        }
    }

    /// Whether `E xi^2` is finite.
    pub fn has_second_moment(&self) -> bool {
        !matches!(*self, RadialLaw::StudentT { nu } if nu <= 2.0)
    }

    /// `E xi^2 / d`, or `None` when the second moment is infinite.
    pub fn second_moment_factor(&self) -> Option<f64> {
        match *self {
            RadialLaw::StudentT { nu } if nu <= 2.0 => None,
            RadialLaw::StudentT { nu } => Some(nu / (nu - 2.0)),
            _ => Some(1.0),
        }
    }

    fn draw<R: Rng>(&self, d: usize, rng: &mut R) -> f64 {
        let gauss_norm = |rng: &mut R| {
            (0..d)
                .map(|_| {
                    let g: f64 = rng.sample(StandardNormal);
                    g * g
                })
                .sum::<f64>()
                .sqrt()
        };
        match *self {
            RadialLaw::ChiD => gauss_norm(rng),
            RadialLaw::Constant => (d as f64).sqrt(),
            RadialLaw::StudentT { nu } => {
                let r = gauss_norm(rng);
                let chi: f64 = ChiSquared::new(nu).expect("validated nu").sample(rng);
                r * (nu / chi).sqrt()
            }
            RadialLaw::ExponentialNorm => {
                let w: f64 = rng.sample(Exp1);
                w.sqrt() * gauss_norm(rng)
            }
            RadialLaw::BallUniform => {
                let v: f64 = rng.random();
                ((d + 2) as f64).sqrt() * v.powf(1.0 / d as f64)
            }
        }
    }
}

/// Generative triple `(mu, A, radial law)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipticalModel {
    location: Vec<f64>,
    mixing: DMatrix<f64>,
    radial: RadialLaw,
}

impl EllipticalModel {
    pub fn new(location: Vec<f64>, mixing: DMatrix<f64>, radial: RadialLaw) -> Result<Self> {
        let d = location.len();
        if d == 0 {
            return Err(Error::InvalidDim(0));
        }
        if mixing.nrows() != d || mixing.ncols() != d {
            return Err(Error::ShapeError(format!(
                "mixing matrix is {}x{}, expected {d}x{d}",
                mixing.nrows(),
                mixing.ncols()
            )));
        }
        radial.validate()?;
        let smin = mixing
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .fold(f64::INFINITY, |a, &s| a.min(s));
        if !(smin > 0.0) {
            return Err(Error::InvariantViolation(
                "mixing matrix is not full rank".into(),
            ));
        }
        Ok(Self {
            location,
            mixing,
            radial,
        })
    }

    /// Centered model with mixing matrix `Sigma^{1/2}`.
    pub fn centered(scatter: &ScatterMatrix, radial: RadialLaw) -> Result<Self> {
        let a = crate::linalg::matrix_power(scatter.sym(), crate::linalg::Power::Half)?;
        Self::new(vec![0.0; scatter.dim()], a.into_inner(), radial)
    }

    pub fn dim(&self) -> usize {
        self.location.len()
    }

    pub fn location(&self) -> &[f64] {
        &self.location
    }

    pub fn mixing(&self) -> &DMatrix<f64> {
        &self.mixing
    }

    pub fn radial(&self) -> RadialLaw {
        self.radial
    }

    pub fn with_radial(&self, radial: RadialLaw) -> Result<Self> {
        radial.validate()?;
        Ok(Self {
            radial,
            ..self.clone()
        })
    }

    /// `A A^T`.
    pub fn scatter(&self) -> Result<ScatterMatrix> {
        ScatterMatrix::new(SymMatrix::symmetrize(&self.mixing * self.mixing.transpose()))
    }

    /// `(E xi^2 / d) A A^T`, when finite.
    pub fn covariance(&self) -> Result<Option<SymMatrix>> {
        let s = self.scatter()?;
        Ok(self.radial.second_moment_factor().map(|f| s.sym().scaled(f)))
    }
}

/// `n` points together with the seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    points: PointMatrix,
    seed: u64,
}

impl SampleSet {
    pub fn new(points: PointMatrix, seed: u64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        if let Some(pos) = points.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation(format!(
                "non-finite coordinate in point {}",
                pos / points.dim()
            )));
        }
        Ok(Self { points, seed })
    }

    pub fn points(&self) -> &PointMatrix {
        &self.points
    }

    pub fn into_points(self) -> PointMatrix {
        self.points
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `n` i.i.d. points from `model`.
pub fn sample(model: &EllipticalModel, n: usize, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let d = model.dim();
    let mut data = vec![0.0; n * d];
    par::for_each_block_mut(&mut data, SAMPLE_BLOCK * d, |b, block| {
        let mut dir_rng = stream_rng(seed, 2 * b as u64);
        let mut rad_rng = stream_rng(seed, 2 * b as u64 + 1);
        let mut u = vec![0.0; d];
        for out in block.chunks_exact_mut(d) {
            loop {
                for c in u.iter_mut() {
                    *c = dir_rng.sample(StandardNormal);
                }
                let len = norm2(&u);
                if len > 0.0 {
                    u.iter_mut().for_each(|c| *c /= len);
                    break;
                }
            }
            let xi = model.radial.draw(d, &mut rad_rng);
            for (r, o) in out.iter_mut().enumerate() {
                let au: f64 = (0..d).map(|c| model.mixing[(r, c)] * u[c]).sum();
                *o = model.location[r] + xi * au;
            }
        }
    });
    SampleSet::new(PointMatrix::new(d, data)?, seed)
}

/// `sqrt(d) * x / ||x||`.
pub fn spatial_sign(x: &[f64]) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    spatial_sign_in_place(&mut out)?;
    Ok(out)
}

pub(crate) fn spatial_sign_in_place(x: &mut [f64]) -> Result<()> {
    let len = norm2(x);
    if !(len > 0.0) || !len.is_finite() {
        return Err(Error::DegenerateInput { index: None });
    }
    let s = (x.len() as f64).sqrt() / len;
    x.iter_mut().for_each(|c| *c *= s);
    Ok(())
}

/// Spatial sign of every row; the error names the first zero row.
pub fn spatial_signs(points: &PointMatrix) -> Result<PointMatrix> {
    let mut out = points.clone();
    for i in 0..out.len() {
        spatial_sign_in_place(out.row_mut(i)).map_err(|_| Error::DegenerateInput { index: Some(i) })?;
    }
    Ok(out)
}

/// Spatial sign inside the band `d - delta <= ||x||^2 <= d + delta`, linear
/// rescaling outside it.
pub fn truncated_sign(x: &[f64], delta: f64) -> Result<Vec<f64>> {
    let d = x.len();
    if !(delta > 0.0) || delta >= d as f64 {
        return Err(Error::InvalidTruncation { delta, dim: d });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvariantViolation("non-finite input".into()));
    }
    let df = d as f64;
    let sq: f64 = x.iter().map(|v| v * v).sum();
    let scale = if sq < df - delta {
        (df / (df - delta)).sqrt()
    } else if sq > df + delta {
        (df / (df + delta)).sqrt()
    } else {
        (df / sq).sqrt()
    };
    Ok(x.iter().map(|v| v * scale).collect())
}

/// Pairs the first half against the second: `(z_i - z_{m+i}) / sqrt 2`
/// with `m = floor(n/2)`. The location cancels; the scatter is unchanged.
pub fn symmetrize(s: &SampleSet) -> Result<SampleSet> {
    let n = s.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let m = n / 2;
    let d = s.dim();
    let p = s.points();
    let mut data = Vec::with_capacity(m * d);
    for i in 0..m {
        let (a, b) = (p.row(i), p.row(m + i));
        data.extend(a.iter().zip(b).map(|(x, y)| (x - y) / std::f64::consts::SQRT_2));
    }
    SampleSet::new(PointMatrix::new(d, data)?, s.seed())
}

fn delta_formula(d: f64, c: f64) -> f64 {
    c * (d * d.ln()).sqrt()
}

/// `c * sqrt(d ln d)`.
pub fn default_delta(d: usize, c: f64) -> Result<f64> {
    if d < 2 {
        return Err(Error::InvalidDim(d));
    }
    Ok(delta_formula(d as f64, c))
}
