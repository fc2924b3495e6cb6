//! Robust scatter-matrix and covariance estimation for elliptical
//! distributions under strong contamination.
//!
//! The estimator works on spatial signs of symmetrized samples and runs
//! three rounds of stability-based filtering: a coarse spectral estimate,
//! a spectral refinement driven by a degree-4 sum-of-squares oracle, and a
//! final Frobenius-norm pass on flattened sign outer products. The crate
//! also ships the pieces needed to test that claim end to end: samplers for
//! several radial laws, contamination adversaries, brute-force stability
//! checkers and a small dense SDP solver.
//!
//! Data-parallel kernels use rayon when the `parallel` feature (on by
//! default) is enabled and fall back to plain iterators otherwise. Results
//! do not depend on the thread count: every reduction is performed over
//! fixed-size chunks merged in index order.

pub mod applications;
pub mod contamination;
pub mod elliptical;
pub mod error;
pub mod filter;
pub mod io;
pub mod linalg;
pub mod moments;
pub mod par;
pub mod pipeline;
pub mod sos;
pub mod stability;

pub use error::{Error, Result};
pub use linalg::{PointMatrix, ScatterMatrix, SymMatrix};
