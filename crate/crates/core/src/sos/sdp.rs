//! Dense primal-dual interior-point solver for linear matrix inequalities.
//!
//! Solves `maximize c^T t subject to F0 + sum_k t_k F_k >= 0` by treating it
//! as the dual of the standard-form problem
//! `minimize <C, X> s.t. <A_k, X> = b_k, X >= 0` with `C = F0`,
//! `A_k = -F_k`, `b = c`. Iterates are infeasible-start; search directions
//! use Nesterov-Todd scaling and a Mehrotra-type centering parameter.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};
use crate::par;

/// Symmetric matrix given by its nonzero entries. Both `(i, j)` and `(j, i)`
/// are listed for off-diagonal entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseSym {
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseSym {
    /// Adds `v` at `(i, j)` and, off the diagonal, at `(j, i)`.
    pub fn push_sym(&mut self, i: usize, j: usize, v: f64) {
        self.entries.push((i, j, v));
        if i != j {
            self.entries.push((j, i, v));
        }
    }

    fn dot(&self, x: &DMatrix<f64>) -> f64 {
        self.entries.iter().map(|&(i, j, v)| v * x[(i, j)]).sum()
    }

    fn frobenius(&self) -> f64 {
        self.entries.iter().map(|e| e.2 * e.2).sum::<f64>().sqrt()
    }

    /// Merges duplicate coordinates.
    pub fn compress(&mut self) {
        self.entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(self.entries.len());
        for &(i, j, v) in &self.entries {
            match out.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => out.push((i, j, v)),
            }
        }
        out.retain(|e| e.2 != 0.0);
        self.entries = out;
    }
}

/// `F0 + sum_k t_k F_k >= 0`.
#[derive(Debug, Clone)]
pub struct Lmi {
    pub f0: DMatrix<f64>,
    pub f: Vec<SparseSym>,
}

impl Lmi {
    pub fn size(&self) -> usize {
        self.f0.nrows()
    }

    pub fn num_vars(&self) -> usize {
        self.f.len()
    }

    /// `F0 + sum_k t_k F_k`.
    pub fn evaluate(&self, t: &[f64]) -> DMatrix<f64> {
        let mut y = self.f0.clone();
        for (fk, &tk) in self.f.iter().zip(t) {
            for &(i, j, v) in &fk.entries {
                y[(i, j)] += tk * v;
            }
        }
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdpSettings {
    pub max_iters: usize,
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub step_fraction: f64,
}

impl Default for SdpSettings {
    fn default() -> Self {
        Self {
            max_iters: 200,
            feas_tol: 1e-7,
            gap_tol: 1e-6,
            step_fraction: 0.95,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    /// Maximizer `t`.
    pub t: Vec<f64>,
    /// `c^T t`.
    pub value: f64,
    /// Upper bound `<C, X>` from the standard-form iterate.
    pub primal_value: f64,
    pub iterations: usize,
}

fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn sym(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
    m
}

/// Largest `alpha` with `L L^T + alpha D >= 0`.
fn max_step(l: &DMatrix<f64>, d: &DMatrix<f64>) -> f64 {
    let linv = match l.clone().solve_lower_triangular(&DMatrix::identity(l.nrows(), l.nrows())) {
        Some(m) => m,
        None => return 0.0,
    };
    let scaled = sym(&linv * d * linv.transpose());
    let min = nalgebra::SymmetricEigen::new(scaled)
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    if min >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / min
    }
}

struct Problem<'a> {
    c: &'a DMatrix<f64>,
    a: Vec<SparseSym>,
    b: Vec<f64>,
}

impl Problem<'_> {
    fn apply(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.a.iter().map(|ak| ak.dot(x)).collect()
    }

    fn adjoint(&self, t: &[f64]) -> DMatrix<f64> {
        let n = self.c.nrows();
        let mut out = DMatrix::zeros(n, n);
        for (ak, &tk) in self.a.iter().zip(t) {
            if tk != 0.0 {
                for &(i, j, v) in &ak.entries {
                    out[(i, j)] += tk * v;
                }
            }
        }
        out
    }

    /// `M_kl = <A_k, W A_l W>`.
    fn schur(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.a.len();
        let n = w.nrows();
        let cols = par::map_indexed(m, |l| {
            let mut b = DMatrix::zeros(n, n);
            for &(c, e, v) in &self.a[l].entries {
                for bcol in 0..n {
                    let web = v * w[(e, bcol)];
                    if web == 0.0 {
                        continue;
                    }
                    for a in 0..n {
                        b[(a, bcol)] += w[(a, c)] * web;
                    }
                }
            }
            self.a.iter().map(|ak| ak.dot(&b)).collect::<Vec<f64>>()
        });
        let mut out = DMatrix::from_fn(m, m, |k, l| cols[l][k]);
        for k in 0..m {
            for l in k + 1..m {
                let avg = 0.5 * (out[(k, l)] + out[(l, k)]);
                out[(k, l)] = avg;
                out[(l, k)] = avg;
            }
        }
        out
    }
}

fn chol(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
}

fn regularized_chol(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = chol(m) {
        return Some(c);
    }
    let scale = (0..m.nrows()).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut shift = 1e-14 * scale;
    for _ in 0..12 {
        let mut r = m.clone();
        for i in 0..m.nrows() {
            r[(i, i)] += shift;
        }
        if let Some(c) = chol(&r) {
            return Some(c);
        }
        shift *= 10.0;
    }
    None
}

/// Solves `maximize c^T t s.t. F0 + sum_k t_k F_k >= 0`.
pub fn maximize(lmi: &Lmi, c: &[f64], settings: &SdpSettings) -> Result<SdpSolution> {
    let n = lmi.size();
    let m = lmi.num_vars();
    if c.len() != m {
        return Err(Error::ShapeError(format!(
            "objective has {} coefficients for {m} variables",
            c.len()
        )));
    }
    let cscale = c.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let bscale = if cscale > 0.0 { cscale } else { 1.0 };
    let prob = Problem {
        c: &lmi.f0,
        a: lmi
            .f
            .iter()
            .map(|fk| SparseSym {
                entries: fk.entries.iter().map(|&(i, j, v)| (i, j, -v)).collect(),
            })
            .collect(),
        b: c.iter().map(|v| v / bscale).collect(),
    };
    let nf = n as f64;
    let bnorm = prob.b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cnorm = prob.c.norm();
    let anorms: Vec<f64> = prob.a.iter().map(SparseSym::frobenius).collect();

    let xi = prob
        .b
        .iter()
        .zip(&anorms)
        .map(|(bk, ak)| nf * (1.0 + bk.abs()) / (1.0 + ak))
        .fold(10f64.max(nf.sqrt()), f64::max);
    let eta = (1.0 + anorms.iter().cloned().fold(cnorm, f64::max)) / nf.sqrt();
    let eta = eta.max(10f64.max(nf.sqrt()));
    let mut x = DMatrix::identity(n, n) * xi;
    let mut s = DMatrix::identity(n, n) * eta;
    let mut t = vec![0.0; m];

    let mut best: Option<f64> = None;
    let mut iterations = 0;
    let failure = |iterations: usize, reason: String, best: Option<f64>| Error::SolverFailure {
        iterations,
        reason,
        best_value: best.map(|v| v * bscale),
    };

    loop {
        let ax = prob.apply(&x);
        let rp: Vec<f64> = prob.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let rd = prob.c - prob.adjoint(&t) - &s;
        let pobj = frob_dot(prob.c, &x);
        let dobj: f64 = prob.b.iter().zip(&t).map(|(b, t)| b * t).sum();
        let gap = frob_dot(&x, &s);
        let relp = rp.iter().map(|v| v * v).sum::<f64>().sqrt() / (1.0 + bnorm);
        let reld = rd.norm() / (1.0 + cnorm);

        let y = lmi.evaluate(&t);
        if chol(&(&y + DMatrix::identity(n, n) * (1e-9 * (1.0 + cnorm)))).is_some() {
            best = Some(best.map_or(dobj, |b: f64| b.max(dobj)));
        }
        let tol_gap = settings.gap_tol * (1.0 + dobj.abs());
        if relp <= settings.feas_tol
            && reld <= settings.feas_tol
            && gap <= tol_gap
            && (pobj - dobj).abs() <= tol_gap
        {
            return Ok(SdpSolution {
                t,
                value: dobj * bscale,
                primal_value: pobj * bscale,
                iterations,
            });
        }
        if iterations >= settings.max_iters {
            return Err(failure(
                iterations,
                format!("iteration cap reached (primal {relp:.1e}, dual {reld:.1e}, gap {gap:.1e})"),
                best,
            ));
        }
        iterations += 1;

        let lx = chol(&x).ok_or_else(|| failure(iterations, "primal iterate lost definiteness".into(), best))?;
        let ls = chol(&s).ok_or_else(|| failure(iterations, "dual iterate lost definiteness".into(), best))?;
        let lx = lx.l();
        let ls_l = ls.l();
        let svd = (ls_l.transpose() * &lx).svd(false, true);
        let v_t = svd.v_t.expect("requested V");
        let dvals = svd.singular_values;
        if dvals.iter().any(|&v| !(v > 0.0)) {
            return Err(failure(iterations, "degenerate scaling point".into(), best));
        }
        let mut g = &lx * v_t.transpose();
        for (j, dj) in dvals.iter().enumerate() {
            let sc = 1.0 / dj.sqrt();
            g.column_mut(j).scale_mut(sc);
        }
        let w = sym(&g * g.transpose());
        let s_inv = sym(ls.inverse());

        let schur = prob.schur(&w);
        let schur_chol = regularized_chol(&schur)
            .ok_or_else(|| failure(iterations, "Schur complement is singular".into(), best))?;
        let wrdw = sym(&w * &rd * &w);

        let direction = |rc: &DMatrix<f64>| {
            let rhs_mat = rc - &wrdw;
            let arhs = prob.apply(&rhs_mat);
            let h: Vec<f64> = rp.iter().zip(&arhs).map(|(r, a)| r - a).collect();
            let dt = schur_chol.solve(&nalgebra::DVector::from_vec(h));
            let dt: Vec<f64> = dt.iter().copied().collect();
            let ds = &rd - prob.adjoint(&dt);
            let dx = sym(rc - &w * &ds * &w);
            (dx, dt, ds)
        };

        let mu = gap / nf;
        let (dx_a, _, ds_a) = direction(&(-&x));
        let ap = (max_step(&lx, &dx_a)).min(1.0);
        let ad = (max_step(&ls_l, &ds_a)).min(1.0);
        let mu_aff = frob_dot(&(&x + &dx_a * ap), &(&s + &ds_a * ad)) / nf;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        let rc = &s_inv * (sigma * mu) - &x;
        let (dx, dt, ds) = direction(&sym(rc));
        let ap = (settings.step_fraction * max_step(&lx, &dx)).min(1.0);
        let ad = (settings.step_fraction * max_step(&ls_l, &ds)).min(1.0);
        x = sym(&x + &dx * ap);
        s = sym(&s + &ds * ad);
        for (tk, dk) in t.iter_mut().zip(&dt) {
            *tk += ad * dk;
        }
        if x.iter().chain(s.iter()).chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(failure(iterations, "non-finite iterate".into(), best));
        }
    }
}

/// Solves `minimize c^T t s.t. F0 + sum_k t_k F_k >= 0`.
pub fn minimize(lmi: &Lmi, c: &[f64], settings: &SdpSettings) -> Result<SdpSolution> {
    let neg: Vec<f64> = c.iter().map(|v| -v).collect();
    match maximize(lmi, &neg, settings) {
        Ok(mut sol) => {
            sol.value = -sol.value;
            sol.primal_value = -sol.primal_value;
            Ok(sol)
        }
        Err(Error::SolverFailure {
            iterations,
            reason,
            best_value,
        }) => Err(Error::SolverFailure {
            iterations,
            reason,
            best_value: best_value.map(|v| -v),
        }),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `[[1, t], [t, 1]] >= 0`, so `t` ranges over `[-1, 1]`.
    fn unit_interval() -> Lmi {
        let mut f = SparseSym::default();
        f.push_sym(0, 1, 1.0);
        Lmi {
            f0: DMatrix::identity(2, 2),
            f: vec![f],
        }
    }

    #[test]
    fn scalar_interval() {
        let s = SdpSettings::default();
        let hi = maximize(&unit_interval(), &[1.0], &s).unwrap();
        assert!((hi.value - 1.0).abs() <= 2e-6, "{}", hi.value);
        let lo = minimize(&unit_interval(), &[3.0], &s).unwrap();
        assert!((lo.value + 3.0).abs() <= 4e-6, "{}", lo.value);
    }

    #[test]
    fn largest_eigenvalue_as_lmi() {
        // max_t -t s.t. t I - A >= 0 gives -lambda_max(A).
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0]);
        let mut f = SparseSym::default();
        for i in 0..3 {
            f.push_sym(i, i, 1.0);
        }
        let lmi = Lmi { f0: -a.clone(), f: vec![f] };
        let sol = maximize(&lmi, &[-1.0], &SdpSettings::default()).unwrap();
        let lmax = nalgebra::SymmetricEigen::new(a).eigenvalues.max();
        assert!((sol.value + lmax).abs() < 1e-5 * (1.0 + lmax), "{} vs {lmax}", sol.value);
        assert!(sol.primal_value >= sol.value - 1e-6 * (1.0 + lmax));
    }

    #[test]
    fn zero_objective_converges() {
        let sol = maximize(&unit_interval(), &[0.0], &SdpSettings::default()).unwrap();
        assert!(sol.t[0].abs() <= 1.0);
    }

    #[test]
    fn iteration_cap_reports_failure() {
        let s = SdpSettings {
            max_iters: 1,
            ..SdpSettings::default()
        };
        assert!(matches!(
            maximize(&unit_interval(), &[1.0], &s),
            Err(Error::SolverFailure { .. })
        ));
    }
}
