//! Checkers for generalized stability and adequacy.
//!
//! A point set is `(eps, delta, r)`-stable with respect to `mu` and `Q` when
//! every subset keeping at least a `(1 - eps)` fraction satisfies
//!
//! 1. `sup_V |<v, mean(x) - mu>| <= delta`,
//! 2. `sup_P |<P, mean((x - mu)(x - mu)^T)> - <P, Q>| <= delta^2 / eps`,
//! 3. `sup_P |<P, Q>| <= r^2`.
//!
//! Second moments are taken about the fixed `mu`. For the Euclidean family
//! the sups have closed forms (a norm and a largest-magnitude eigenvalue).
//! The exact checker enumerates every admissible subset; the heuristic one
//! searches for a bad subset and so only ever reports a lower bound.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::contamination::corrupted_count;
use crate::error::{Error, Result};
use crate::linalg::{eig_unchecked, PointMatrix, SymMatrix};
use crate::par;
use crate::sos::SosOracle;

/// Default cap on the number of subsets visited in exact mode.
pub const DEFAULT_BUDGET: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    /// `V` is the Euclidean ball of radius `R`, `P` the hull of `V (x) V`.
    EuclideanBall,
    /// Points are flattened `d x d` matrices; `V = {u u^T : ||u||^2 <= R}`
    /// and `P` is the degree-4 pseudo-expectation set.
    SpectralSoS,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityParams {
    pub epsilon: f64,
    pub delta: f64,
    pub r: f64,
    pub radius: f64,
    pub family: Family,
}

impl StabilityParams {
    pub fn euclidean(epsilon: f64, delta: f64, r: f64) -> Self {
        Self {
            epsilon,
            delta,
            r,
            radius: 1.0,
            family: Family::EuclideanBall,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidFraction(self.epsilon));
        }
        if !(self.delta >= self.epsilon) || !(self.r > 0.0) || !(self.radius > 0.0) {
            return Err(Error::InvariantViolation(format!(
                "stability parameters need delta >= eps, r > 0, R > 0 (got {self:?})"
            )));
        }
        Ok(())
    }

    /// Thresholds for conditions 1, 2 and 3.
    pub fn thresholds(&self) -> [f64; 3] {
        let c2 = if self.epsilon > 0.0 {
            self.delta * self.delta / self.epsilon
        } else {
            f64::INFINITY
        };
        [self.delta, c2, self.r * self.r]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub passed: bool,
    /// Condition (1, 2 or 3) with the largest value-to-threshold ratio.
    pub worst_condition: u8,
    pub worst_value: f64,
    pub threshold: f64,
    /// Largest value seen for each condition.
    pub values: [f64; 3],
    pub witness: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckMode {
    Exact { budget: u128 },
    Heuristic { rounds: usize },
}

impl CheckMode {
    pub fn exact() -> Self {
        CheckMode::Exact {
            budget: DEFAULT_BUDGET,
        }
    }

    pub fn heuristic() -> Self {
        CheckMode::Heuristic { rounds: 20 }
    }
}

/// `delta + sqrt(eps lambda) + eps r`.
pub fn stability_error_bound(delta: f64, epsilon: f64, lambda: f64, r: f64) -> f64 {
    delta + (epsilon * lambda).sqrt() + epsilon * r
}

/// Running sums over a subset: count, sum of `x - mu` and sum of
/// `(x - mu)(x - mu)^T`.
#[derive(Clone)]
struct Sums {
    count: usize,
    first: DVector<f64>,
    second: DMatrix<f64>,
}

struct Evaluator<'a> {
    centered: Vec<DVector<f64>>,
    q: &'a DMatrix<f64>,
    params: StabilityParams,
    sos: Option<SosOracle>,
    full: Sums,
}

impl<'a> Evaluator<'a> {
    fn new(points: &PointMatrix, mu: &[f64], q: &'a DMatrix<f64>, params: StabilityParams) -> Result<Self> {
        let m = points.dim();
        let sos = match params.family {
            Family::EuclideanBall => None,
            Family::SpectralSoS => {
                let d = (m as f64).sqrt().round() as usize;
                if d * d != m {
                    return Err(Error::ShapeError(format!(
                        "points of dimension {m} are not flattened square matrices"
                    )));
                }
                Some(SosOracle::new(d, params.radius)?)
            }
        };
        let centered: Vec<DVector<f64>> = points
            .rows()
            .map(|x| DVector::from_iterator(m, x.iter().zip(mu).map(|(a, b)| a - b)))
            .collect();
        let mut full = Sums {
            count: centered.len(),
            first: DVector::zeros(m),
            second: DMatrix::zeros(m, m),
        };
        for y in &centered {
            full.first += y;
            full.second += y * y.transpose();
        }
        Ok(Self {
            centered,
            q,
            params,
            sos,
            full,
        })
    }

    fn without(&self, removed: &[usize]) -> Sums {
        let mut s = self.full.clone();
        for &i in removed {
            let y = &self.centered[i];
            s.count -= 1;
            s.first -= y;
            s.second -= y * y.transpose();
        }
        s
    }

    fn sup_linear(&self, v: &DVector<f64>) -> f64 {
        let r = self.params.radius;
        match self.params.family {
            Family::EuclideanBall => r * v.norm(),
            Family::SpectralSoS => {
                let d = (v.len() as f64).sqrt().round() as usize;
                let m = DMatrix::from_fn(d, d, |i, j| 0.5 * (v[i * d + j] + v[j * d + i]));
                r * eig_unchecked(&m).max_abs().1.abs()
            }
        }
    }

    fn sup_quadratic(&self, m: &DMatrix<f64>) -> Result<f64> {
        let r = self.params.radius;
        match &self.sos {
            None => Ok(r * r * eig_unchecked(m).max_abs().1.abs()),
            Some(oracle) => Ok(oracle.worst_p(&SymMatrix::symmetrize(m.clone()))?.value),
        }
    }

    /// Values of conditions 1 and 2 on a subset.
    fn conditions(&self, s: &Sums) -> Result<[f64; 2]> {
        let k = s.count as f64;
        let mean = &s.first / k;
        let dev = &s.second / k - self.q;
        Ok([self.sup_linear(&mean), self.sup_quadratic(&dev)?])
    }

    /// Direction that witnesses condition 1 and the matrix witnessing
    /// condition 2 on a subset, as per-point scores.
    fn scores(&self, s: &Sums, condition: usize) -> Vec<f64> {
        let k = s.count as f64;
        if condition == 0 {
            let mean = &s.first / k;
            let n = mean.norm();
            let u = if n > 0.0 { mean / n } else { DVector::zeros(self.full.first.len()) };
            self.centered.iter().map(|y| u.dot(y)).collect()
        } else {
            let dev = &s.second / k - self.q;
            let eig = eig_unchecked(&dev);
            let (j, _) = eig.max_abs();
            let u = eig.vectors.column(j).into_owned();
            self.centered.iter().map(|y| u.dot(y).powi(2)).collect()
        }
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 0..k as u128 {
        c = c * (n as u128 - i) / (i + 1);
    }
    c
}

fn verdict(values: [f64; 3], params: &StabilityParams, witness: String) -> StabilityVerdict {
    let th = params.thresholds();
    let ratio = |i: usize| {
        if th[i].is_infinite() {
            0.0
        } else if th[i] > 0.0 {
            values[i] / th[i]
        } else if values[i] > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    };
    let worst = (0..3).fold(0, |b, i| if ratio(i) > ratio(b) { i } else { b });
    StabilityVerdict {
        passed: (0..3).all(|i| values[i] <= th[i]),
        worst_condition: worst as u8 + 1,
        worst_value: values[worst],
        threshold: th[worst],
        values,
        witness,
    }
}

/// Checks stability of `points` about `mu` with second-moment target `q`.
pub fn check_stability_euclidean(
    points: &PointMatrix,
    mu: &[f64],
    q: &SymMatrix,
    params: &StabilityParams,
    mode: CheckMode,
) -> Result<StabilityVerdict> {
    params.validate()?;
    let n = points.len();
    let m = points.dim();
    if mu.len() != m || q.dim() != m {
        return Err(Error::ShapeError(format!(
            "points have dimension {m}, mu {} and Q {}",
            mu.len(),
            q.dim()
        )));
    }
    if n == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let k = corrupted_count(params.epsilon, n).min(n - 1);
    let ev = Evaluator::new(points, mu, q.matrix(), *params)?;
    let c3 = ev.sup_quadratic(q.matrix())?;
    match mode {
        CheckMode::Exact { budget } => exact(&ev, n, k, budget, c3),
        CheckMode::Heuristic { rounds } => heuristic(&ev, n, k, rounds, c3),
    }
}

fn exact(ev: &Evaluator, n: usize, k: usize, budget: u128, c3: f64) -> Result<StabilityVerdict> {
    let total: u128 = (0..=k).map(|j| binomial(n, j)).sum();
    if total > budget {
        return Err(Error::BudgetExceeded {
            subsets: total,
            budget,
        });
    }
    let mut subsets: Vec<Vec<usize>> = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..k {
        let mut next = Vec::new();
        for s in &frontier {
            let start = s.last().map_or(0, |&l| l + 1);
            for i in start..n {
                let mut t = s.clone();
                t.push(i);
                next.push(t);
            }
        }
        subsets.extend(next.iter().cloned());
        frontier = next;
    }
    let vals = par::map_indexed(subsets.len(), |i| ev.conditions(&ev.without(&subsets[i])));
    let mut best = [0.0f64, 0.0];
    let mut arg = [0usize, 0];
    for (i, v) in vals.into_iter().enumerate() {
        let v = v?;
        for c in 0..2 {
            if v[c] > best[c] {
                best[c] = v[c];
                arg[c] = i;
            }
        }
    }
    let witness = format!(
        "condition 1 worst after removing {:?}; condition 2 worst after removing {:?}",
        subsets[arg[0]], subsets[arg[1]]
    );
    Ok(verdict([best[0], best[1], c3], &ev.params, witness))
}

fn heuristic(ev: &Evaluator, n: usize, k: usize, rounds: usize, c3: f64) -> Result<StabilityVerdict> {
    let mut best = [0.0f64; 2];
    let mut best_removed: [Vec<usize>; 2] = [vec![], vec![]];
    let full = ev.conditions(&ev.full)?;
    best.copy_from_slice(&full);

    for c in 0..2 {
        // Starting subsets: the full sample, and up to 32 leave-one-out sets
        // chosen along the full-sample witness.
        let mut starts: Vec<Vec<usize>> = vec![vec![]];
        if k > 0 {
            let sc = ev.scores(&ev.full, c);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| sc[b].total_cmp(&sc[a]).then(a.cmp(&b)));
            let picks = order.iter().take(16).chain(order.iter().rev().take(16));
            let mut seen = std::collections::BTreeSet::new();
            for &i in picks {
                if seen.insert(i) {
                    starts.push(vec![i]);
                }
            }
        }
        for start in starts {
            let mut removed = start;
            for _ in 0..rounds.max(1) {
                let sums = ev.without(&removed);
                let sc = ev.scores(&sums, c);
                let mut improved = false;
                // Remove the most extreme points along the current witness,
                // from either end.
                for descending in [true, false] {
                    let mut order: Vec<usize> = (0..n).collect();
                    order.sort_by(|&a, &b| {
                        let o = sc[b].total_cmp(&sc[a]);
                        (if descending { o } else { o.reverse() }).then(a.cmp(&b))
                    });
                    for j in 0..=k {
                        let cand: Vec<usize> = order[..j].to_vec();
                        let v = ev.conditions(&ev.without(&cand))?[c];
                        if v > best[c] {
                            best[c] = v;
                            best_removed[c] = cand.clone();
                            removed = cand;
                            improved = true;
                        }
                    }
                }
                if !improved {
                    break;
                }
            }
        }
        if k > 0 && n * k <= 20_000 {
            local_search(ev, n, k, c, &mut best[c], &mut best_removed[c])?;
        }
    }
    let witness = format!(
        "lower bound; condition 1 after removing {:?}; condition 2 after removing {:?}",
        best_removed[0], best_removed[1]
    );
    Ok(verdict([best[0], best[1], c3], &ev.params, witness))
}

/// Greedy additions, then single swaps, until no move improves.
fn local_search(
    ev: &Evaluator,
    n: usize,
    k: usize,
    c: usize,
    best: &mut f64,
    removed: &mut Vec<usize>,
) -> Result<()> {
    loop {
        let mut improved = false;
        let mut moves: Vec<Vec<usize>> = Vec::new();
        if removed.len() < k {
            for i in (0..n).filter(|i| !removed.contains(i)) {
                let mut t = removed.clone();
                t.push(i);
                moves.push(t);
            }
        }
        for (pos, _) in removed.iter().enumerate() {
            let mut t = removed.clone();
            t.remove(pos);
            moves.push(t.clone());
            for i in (0..n).filter(|i| !removed.contains(i)) {
                let mut u = t.clone();
                u.push(i);
                moves.push(u);
            }
        }
        let vals = par::map_indexed(moves.len(), |j| ev.conditions(&ev.without(&moves[j])).map(|v| v[c]));
        for (j, v) in vals.into_iter().enumerate() {
            let v = v?;
            if v > *best * (1.0 + 1e-12) {
                *best = v;
                *removed = moves[j].clone();
                improved = true;
            }
        }
        if !improved {
            return Ok(());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdequacyReport {
    pub adequate: bool,
    /// Largest `<a (x) b, P>^2 / (R^2 ||a||^2 R^2 ||b||^2)` seen.
    pub worst_ratio: f64,
    /// Smallest `<a (x) a, P>` seen.
    pub min_square: f64,
}

/// Random test of positivity on squares and the Cauchy-Schwarz bound
/// against `V = {u u^T : ||u||^2 <= R}`.
pub fn check_adequacy(p: &DMatrix<f64>, trials: usize, radius: f64, seed: u64, slack: f64) -> AdequacyReport {
    let m = p.nrows();
    let d = (m as f64).sqrt().round() as usize;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let random_sym = |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        (&a + a.transpose()) * 0.5
    };
    let flat = |a: &DMatrix<f64>| DVector::from_iterator(m, (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| a[(i, j)]));
    let mut worst_ratio = 0.0_f64;
    let mut min_square = f64::INFINITY;
    for _ in 0..trials {
        let a = random_sym(&mut rng);
        let b = random_sym(&mut rng);
        let (fa, fb) = (flat(&a), flat(&b));
        let aa = (fa.transpose() * p * &fa)[(0, 0)];
        let ab = (fa.transpose() * p * &fb)[(0, 0)];
        let na = eig_unchecked(&a).max_abs().1.abs();
        let nb = eig_unchecked(&b).max_abs().1.abs();
        let bound = radius.powi(4) * na * na * nb * nb;
        min_square = min_square.min(aa / (radius * na).powi(2).max(1e-300));
        worst_ratio = worst_ratio.max(ab * ab / bound);
    }
    AdequacyReport {
        adequate: min_square >= -1e-8 && worst_ratio <= 1.0 + slack,
        worst_ratio,
        min_square,
    }
}
