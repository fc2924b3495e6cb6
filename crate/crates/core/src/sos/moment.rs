//! Degree-4 moment relaxation of the sphere `||v||^2 = R`.
//!
//! Moments are parametrized modulo the sphere ideal. Every monomial is
//! rewritten with `v_d^2 = R - sum_{i<d} v_i^2` until the exponent of the
//! last coordinate is at most one; the moments of the resulting normal
//! monomials (constant excluded) are the free variables. The moment matrix
//! is indexed by the normal monomials of degree at most two, which keeps it
//! strictly feasible (the full basis always has `||v||^2 - R` in its kernel).

use std::collections::HashMap;

use nalgebra::DMatrix;

use super::sdp::{Lmi, SparseSym};

pub(crate) type Exponent = Vec<u8>;

/// All exponent vectors in `d` variables with total degree at most `max_deg`,
/// graded by degree.
pub(crate) fn monomials(d: usize, max_deg: u8) -> Vec<Exponent> {
    fn rec(d: usize, pos: usize, left: u8, cur: &mut Exponent, out: &mut Vec<Exponent>) {
        if pos == d {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        for e in (0..=left).rev() {
            cur[pos] = e;
            rec(d, pos + 1, left - e, cur, out);
        }
        cur[pos] = 0;
    }
    let mut out = Vec::new();
    let mut cur = vec![0u8; d];
    for deg in 0..=max_deg {
        rec(d, 0, deg, &mut cur, &mut out);
    }
    out
}

pub(crate) fn add(a: &[u8], b: &[u8]) -> Exponent {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `c0 + sum_k coef_k t_k`.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Affine {
    pub c0: f64,
    pub terms: Vec<(usize, f64)>,
}

impl Affine {
    fn axpy(&mut self, a: f64, other: &Affine) {
        self.c0 += a * other.c0;
        self.terms
            .extend(other.terms.iter().map(|&(k, c)| (k, a * c)));
    }

    fn compress(&mut self) {
        self.terms.sort_by_key(|t| t.0);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for &(k, c) in &self.terms {
            match out.last_mut() {
                Some(last) if last.0 == k => last.1 += c,
                _ => out.push((k, c)),
            }
        }
        out.retain(|t| t.1 != 0.0);
        self.terms = out;
    }

    pub fn eval(&self, t: &[f64]) -> f64 {
        self.c0 + self.terms.iter().map(|&(k, c)| c * t[k]).sum::<f64>()
    }
}

/// The relaxation for a fixed dimension and radius.
#[derive(Debug, Clone)]
pub(crate) struct MomentRelaxation {
    pub d: usize,
    pub radius: f64,
    /// Every monomial of degree <= 4 with its index in `table`.
    pub table: Vec<Exponent>,
    pub table_index: HashMap<Exponent, usize>,
    /// Normal form of each entry of `table`.
    pub forms: Vec<Affine>,
    /// Free moments, one per non-constant normal monomial.
    pub free: Vec<Exponent>,
    pub lmi: Lmi,
}

impl MomentRelaxation {
    pub fn new(d: usize, radius: f64) -> Self {
        let last = d - 1;
        let table = monomials(d, 4);
        let table_index: HashMap<Exponent, usize> =
            table.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        let free: Vec<Exponent> = table
            .iter()
            .filter(|e| e[last] <= 1 && e.iter().any(|&x| x > 0))
            .cloned()
            .collect();
        let free_index: HashMap<&Exponent, usize> =
            free.iter().enumerate().map(|(i, e)| (e, i)).collect();

        // Graded order lists lower powers of the last coordinate first among
        // monomials that share the remaining exponents, so the recursion
        // only looks up already-reduced entries.
        let mut forms: Vec<Option<Affine>> = vec![None; table.len()];
        let mut order: Vec<usize> = (0..table.len()).collect();
        order.sort_by_key(|&i| (table[i][last], table[i].iter().map(|&x| x as u32).sum::<u32>()));
        for &i in &order {
            let e = &table[i];
            let form = if e[last] <= 1 {
                if e.iter().all(|&x| x == 0) {
                    Affine { c0: 1.0, terms: vec![] }
                } else {
                    Affine {
                        c0: 0.0,
                        terms: vec![(free_index[e], 1.0)],
                    }
                }
            } else {
                let mut base = e.clone();
                base[last] -= 2;
                let mut out = Affine::default();
                out.axpy(radius, forms[table_index[&base]].as_ref().expect("reduced"));
                for j in 0..last {
                    let mut shifted = base.clone();
                    shifted[j] += 2;
                    out.axpy(-1.0, forms[table_index[&shifted]].as_ref().expect("reduced"));
                }
                out.compress();
                out
            };
            forms[i] = Some(form);
        }
        let forms: Vec<Affine> = forms.into_iter().map(|f| f.expect("all reduced")).collect();

        let basis: Vec<Exponent> = monomials(d, 2).into_iter().filter(|e| e[last] <= 1).collect();
        let nb = basis.len();
        let mut f0 = DMatrix::zeros(nb, nb);
        let mut f = vec![SparseSym::default(); free.len()];
        for a in 0..nb {
            for b in a..nb {
                let form = &forms[table_index[&add(&basis[a], &basis[b])]];
                f0[(a, b)] = form.c0;
                f0[(b, a)] = form.c0;
                for &(k, c) in &form.terms {
                    f[k].push_sym(a, b, c);
                }
            }
        }
        for fk in &mut f {
            fk.compress();
        }
        Self {
            d,
            radius,
            table,
            table_index,
            forms,
            free,
            lmi: Lmi { f0, f },
        }
    }

    /// `<E v^{(x)4}, M>` as an affine function of the free moments, for a
    /// `d^2 x d^2` matrix `M` indexed by pairs `i * d + j`.
    pub fn quartic_objective(&self, m: &DMatrix<f64>) -> Affine {
        let d = self.d;
        let mut coef: HashMap<usize, f64> = HashMap::new();
        let mut e = vec![0u8; d];
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        let v = m[(i * d + j, k * d + l)];
                        if v == 0.0 {
                            continue;
                        }
                        e.iter_mut().for_each(|x| *x = 0);
                        e[i] += 1;
                        e[j] += 1;
                        e[k] += 1;
                        e[l] += 1;
                        *coef.entry(self.table_index[&e]).or_insert(0.0) += v;
                    }
                }
            }
        }
        let mut keys: Vec<usize> = coef.keys().copied().collect();
        keys.sort_unstable();
        let mut out = Affine::default();
        for idx in keys {
            out.axpy(coef[&idx], &self.forms[idx]);
        }
        out.compress();
        out
    }

    /// Moments of every monomial of degree <= 4 at the free moments `t`.
    pub fn all_moments(&self, t: &[f64]) -> Vec<f64> {
        self.forms.iter().map(|f| f.eval(t)).collect()
    }
}
