//! Pair partitions, crossing numbers and q-Gaussian joint moments.
//!
//! Moments are sums over pair partitions π of {1..r} of
//! q^{Cr(π)} Π_{{i,j}∈π} G(i,j). Pairings are generated by always pairing the
//! smallest free index a with some free b > a; the crossings created by that
//! block are exactly the already used indices strictly between a and b. The
//! sum therefore only depends on the set of used indices, which gives a
//! memoized recursion over bitmasks.

use faer::{Mat, Side};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::adaptive_gk;

/// Largest r for which all pairings are materialized.
pub const ENUMERATION_BUDGET: usize = 16;
/// Largest r accepted by the moment recursions.
pub const MOMENT_BUDGET: usize = 20;
/// Largest order accepted by `density_moment`.
pub const DENSITY_ORDER_BUDGET: usize = 12;

/// A pair partition of {1,…,2p}; blocks are stored as (a, b) with a < b,
/// sorted by a.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pairing {
    blocks: Vec<(usize, usize)>,
}

impl Pairing {
    pub fn new(blocks: Vec<(usize, usize)>) -> Result<Self> {
        let r = 2 * blocks.len();
        let mut seen = vec![false; r + 1];
        let mut norm = Vec::with_capacity(blocks.len());
        for (x, y) in blocks {
            let (a, b) = if x < y { (x, y) } else { (y, x) };
            if a == b || a == 0 || b > r {
                return Err(Error::usage(format!("invalid block {{{x},{y}}} for r={r}")));
            }
            if seen[a] || seen[b] {
                return Err(Error::usage(format!("index repeated in block {{{x},{y}}}")));
            }
            seen[a] = true;
            seen[b] = true;
            norm.push((a, b));
        }
        norm.sort_unstable();
        Ok(Pairing { blocks: norm })
    }

    pub fn blocks(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    /// Number of points r = 2p.
    pub fn len(&self) -> usize {
        2 * self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Image under i ↦ r + 1 − i.
    pub fn reversed(&self) -> Pairing {
        let r = self.len();
        let blocks = self
            .blocks
            .iter()
            .map(|&(a, b)| (r + 1 - b, r + 1 - a))
            .collect();
        Pairing::new(blocks).expect("reversal preserves validity")
    }

    pub fn crossing_number(&self) -> usize {
        crossing_number(self)
    }
}

/// Number of block pairs {x1,y1},{x2,y2} with x1 < x2 < y1 < y2.
pub fn crossing_number(pi: &Pairing) -> usize {
    let b = &pi.blocks;
    let mut count = 0;
    for i in 0..b.len() {
        for j in 0..b.len() {
            let (x1, y1) = b[i];
            let (x2, y2) = b[j];
            if x1 < x2 && x2 < y1 && y1 < y2 {
                count += 1;
            }
        }
    }
    count
}

/// (r−1)!! for even r, the number of pairings of r points; 0 for odd r.
pub fn pairing_count(r: usize) -> u64 {
    if r % 2 == 1 {
        return 0;
    }
    (1..r as u64).step_by(2).product()
}

pub fn catalan(p: usize) -> u64 {
    let mut c: u64 = 1;
    for k in 0..p as u64 {
        c = c * 2 * (2 * k + 1) / (k + 2);
    }
    c
}

/// All pairings of {1..r}. Odd r gives the empty list.
pub fn enumerate_pairings(r: usize) -> Result<Vec<Pairing>> {
    if r % 2 == 1 {
        return Ok(Vec::new());
    }
    if r > ENUMERATION_BUDGET {
        return Err(Error::Size {
            what: "pairing enumeration length",
            size: r,
            budget: ENUMERATION_BUDGET,
        });
    }
    let mut out = Vec::with_capacity(pairing_count(r) as usize);
    let mut free: Vec<usize> = (1..=r).collect();
    let mut blocks = Vec::with_capacity(r / 2);
    enumerate_rec(&mut free, &mut blocks, &mut out);
    Ok(out)
}

fn enumerate_rec(free: &mut Vec<usize>, blocks: &mut Vec<(usize, usize)>, out: &mut Vec<Pairing>) {
    if free.is_empty() {
        out.push(Pairing {
            blocks: blocks.clone(),
        });
        return;
    }
    let a = free.remove(0);
    for k in 0..free.len() {
        let b = free.remove(k);
        blocks.push((a, b));
        enumerate_rec(free, blocks, out);
        blocks.pop();
        free.insert(k, b);
    }
    free.insert(0, a);
}

/// Memoized sum over pairings of r points. `term(a, b, crossings, rest)`
/// combines the block (a, b) (0-based) with the value of the remaining
/// completion.
fn pairing_sum<T: Clone>(
    r: usize,
    empty: T,
    zero: T,
    term: &dyn Fn(usize, usize, usize, &T) -> T,
    add: &dyn Fn(&mut T, T),
) -> T {
    let full: u32 = if r == 32 { u32::MAX } else { (1u32 << r) - 1 };
    let mut memo: Vec<Option<T>> = vec![None; 1usize << r];
    fn rec<T: Clone>(
        mask: u32,
        r: usize,
        full: u32,
        empty: &T,
        zero: &T,
        term: &dyn Fn(usize, usize, usize, &T) -> T,
        add: &dyn Fn(&mut T, T),
        memo: &mut Vec<Option<T>>,
    ) -> T {
        if mask == full {
            return empty.clone();
        }
        if let Some(v) = &memo[mask as usize] {
            return v.clone();
        }
        let a = (!mask).trailing_zeros() as usize;
        let mut acc = zero.clone();
        for b in a + 1..r {
            if mask & (1 << b) != 0 {
                continue;
            }
            let between = if b > a + 1 {
                ((1u32 << b) - 1) & !((1u32 << (a + 1)) - 1)
            } else {
                0
            };
            let crossings = (mask & between).count_ones() as usize;
            let next = mask | (1 << a) | (1 << b);
            let rest = rec(next, r, full, empty, zero, term, add, memo);
            add(&mut acc, term(a, b, crossings, &rest));
        }
        memo[mask as usize] = Some(acc.clone());
        acc
    }
    rec(0, r, full, &empty, &zero, term, add, &mut memo)
}

fn check_moment_len(r: usize) -> Result<()> {
    if r > MOMENT_BUDGET {
        return Err(Error::Size {
            what: "moment length",
            size: r,
            budget: MOMENT_BUDGET,
        });
    }
    Ok(())
}

fn check_q(q: f64) -> Result<()> {
    if !(q > -1.0 && q < 1.0) {
        return Err(Error::usage(format!("q must lie in (-1, 1), got {q}")));
    }
    Ok(())
}

/// Covariance kernel of a moment query.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// G(i, j) = t_i ∧ t_j.
    Times(Vec<f64>),
    /// G(i, j) = ⟨f_i, f_j⟩ given directly.
    Gram(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentQuery {
    kernel: Kernel,
    q: f64,
}

impl MomentQuery {
    pub fn times(times: Vec<f64>, q: f64) -> Result<Self> {
        check_q(q)?;
        if times.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::usage("times must be finite and nonnegative"));
        }
        Ok(MomentQuery {
            kernel: Kernel::Times(times),
            q,
        })
    }

    pub fn gram(gram: Vec<Vec<f64>>, q: f64) -> Result<Self> {
        check_q(q)?;
        let r = gram.len();
        if gram.iter().any(|row| row.len() != r) {
            return Err(Error::usage("gram matrix must be square"));
        }
        let mut scale = 0.0f64;
        for i in 0..r {
            for j in 0..r {
                scale = scale.max(gram[i][j].abs());
                if (gram[i][j] - gram[j][i]).abs() > 1e-12 * gram[i][j].abs().max(1.0) {
                    return Err(Error::usage("gram matrix must be symmetric"));
                }
            }
        }
        if r > 0 {
            let m = Mat::<f64>::from_fn(r, r, |i, j| gram[i][j]);
            let ev = m
                .self_adjoint_eigenvalues(Side::Lower)
                .map_err(|_| Error::numeric("gram eigenvalues failed", f64::NAN))?;
            if ev[0] < -1e-10 * scale.max(1.0) {
                return Err(Error::usage(format!(
                    "gram matrix must be positive semidefinite (min eigenvalue {:.3e})",
                    ev[0]
                )));
            }
        }
        Ok(MomentQuery {
            kernel: Kernel::Gram(gram),
            q,
        })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn len(&self) -> usize {
        match &self.kernel {
            Kernel::Times(t) => t.len(),
            Kernel::Gram(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        match &self.kernel {
            Kernel::Times(t) => t[i].min(t[j]),
            Kernel::Gram(g) => g[i][j],
        }
    }
}

/// φ(X_{t_1}⋯X_{t_r}) for a q-Brownian motion (or the Gram-matrix form).
/// Odd r gives 0.
pub fn q_joint_moment(query: &MomentQuery) -> Result<f64> {
    let r = query.len();
    if r % 2 == 1 {
        return Ok(0.0);
    }
    check_moment_len(r)?;
    let max_cr = (r / 2) * (r / 2).saturating_sub(1) / 2;
    let qpow: Vec<f64> = (0..=max_cr).map(|k| query.q.powi(k as i32)).collect();
    let term = |a: usize, b: usize, c: usize, rest: &f64| qpow[c] * query.entry(a, b) * rest;
    let add = |acc: &mut f64, v: f64| *acc += v;
    Ok(pairing_sum(r, 1.0, 0.0, &term, &add))
}

/// Exact rational version of `q_joint_moment` in the time form.
pub fn q_joint_moment_exact(times: &[BigRational], q: &BigRational) -> Result<BigRational> {
    let r = times.len();
    if r % 2 == 1 {
        return Ok(BigRational::zero());
    }
    check_moment_len(r)?;
    let one = BigRational::one();
    if *q <= -one.clone() || *q >= one {
        return Err(Error::usage("q must lie in (-1, 1)"));
    }
    if times.iter().any(|t| *t < BigRational::zero()) {
        return Err(Error::usage("times must be nonnegative"));
    }
    let max_cr = (r / 2) * (r / 2).saturating_sub(1) / 2;
    let mut qpow = vec![BigRational::one()];
    for k in 1..=max_cr {
        qpow.push(&qpow[k - 1] * q);
    }
    let term = |a: usize, b: usize, c: usize, rest: &BigRational| {
        let g = if times[a] < times[b] { &times[a] } else { &times[b] };
        &(&qpow[c] * g) * rest
    };
    let add = |acc: &mut BigRational, v: BigRational| *acc += v;
    Ok(pairing_sum(r, BigRational::one(), BigRational::zero(), &term, &add))
}

/// Coefficients c_k of q^k in the equal-time moment φ(X_1^r): the number of
/// pairings of r points with k crossings.
pub fn crossing_polynomial(r: usize) -> Result<Vec<u64>> {
    if r % 2 == 1 {
        return Ok(vec![0]);
    }
    check_moment_len(r)?;
    let term = |_: usize, _: usize, c: usize, rest: &Vec<u64>| {
        let mut v = vec![0u64; rest.len() + c];
        for (k, x) in rest.iter().enumerate() {
            v[k + c] += x;
        }
        v
    };
    let add = |acc: &mut Vec<u64>, v: Vec<u64>| {
        if acc.len() < v.len() {
            acc.resize(v.len(), 0);
        }
        for (k, x) in v.into_iter().enumerate() {
            acc[k] += x;
        }
    };
    let mut p = pairing_sum(r, vec![1u64], vec![0u64], &term, &add);
    while p.len() > 1 && *p.last().unwrap() == 0 {
        p.pop();
    }
    Ok(p)
}

/// Integer to exact rational.
pub fn rational(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Truncation threshold for the infinite product in ν_q.
const PRODUCT_TOL: f64 = 1e-14;

/// Number of factors kept in Π_{n≥1}(1−qⁿ)|1−qⁿe^{2iθ}|²: the first n with
/// |q|ⁿ(3+|q|ⁿ) < 1e−14, which bounds the factor's deviation from 1 for every θ.
pub fn product_terms(q: f64) -> usize {
    let a = q.abs();
    if a == 0.0 {
        return 0;
    }
    let mut n = 1;
    let mut p = a;
    while p * (3.0 + p) >= PRODUCT_TOL {
        n += 1;
        p *= a;
    }
    n - 1
}

/// ν_q density written in θ, x = 2cosθ/√(1−q): the weight w(θ) with
/// ∫ g dν_q = ∫_0^π g(x(θ)) w(θ) dθ.
pub fn nu_q_theta_weight(q: f64, theta: f64) -> f64 {
    let terms = product_terms(q);
    let c2 = (2.0 * theta).cos();
    let mut prod = 1.0;
    let mut qn = 1.0;
    for _ in 0..terms {
        qn *= q;
        prod *= (1.0 - qn) * (1.0 - 2.0 * qn * c2 + qn * qn);
    }
    let s = theta.sin();
    2.0 / std::f64::consts::PI * s * s * prod
}

/// Density of ν_q in x; zero outside [−2/√(1−q), 2/√(1−q)].
pub fn nu_q_density(q: f64, x: f64) -> Result<f64> {
    check_q(q)?;
    let edge = 2.0 / (1.0 - q).sqrt();
    if x.abs() >= edge {
        return Ok(0.0);
    }
    let theta = (x / edge).acos();
    // dx = (edge sinθ) dθ
    Ok(nu_q_theta_weight(q, theta) / (edge * theta.sin()))
}

/// ∫ x^order ν_q(dx) by adaptive quadrature of the θ-form of the density.
pub fn density_moment(q: f64, order: usize) -> Result<f64> {
    check_q(q)?;
    if order > DENSITY_ORDER_BUDGET {
        return Err(Error::Size {
            what: "density moment order",
            size: order,
            budget: DENSITY_ORDER_BUDGET,
        });
    }
    if order % 2 == 1 {
        // ν_q is symmetric
        return Ok(0.0);
    }
    let edge = 2.0 / (1.0 - q).sqrt();
    let f = |theta: f64| nu_q_theta_weight(q, theta) * (edge * theta.cos()).powi(order as i32);
    let (v, _) = adaptive_gk(f, 0.0, std::f64::consts::PI, 1e-13, 4096)?;
    Ok(v)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MomentBound {
    pub sum: f64,
    pub bound: f64,
}

/// 2p-th moment of a variance-n q-Gaussian against n^p (2/√(1−q))^{2p}.
pub fn moment_bound_check(n: usize, p: usize, q: f64) -> Result<MomentBound> {
    check_q(q)?;
    if 2 * p > 16 {
        return Err(Error::Size {
            what: "moment order 2p",
            size: 2 * p,
            budget: 16,
        });
    }
    if n > 64 {
        return Err(Error::Size {
            what: "number of increments n",
            size: n,
            budget: 64,
        });
    }
    let query = MomentQuery::times(vec![n as f64; 2 * p], q)?;
    let sum = q_joint_moment(&query)?;
    let bound = (n as f64).powi(p as i32) * (2.0 / (1.0 - q).sqrt()).powi(2 * p as i32);
    if !(sum >= 0.0 && sum <= bound * (1.0 + 1e-12)) {
        return Err(Error::numeric(
            format!("moment bound violated: sum {sum} vs bound {bound}"),
            sum - bound,
        ));
    }
    Ok(MomentBound { sum, bound })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force crossing count straight from the definition.
    fn brute_crossings(pi: &Pairing) -> usize {
        let mut c = 0;
        for &(x1, y1) in pi.blocks() {
            for &(x2, y2) in pi.blocks() {
                if x1 < x2 && x2 < y1 && y1 < y2 {
                    c += 1;
                }
            }
        }
        c
    }

    #[test]
    fn small_pairings() {
        let p2 = enumerate_pairings(2).unwrap();
        assert_eq!(p2, vec![Pairing::new(vec![(1, 2)]).unwrap()]);
        assert_eq!(enumerate_pairings(4).unwrap().len(), 3);
        assert_eq!(enumerate_pairings(6).unwrap().len(), 15);
        assert!(enumerate_pairings(5).unwrap().is_empty());
        assert!(matches!(enumerate_pairings(18), Err(Error::Size { .. })));
    }

    #[test]
    fn crossing_examples() {
        let c = |b: Vec<(usize, usize)>| Pairing::new(b).unwrap().crossing_number();
        assert_eq!(c(vec![(1, 2), (3, 4)]), 0);
        assert_eq!(c(vec![(1, 3), (2, 4)]), 1);
        assert_eq!(c(vec![(1, 4), (2, 5), (3, 6)]), 3);
    }

    #[test]
    fn invalid_pairings_rejected() {
        assert!(Pairing::new(vec![(1, 1)]).is_err());
        assert!(Pairing::new(vec![(1, 2), (2, 3)]).is_err());
        assert!(Pairing::new(vec![(1, 5)]).is_err());
    }

    #[test]
    fn moment_examples() {
        let m = q_joint_moment(&MomentQuery::times(vec![2.0, 3.0], 0.7).unwrap()).unwrap();
        assert_eq!(m, 2.0);
        for q in [-0.5, 0.0, 0.3] {
            let m = q_joint_moment(&MomentQuery::times(vec![1.0; 4], q).unwrap()).unwrap();
            assert!((m - (2.0 + q)).abs() < 1e-15);
        }
        let m = q_joint_moment(&MomentQuery::times(vec![1.0; 6], 0.0).unwrap()).unwrap();
        assert_eq!(m, 5.0);
        let m = q_joint_moment(&MomentQuery::times(vec![1.0; 3], 0.0).unwrap()).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn recursion_matches_enumeration() {
        let times = [0.3, 1.2, 0.7, 2.0, 0.1, 1.5, 0.9, 0.4];
        let q = -0.37;
        let fast = q_joint_moment(&MomentQuery::times(times.to_vec(), q).unwrap()).unwrap();
        let mut slow = 0.0;
        for pi in enumerate_pairings(8).unwrap() {
            let mut w = q.powi(brute_crossings(&pi) as i32);
            for &(a, b) in pi.blocks() {
                w *= times[a - 1].min(times[b - 1]);
            }
            slow += w;
        }
        assert!((fast - slow).abs() < 1e-13);
    }

    #[test]
    fn gram_form_matches_time_form() {
        let t = [0.5, 1.0, 2.0, 0.25];
        let g: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| f64::min(t[i], t[j])).collect()).collect();
        let a = q_joint_moment(&MomentQuery::times(t.to_vec(), 0.2).unwrap()).unwrap();
        let b = q_joint_moment(&MomentQuery::gram(g, 0.2).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(MomentQuery::gram(vec![vec![1.0, 2.0], vec![0.0, 1.0]], 0.0).is_err());
        assert!(MomentQuery::gram(vec![vec![1.0, 2.0], vec![2.0, 1.0]], 0.0).is_err());
    }

    #[test]
    fn crossing_polynomial_small() {
        assert_eq!(crossing_polynomial(4).unwrap(), vec![2, 1]);
        assert_eq!(crossing_polynomial(6).unwrap(), vec![5, 6, 3, 1]);
    }

    #[test]
    fn exact_moments() {
        let q = rational(1, 3);
        let m = q_joint_moment_exact(&vec![rational(1, 1); 4], &q).unwrap();
        assert_eq!(m, rational(7, 3));
        let m = q_joint_moment_exact(&[rational(2, 1), rational(3, 1)], &q).unwrap();
        assert_eq!(m, rational(2, 1));
    }

    #[test]
    fn density_examples() {
        assert_eq!(density_moment(0.0, 1).unwrap(), 0.0);
        assert!((density_moment(0.0, 0).unwrap() - 1.0).abs() < 1e-12);
        assert!((density_moment(0.0, 4).unwrap() - 2.0).abs() < 1e-10);
        assert!((density_moment(0.5, 4).unwrap() - 2.5).abs() < 1e-10);
        assert!(density_moment(0.0, 14).is_err());
        assert!(density_moment(1.5, 2).is_err());
    }

    #[test]
    fn density_in_x_integrates_to_one() {
        for q in [-0.5, 0.0, 0.5] {
            let edge = 2.0 / (1.0f64 - q).sqrt();
            let (v, _) = adaptive_gk(|x| nu_q_density(q, x).unwrap(), -edge, edge, 1e-9, 4000).unwrap();
            assert!((v - 1.0).abs() < 1e-7, "q={q} mass {v}");
        }
    }

    #[test]
    fn moment_bound_examples() {
        let b = moment_bound_check(1, 1, 0.0).unwrap();
        assert!((b.sum - 1.0).abs() < 1e-15 && (b.bound - 4.0).abs() < 1e-12);
        let b = moment_bound_check(4, 1, 0.0).unwrap();
        assert!((b.sum - 4.0).abs() < 1e-15 && (b.bound - 16.0).abs() < 1e-12);
        let b = moment_bound_check(2, 2, 0.5).unwrap();
        assert!((b.sum - 10.0).abs() < 1e-12 && (b.bound - 256.0).abs() < 1e-9);
        assert!(moment_bound_check(65, 1, 0.0).is_err());
        assert!(moment_bound_check(2, 9, 0.0).is_err());
    }
}
