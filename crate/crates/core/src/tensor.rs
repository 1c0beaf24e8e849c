//! Rank-2 and rank-3 tensors over M_N(C), kept as formal sums of elementary
//! tensors together with a multiplication convention.

use faer::{c64, Mat, Side};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::algebra::{cr, Accumulator, AlgebraElement, ONE, ZERO};
use crate::error::{Error, Result};

/// Multiplication convention on A⊗A.
///
/// Config1: (a⊗b)(c⊗d) = ac⊗bd, (a⊗b)* = a*⊗b*.
/// Config2: (a⊗b)(c⊗d) = ac⊗db, (a⊗b)* = b*⊗a*.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Config {
    Config1,
    Config2,
}

/// Largest N for which `spatial_norm` runs (the flattened operator is N²×N²).
pub const SPATIAL_NORM_BUDGET: usize = 256;
/// Up to this N the flattened matrix is formed and factorized densely.
pub const DENSE_SPATIAL_MAX: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side2 {
    Left,
    Right,
}

/// Σ u_i ⊗ v_i.
#[derive(Clone, Debug)]
pub struct TensorElement2 {
    n: usize,
    config: Config,
    terms: Vec<(AlgebraElement, AlgebraElement)>,
}

fn config_mismatch(a: Config, b: Config) -> Error {
    Error::usage(format!("tensor configuration mismatch: {a:?} vs {b:?}"))
}

impl TensorElement2 {
    pub fn zero(n: usize, config: Config) -> Self {
        TensorElement2 {
            n,
            config,
            terms: Vec::new(),
        }
    }

    /// 1⊗1.
    pub fn unit(n: usize, config: Config) -> Self {
        Self::simple(AlgebraElement::identity(n), AlgebraElement::identity(n), config)
    }

    pub fn simple(u: AlgebraElement, v: AlgebraElement, config: Config) -> Self {
        assert_eq!(u.dim(), v.dim());
        TensorElement2 {
            n: u.dim(),
            config,
            terms: vec![(u, v)],
        }
    }

    pub fn from_terms(n: usize, config: Config, terms: Vec<(AlgebraElement, AlgebraElement)>) -> Result<Self> {
        if terms.iter().any(|(u, v)| u.dim() != n || v.dim() != n) {
            return Err(Error::usage("tensor factors live in different spaces"));
        }
        Ok(TensorElement2 { n, config, terms })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn config(&self) -> Config {
        self.config
    }

    pub fn terms(&self) -> &[(AlgebraElement, AlgebraElement)] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn push(&mut self, u: AlgebraElement, v: AlgebraElement) {
        assert!(u.dim() == self.n && v.dim() == self.n);
        self.terms.push((u, v));
    }

    pub fn with_config(&self, config: Config) -> Self {
        TensorElement2 {
            n: self.n,
            config,
            terms: self.terms.clone(),
        }
    }

    fn check(&self, other: &Self) -> Result<()> {
        if self.config != other.config {
            return Err(config_mismatch(self.config, other.config));
        }
        if self.n != other.n {
            return Err(Error::usage("tensors live in different spaces"));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check(other)?;
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Ok(TensorElement2 {
            n: self.n,
            config: self.config,
            terms,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(cr(-1.0)))
    }

    /// Scales the first factor of every term.
    pub fn scale(&self, c: c64) -> Self {
        TensorElement2 {
            n: self.n,
            config: self.config,
            terms: self.terms.iter().map(|(u, v)| (u.scale(c), v.clone())).collect(),
        }
    }

    /// Product under the carried configuration.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check(other)?;
        let mut terms = Vec::with_capacity(self.len() * other.len());
        for (u1, u2) in &self.terms {
            for (v1, v2) in &other.terms {
                let a = u1.matmul(v1);
                let b = match self.config {
                    Config::Config1 => u2.matmul(v2),
                    Config::Config2 => v2.matmul(u2),
                };
                terms.push((a, b));
            }
        }
        Ok(TensorElement2 {
            n: self.n,
            config: self.config,
            terms,
        })
    }

    pub fn adjoint(&self) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|(u, v)| match self.config {
                Config::Config1 => (u.adjoint(), v.adjoint()),
                Config::Config2 => (v.adjoint(), u.adjoint()),
            })
            .collect();
        TensorElement2 {
            n: self.n,
            config: self.config,
            terms,
        }
    }

    /// U♯X = Σ u X v.
    pub fn sharp(&self, x: &AlgebraElement) -> AlgebraElement {
        assert_eq!(x.dim(), self.n);
        let mut acc = Accumulator::new(self.n);
        for (u, v) in &self.terms {
            acc.add_product(ONE, &u.matmul(x), v);
        }
        acc.finish()
    }

    /// Left: Σ φ(u) v, i.e. (φ×Id). Right: Σ φ(v) u, i.e. (Id×φ).
    pub fn partial_trace(&self, side: Side2) -> AlgebraElement {
        let mut acc = Accumulator::new(self.n);
        for (u, v) in &self.terms {
            match side {
                Side2::Left => acc.add_scaled(u.trace(), v),
                Side2::Right => acc.add_scaled(v.trace(), u),
            }
        }
        acc.finish()
    }

    /// Σ u·v (the multiplication map).
    pub fn multiply_out(&self) -> AlgebraElement {
        let mut acc = Accumulator::new(self.n);
        for (u, v) in &self.terms {
            acc.add_product(ONE, u, v);
        }
        acc.finish()
    }

    /// Ψ_U(Y) = Σ_j (U♯y_j)⊗z_j.
    pub fn psi(&self, y: &TensorElement2) -> Result<Self> {
        if self.n != y.n {
            return Err(Error::usage("tensors live in different spaces"));
        }
        let terms = y.terms.iter().map(|(a, b)| (self.sharp(a), b.clone())).collect();
        Ok(TensorElement2 {
            n: self.n,
            config: y.config,
            terms,
        })
    }

    /// (U)⊗w as a rank-3 tensor.
    pub fn tensor_right(&self, w: &AlgebraElement) -> TensorElement3 {
        TensorElement3 {
            n: self.n,
            config: self.config,
            terms: self.terms.iter().map(|(u, v)| (u.clone(), v.clone(), w.clone())).collect(),
        }
    }

    /// w⊗(U) as a rank-3 tensor.
    pub fn tensor_left(&self, w: &AlgebraElement) -> TensorElement3 {
        TensorElement3 {
            n: self.n,
            config: self.config,
            terms: self.terms.iter().map(|(u, v)| (w.clone(), u.clone(), v.clone())).collect(),
        }
    }

    /// Σ ‖u‖‖v‖ over the current representation.
    pub fn proj_ub(&self) -> f64 {
        self.terms.iter().map(|(u, v)| u.op_norm() * v.op_norm()).sum()
    }

    /// Factors (L, R) with flatten(U)·vec_r(Z) = vec_r(Σ L Z R).
    fn flat_factors(&self) -> Vec<(AlgebraElement, AlgebraElement)> {
        self.terms
            .iter()
            .map(|(u, v)| match self.config {
                Config::Config1 => (u.clone(), v.transpose()),
                Config::Config2 => (u.clone(), v.clone()),
            })
            .collect()
    }

    /// Flattened N²×N² matrix: Config1 Σ u⊗v, Config2 Σ u⊗vᵀ (Kronecker,
    /// row index i·N + k).
    pub fn flatten(&self) -> Result<Mat<c64>> {
        let n = self.n;
        if n > SPATIAL_NORM_BUDGET {
            return Err(Error::Size {
                what: "flattened tensor dimension N",
                size: n,
                budget: SPATIAL_NORM_BUDGET,
            });
        }
        let nn = n * n;
        let mut k = Mat::<c64>::zeros(nn, nn);
        for (l, r) in self.flat_factors() {
            // (L ⊗ Rᵀ)_{(i,k),(j,l)} = L_ij R_lk
            let lm = l.to_mat();
            let rm = r.to_mat();
            for i in 0..n {
                for j in 0..n {
                    let a = lm[(i, j)];
                    if a == ZERO {
                        continue;
                    }
                    for kk in 0..n {
                        for ll in 0..n {
                            k[(i * n + kk, j * n + ll)] += a * rm[(ll, kk)];
                        }
                    }
                }
            }
        }
        Ok(k)
    }

    /// Z ↦ flatten(U)·Z on matrices (row-major vec convention).
    pub fn apply_flat(&self, z: &AlgebraElement) -> AlgebraElement {
        let mut acc = Accumulator::new(self.n);
        for (l, r) in self.flat_factors() {
            acc.add_product(ONE, &l.matmul(z), &r);
        }
        acc.finish()
    }

    /// Operator norm of the flattened tensor (the L∞(φ⊗φ) norm).
    pub fn spatial_norm(&self) -> Result<f64> {
        let n = self.n;
        if n > SPATIAL_NORM_BUDGET {
            return Err(Error::Size {
                what: "spatial norm dimension N",
                size: n,
                budget: SPATIAL_NORM_BUDGET,
            });
        }
        if self.terms.is_empty() {
            return Ok(0.0);
        }
        if n <= DENSE_SPATIAL_MAX {
            return Ok(self.spatial_norm_dense());
        }
        let op = FlatOperator::new(self);
        Ok(op.norm())
    }

    /// Dense SVD of the flattened matrix; reference for the iterative path.
    pub fn spatial_norm_dense(&self) -> f64 {
        let k = self.flatten().expect("dense flatten within budget");
        k.singular_values().expect("svd failed")[0]
    }

    /// Equivalent representation with fewer terms.
    ///
    /// First merges terms sharing a factor (exactly). If more than one term is
    /// left, a Schmidt decomposition of the collected sum is truncated so that
    /// the discarded part has Hilbert–Schmidt norm ≤ tol, which bounds its
    /// operator norm as a map X ↦ U♯X. The Schmidt form is kept only if it has
    /// fewer terms and at most doubles `proj_ub`.
    pub fn compress(&self, tol: f64) -> TensorElement2 {
        let collected = self.collect();
        if collected.len() <= 1 {
            return collected;
        }
        match collected.schmidt(tol) {
            Some(s)
                if s.len() < collected.len()
                    && s.proj_ub() <= 2.0 * self.proj_ub().max(collected.proj_ub()) =>
            {
                s
            }
            _ => collected,
        }
    }

    /// Merges terms with a shared (identical) first or second factor and all
    /// scalar first or second factors.
    pub fn collect(&self) -> TensorElement2 {
        let mut out: Vec<(AlgebraElement, AlgebraElement)> = Vec::new();
        for (u, v) in &self.terms {
            if u.is_zero_symbolic() || v.is_zero_symbolic() {
                continue;
            }
            let mut merged = false;
            for (a, b) in out.iter_mut() {
                if a.same_storage(u) {
                    *b = &*b + v;
                    merged = true;
                } else if b.same_storage(v) {
                    *a = &*a + u;
                    merged = true;
                } else if let (Some(x), Some(y)) = (a.as_scalar(), u.as_scalar()) {
                    // x·1⊗b + y·1⊗v = 1⊗(x b + y v)
                    *b = b.scale(x).axpy(y, v);
                    *a = AlgebraElement::identity(self.n);
                    merged = true;
                } else if let (Some(x), Some(y)) = (b.as_scalar(), v.as_scalar()) {
                    *a = a.scale(x).axpy(y, u);
                    *b = AlgebraElement::identity(self.n);
                    merged = true;
                }
                if merged {
                    break;
                }
            }
            if !merged {
                out.push((u.clone(), v.clone()));
            }
        }
        TensorElement2 {
            n: self.n,
            config: self.config,
            terms: out,
        }
    }

    /// Truncated Schmidt decomposition via thin QR of the stacked factors.
    fn schmidt(&self, tol: f64) -> Option<TensorElement2> {
        let n = self.n;
        let nn = n * n;
        let m = self.len();
        let stack = |pick: &dyn Fn(&(AlgebraElement, AlgebraElement)) -> &AlgebraElement| {
            let mut s = Mat::<c64>::zeros(nn, m);
            for (c, t) in self.terms.iter().enumerate() {
                let e = pick(t);
                for i in 0..n {
                    for j in 0..n {
                        s[(i * n + j, c)] = e.get(i, j);
                    }
                }
            }
            s
        };
        let su = stack(&|t| &t.0);
        let sv = stack(&|t| &t.1);
        let qu = su.qr();
        let qv = sv.qr();
        let (q_u, r_u) = (qu.compute_thin_Q(), qu.thin_R().to_owned());
        let (q_v, r_v) = (qv.compute_thin_Q(), qv.thin_R().to_owned());
        // U ↔ Su·Svᵀ = Qu (Ru Rvᵀ) Qvᵀ
        let c = &r_u * r_v.transpose();
        let svd = c.svd().ok()?;
        let s = svd.S();
        let k = s.dim();
        let sig: Vec<f64> = (0..k).map(|i| s[i].re).collect();
        let mut keep = k;
        let mut dropped = 0.0;
        while keep > 0 {
            let d = dropped + sig[keep - 1] * sig[keep - 1];
            if d.sqrt() > tol {
                break;
            }
            dropped = d;
            keep -= 1;
        }
        let left = &q_u * svd.U();
        let right = &q_v * svd.V().conjugate();
        let unvec = |mat: &Mat<c64>, col: usize, scale: f64| {
            AlgebraElement::from_fn(n, |i, j| mat[(i * n + j, col)] * scale)
        };
        let terms = (0..keep)
            .map(|s_| (unvec(&left, s_, sig[s_]), unvec(&right, s_, 1.0)))
            .collect();
        Some(TensorElement2 {
            n,
            config: self.config,
            terms,
        })
    }
}

/// Matrix-free flattened operator for the iterative norm.
struct FlatOperator {
    n: usize,
    factors: Vec<(AlgebraElement, AlgebraElement)>,
    adjoint: Vec<(AlgebraElement, AlgebraElement)>,
}

impl FlatOperator {
    fn new(t: &TensorElement2) -> Self {
        let factors = t.flat_factors();
        let adjoint = factors.iter().map(|(l, r)| (l.adjoint(), r.adjoint())).collect();
        FlatOperator {
            n: t.n,
            factors,
            adjoint,
        }
    }

    fn apply(&self, z: &AlgebraElement, adj: bool) -> AlgebraElement {
        let list = if adj { &self.adjoint } else { &self.factors };
        let mut acc = Accumulator::new(self.n);
        for (l, r) in list {
            acc.add_product(ONE, &l.matmul(z), r);
        }
        acc.finish()
    }

    fn random_unit(&self, seed: u64) -> Vec<c64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<c64> = (0..self.n * self.n)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                c64::new(a, b)
            })
            .collect();
        normalize(&mut v);
        v
    }

    fn is_hermitian(&self) -> bool {
        let z = to_elem(self.n, &self.random_unit(0x5eed));
        let a = self.apply(&z, false);
        let b = self.apply(&z, true);
        (&a - &b).frobenius() <= 1e-13 * a.frobenius().max(f64::MIN_POSITIVE)
    }

    /// Largest singular value by Lanczos with full reorthogonalization: on the
    /// operator itself when Hermitian, on K*K otherwise.
    fn norm(&self) -> f64 {
        let herm = self.is_hermitian();
        let apply = |v: &[c64]| -> Vec<c64> {
            let z = to_elem(self.n, v);
            let y = self.apply(&z, false);
            let y = if herm { y } else { self.apply(&y, true) };
            to_vec(&y)
        };
        let lambda = lanczos_extreme(self.n * self.n, &apply, self.random_unit(0x1a2c20), 1e-11);
        if herm {
            lambda
        } else {
            lambda.sqrt()
        }
    }
}

fn to_elem(n: usize, v: &[c64]) -> AlgebraElement {
    AlgebraElement::from_fn(n, |i, j| v[i * n + j])
}

fn to_vec(x: &AlgebraElement) -> Vec<c64> {
    x.to_row_major()
}

fn dot(a: &[c64], b: &[c64]) -> c64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm2(a: &[c64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

fn normalize(a: &mut [c64]) {
    let s = norm2(a);
    for x in a.iter_mut() {
        *x /= s;
    }
}

/// max |λ| of a Hermitian operator on C^dim.
fn lanczos_extreme(dim: usize, apply: &dyn Fn(&[c64]) -> Vec<c64>, start: Vec<c64>, tol: f64) -> f64 {
    let max_iter = dim.min(400);
    let mut basis: Vec<Vec<c64>> = vec![start];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut best = 0.0f64;
    for j in 0..max_iter {
        let mut w = apply(&basis[j]);
        let a = dot(&basis[j], &w).re;
        alpha.push(a);
        for _ in 0..2 {
            for v in &basis {
                let c = dot(v, &w);
                for (x, y) in w.iter_mut().zip(v) {
                    *x -= c * y;
                }
            }
        }
        let b = norm2(&w);
        let k = j + 1;
        let check = k == max_iter || k % 4 == 0 || b <= 1e-14 * best.max(a.abs()).max(f64::MIN_POSITIVE);
        if check {
            let t = Mat::<f64>::from_fn(k, k, |r, c| {
                if r == c {
                    alpha[r]
                } else if r + 1 == c {
                    beta[r]
                } else if c + 1 == r {
                    beta[c]
                } else {
                    0.0
                }
            });
            let e = t.self_adjoint_eigen(Side::Lower).expect("tridiagonal eigen");
            let s = e.S();
            let u = e.U();
            let (idx, theta) = (0..k).fold((0, 0.0f64), |acc, i| {
                if s[i].abs() > acc.1.abs() {
                    (i, s[i])
                } else {
                    acc
                }
            });
            best = theta.abs();
            let residual = b * u[(k - 1, idx)].abs();
            if residual <= tol * best || b <= 1e-14 * best.max(f64::MIN_POSITIVE) || k == max_iter {
                return best;
            }
        }
        beta.push(b);
        for x in w.iter_mut() {
            *x /= b;
        }
        basis.push(w);
    }
    best
}

/// Σ u_i ⊗ v_i ⊗ w_i.
#[derive(Clone, Debug)]
pub struct TensorElement3 {
    n: usize,
    config: Config,
    terms: Vec<(AlgebraElement, AlgebraElement, AlgebraElement)>,
}

impl TensorElement3 {
    pub fn zero(n: usize, config: Config) -> Self {
        TensorElement3 {
            n,
            config,
            terms: Vec::new(),
        }
    }

    /// 1⊗1⊗1.
    pub fn unit(n: usize, config: Config) -> Self {
        let i = AlgebraElement::identity(n);
        Self::simple(i.clone(), i.clone(), i, config)
    }

    pub fn simple(u: AlgebraElement, v: AlgebraElement, w: AlgebraElement, config: Config) -> Self {
        TensorElement3 {
            n: u.dim(),
            config,
            terms: vec![(u, v, w)],
        }
    }

    pub fn from_terms(
        n: usize,
        config: Config,
        terms: Vec<(AlgebraElement, AlgebraElement, AlgebraElement)>,
    ) -> Result<Self> {
        if terms.iter().any(|(u, v, w)| u.dim() != n || v.dim() != n || w.dim() != n) {
            return Err(Error::usage("tensor factors live in different spaces"));
        }
        Ok(TensorElement3 { n, config, terms })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn config(&self) -> Config {
        self.config
    }

    pub fn terms(&self) -> &[(AlgebraElement, AlgebraElement, AlgebraElement)] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.config != other.config {
            return Err(config_mismatch(self.config, other.config));
        }
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Ok(TensorElement3 {
            n: self.n,
            config: self.config,
            terms,
        })
    }

    pub fn scale(&self, c: c64) -> Self {
        TensorElement3 {
            n: self.n,
            config: self.config,
            terms: self
                .terms
                .iter()
                .map(|(u, v, w)| (u.scale(c), v.clone(), w.clone()))
                .collect(),
        }
    }

    /// Left: X♯𝕌 = Σ (uXv)⊗w. Right: 𝕌♯X = Σ u⊗(vXw).
    pub fn tri_sharp(&self, x: &AlgebraElement, side: Side2) -> TensorElement2 {
        let terms = self
            .terms
            .iter()
            .map(|(u, v, w)| match side {
                Side2::Left => (u.matmul(x).matmul(v), w.clone()),
                Side2::Right => (u.clone(), v.matmul(x).matmul(w)),
            })
            .collect();
        TensorElement2 {
            n: self.n,
            config: self.config,
            terms,
        }
    }

    /// X♯𝕌♯Y = Σ u X v Y w.
    pub fn double_sharp(&self, x: &AlgebraElement, y: &AlgebraElement) -> AlgebraElement {
        let mut acc = Accumulator::new(self.n);
        for (u, v, w) in &self.terms {
            let a = u.matmul(x).matmul(v).matmul(y);
            acc.add_product(ONE, &a, w);
        }
        acc.finish()
    }

    /// (Id×φ×Id)(𝕌) = Σ φ(v) u w.
    pub fn partial_trace_mid(&self) -> AlgebraElement {
        let mut acc = Accumulator::new(self.n);
        for (u, v, w) in &self.terms {
            acc.add_product(v.trace(), u, w);
        }
        acc.finish()
    }

    /// Σ ‖u‖‖v‖‖w‖.
    pub fn proj_ub(&self) -> f64 {
        self.terms
            .iter()
            .map(|(u, v, w)| u.op_norm() * v.op_norm() * w.op_norm())
            .sum()
    }

    /// Σ (u⊗v) paired with w, as (first two factors, third factor) groups.
    pub fn split_last(&self) -> Vec<(TensorElement2, AlgebraElement)> {
        self.terms
            .iter()
            .map(|(u, v, w)| (TensorElement2::simple(u.clone(), v.clone(), self.config), w.clone()))
            .collect()
    }
}

/// Merges identical trailing factors: groups terms of a rank-3 tensor by their
/// third factor so that [𝐗×Id] needs one area per group.
pub fn group_by_last(t: &TensorElement3) -> Vec<(TensorElement2, AlgebraElement)> {
    let mut groups: Vec<(TensorElement2, AlgebraElement)> = Vec::new();
    for (u, v, w) in t.terms() {
        if let Some(g) = groups.iter_mut().find(|g| g.1.same_storage(w)) {
            g.0.push(u.clone(), v.clone());
        } else {
            groups.push((TensorElement2::simple(u.clone(), v.clone(), t.config()), w.clone()));
        }
    }
    groups
}

/// Groups terms of a rank-3 tensor by their first factor, for [Id×𝐗*].
pub fn group_by_first(t: &TensorElement3) -> Vec<(AlgebraElement, TensorElement2)> {
    let mut groups: Vec<(AlgebraElement, TensorElement2)> = Vec::new();
    for (u, v, w) in t.terms() {
        if let Some(g) = groups.iter_mut().find(|g| g.0.same_storage(u)) {
            g.1.push(v.clone(), w.clone());
        } else {
            groups.push((u.clone(), TensorElement2::simple(v.clone(), w.clone(), t.config())));
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix_model::{sample_gue_increment, substream};
    use crate::algebra::Space;

    fn rnd(n: usize, seed: u64) -> AlgebraElement {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AlgebraElement::from_fn(n, |_, _| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            c64::new(a, b)
        })
    }

    fn rnd_tensor(n: usize, terms: usize, config: Config, seed: u64) -> TensorElement2 {
        let t = (0..terms)
            .map(|k| (rnd(n, seed * 100 + 2 * k as u64), rnd(n, seed * 100 + 2 * k as u64 + 1)))
            .collect();
        TensorElement2::from_terms(n, config, t).unwrap()
    }

    #[test]
    fn unit_acts_trivially() {
        let x = rnd(4, 1);
        let one = TensorElement2::unit(4, Config::Config2);
        assert!(one.sharp(&x).max_abs_diff(&x) < 1e-15);
        let u = rnd_tensor(4, 3, Config::Config2, 2);
        assert!(one.mul(&u).unwrap().sharp(&x).max_abs_diff(&u.sharp(&x)) < 1e-12);
        let adj = one.adjoint();
        assert!(adj.sharp(&x).max_abs_diff(&x) < 1e-15);
        assert!(one.psi(&u).unwrap().sharp(&x).max_abs_diff(&u.sharp(&x)) < 1e-12);
    }

    #[test]
    fn config2_product_and_adjoint() {
        let (a, b, c, d) = (rnd(3, 1), rnd(3, 2), rnd(3, 3), rnd(3, 4));
        let p = TensorElement2::simple(a.clone(), b.clone(), Config::Config2)
            .mul(&TensorElement2::simple(c.clone(), d.clone(), Config::Config2))
            .unwrap();
        assert!(p.terms()[0].0.max_abs_diff(&a.matmul(&c)) < 1e-14);
        assert!(p.terms()[0].1.max_abs_diff(&d.matmul(&b)) < 1e-14);
        let s = TensorElement2::simple(a.clone(), b.clone(), Config::Config2).adjoint();
        assert!(s.terms()[0].0.max_abs_diff(&b.adjoint()) == 0.0);
        assert!(s.terms()[0].1.max_abs_diff(&a.adjoint()) == 0.0);
    }

    #[test]
    fn config_mismatch_is_an_error() {
        let a = TensorElement2::unit(2, Config::Config1);
        let b = TensorElement2::unit(2, Config::Config2);
        assert!(a.mul(&b).is_err());
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn partial_traces() {
        let (a, b) = (rnd(4, 5), rnd(4, 6));
        let t = TensorElement2::simple(a.clone(), b.clone(), Config::Config1);
        assert!(t.partial_trace(Side2::Left).max_abs_diff(&b.scale(a.trace())) < 1e-14);
        assert!(t.partial_trace(Side2::Right).max_abs_diff(&a.scale(b.trace())) < 1e-14);
        let one = TensorElement2::unit(4, Config::Config1);
        assert!(one.partial_trace(Side2::Right).max_abs_diff(&AlgebraElement::identity(4)) == 0.0);
    }

    #[test]
    fn tri_sharp_examples() {
        let x = rnd(3, 7);
        let u = TensorElement3::unit(3, Config::Config2);
        let l = u.tri_sharp(&x, Side2::Left);
        assert!(l.terms()[0].0.max_abs_diff(&x) == 0.0);
        assert!(l.terms()[0].1.max_abs_diff(&AlgebraElement::identity(3)) == 0.0);
        let (a, b, c) = (rnd(3, 8), rnd(3, 9), rnd(3, 10));
        let t = TensorElement3::simple(a.clone(), b.clone(), c.clone(), Config::Config2);
        let r = t.tri_sharp(&x, Side2::Right);
        assert!(r.terms()[0].1.max_abs_diff(&b.matmul(&x).matmul(&c)) < 1e-13);
        assert!(t.partial_trace_mid().max_abs_diff(&a.matmul(&c).scale(b.trace())) < 1e-13);
    }

    #[test]
    fn flatten_matches_sharp_in_config2() {
        let u = rnd_tensor(3, 2, Config::Config2, 11);
        let x = rnd(3, 12);
        let k = u.flatten().unwrap();
        let v = to_vec(&x);
        let kv: Vec<c64> = (0..9).map(|i| (0..9).map(|j| k[(i, j)] * v[j]).sum()).collect();
        let y = to_elem(3, &kv);
        assert!(y.max_abs_diff(&u.sharp(&x)) < 1e-12);
        assert!(u.apply_flat(&x).max_abs_diff(&u.sharp(&x)) < 1e-12);
    }

    #[test]
    fn spatial_norm_examples() {
        let one = TensorElement2::unit(5, Config::Config1);
        assert!((one.spatial_norm().unwrap() - 1.0).abs() < 1e-13);
        let a = rnd(5, 13);
        let t = TensorElement2::simple(a.clone(), AlgebraElement::identity(5), Config::Config1);
        assert!((t.spatial_norm().unwrap() - a.op_norm()).abs() < 1e-12);
        assert_eq!(TensorElement2::zero(4, Config::Config1).spatial_norm().unwrap(), 0.0);
        let big = TensorElement2::unit(SPATIAL_NORM_BUDGET + 1, Config::Config1);
        assert!(matches!(big.spatial_norm(), Err(Error::Size { .. })));
    }

    #[test]
    fn iterative_norm_matches_dense() {
        for (config, seed) in [(Config::Config1, 1), (Config::Config2, 2)] {
            let t = rnd_tensor(6, 3, config, 20 + seed);
            let dense = t.spatial_norm_dense();
            let iter = FlatOperator::new(&t).norm();
            assert!((dense - iter).abs() <= 1e-9 * dense, "{config:?}: {dense} vs {iter}");
        }
        let sp = Space::new(7).unwrap();
        let mut rng = substream(3, 0, 0);
        let ys: Vec<_> = (0..3).map(|_| sample_gue_increment(sp, 1.0, &mut rng)).collect();
        let t = TensorElement2::from_terms(7, Config::Config1, ys.iter().map(|y| (y.clone(), y.clone())).collect()).unwrap();
        let op = FlatOperator::new(&t);
        assert!(op.is_hermitian());
        let dense = t.spatial_norm_dense();
        assert!((dense - op.norm()).abs() <= 1e-9 * dense);
    }

    #[test]
    fn proj_ub_dominates_spatial() {
        let t = rnd_tensor(4, 5, Config::Config2, 30);
        assert!(t.spatial_norm().unwrap() <= t.proj_ub() * (1.0 + 1e-12));
        let (a, b) = (rnd(4, 31), rnd(4, 32));
        let s = TensorElement2::simple(a.clone(), b.clone(), Config::Config1);
        assert!((s.proj_ub() - a.op_norm() * b.op_norm()).abs() < 1e-12);
    }

    #[test]
    fn compress_collects_shared_factor() {
        let (a, b, c) = (rnd(3, 40), rnd(3, 41), rnd(3, 42));
        let t = TensorElement2::from_terms(3, Config::Config2, vec![(a.clone(), b.clone()), (a.clone(), c.clone())]).unwrap();
        let k = t.compress(1e-10);
        assert_eq!(k.len(), 1);
        assert!(k.terms()[0].1.max_abs_diff(&(&b + &c)) == 0.0);
    }

    #[test]
    fn compress_random_many_terms() {
        let t = rnd_tensor(4, 50, Config::Config2, 50);
        let k = t.compress(1e-10);
        assert!(k.len() <= 16);
        for s in 0..3 {
            let x = rnd(4, 60 + s);
            assert!(k.sharp(&x).max_abs_diff(&t.sharp(&x)) < 1e-9);
        }
    }
}
