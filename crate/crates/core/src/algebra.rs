//! Matrix probability space: N×N complex matrices with the normalized trace
//! φ = tr/N and the operator norm.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use faer::linalg::matmul::matmul;
pub use faer::c64;
use faer::{Accum, Mat, MatRef, Par, Scale, Side};

use crate::error::{Error, Result};

/// Entrywise tolerance below which a matrix counts as self-adjoint.
pub const SELF_ADJOINT_TOL: f64 = 1e-12;

pub const ZERO: c64 = c64 { re: 0.0, im: 0.0 };
pub const ONE: c64 = c64 { re: 1.0, im: 0.0 };

pub fn cr(x: f64) -> c64 {
    c64::new(x, 0.0)
}

/// Ambient algebra M_N(C) with φ = (1/N)·trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Space {
    n: usize,
}

impl Space {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::usage("matrix dimension must be at least 1"));
        }
        Ok(Space { n })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn zero(&self) -> AlgebraElement {
        AlgebraElement::zeros(self.n)
    }

    pub fn identity(&self) -> AlgebraElement {
        AlgebraElement::identity(self.n)
    }
}

#[derive(Clone)]
enum Repr {
    /// c·1, kept symbolic so that products with scalars skip the matmul.
    Scalar(c64),
    Dense(Arc<Mat<c64>>),
}

/// An element of M_N(C). Cloning is cheap: dense storage is shared.
#[derive(Clone)]
pub struct AlgebraElement {
    n: usize,
    repr: Repr,
}

impl fmt::Debug for AlgebraElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.repr {
            Repr::Scalar(c) => write!(f, "AlgebraElement(N={}, {}·1)", self.n, c),
            Repr::Dense(m) => write!(f, "AlgebraElement(N={}, {:?})", self.n, m),
        }
    }
}

impl AlgebraElement {
    pub fn zeros(n: usize) -> Self {
        Self::scalar(n, ZERO)
    }

    pub fn identity(n: usize) -> Self {
        Self::scalar(n, ONE)
    }

    pub fn scalar(n: usize, c: c64) -> Self {
        AlgebraElement {
            n,
            repr: Repr::Scalar(c),
        }
    }

    pub fn from_mat(m: Mat<c64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "algebra elements are square");
        AlgebraElement {
            n: m.nrows(),
            repr: Repr::Dense(Arc::new(m)),
        }
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize, usize) -> c64) -> Self {
        Self::from_mat(Mat::from_fn(n, n, f))
    }

    /// Row-major entries.
    pub fn from_row_major(n: usize, data: &[c64]) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::usage(format!(
                "expected {} entries for N={n}, got {}",
                n * n,
                data.len()
            )));
        }
        Ok(Self::from_fn(n, |i, j| data[i * n + j]))
    }

    pub fn diag(values: &[c64]) -> Self {
        let n = values.len();
        Self::from_fn(n, |i, j| if i == j { values[i] } else { ZERO })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn space(&self) -> Space {
        Space { n: self.n }
    }

    /// `Some(c)` when the element is stored symbolically as c·1.
    pub fn as_scalar(&self) -> Option<c64> {
        match self.repr {
            Repr::Scalar(c) => Some(c),
            Repr::Dense(_) => None,
        }
    }

    pub fn is_zero_symbolic(&self) -> bool {
        matches!(self.repr, Repr::Scalar(c) if c == ZERO)
    }

    /// Identity of the shared storage; used to merge identical tensor factors.
    pub fn same_storage(&self, other: &Self) -> bool {
        match (&self.repr, &other.repr) {
            (Repr::Scalar(a), Repr::Scalar(b)) => a == b,
            (Repr::Dense(a), Repr::Dense(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }

    pub fn to_mat(&self) -> Mat<c64> {
        match &self.repr {
            Repr::Scalar(c) => {
                let c = *c;
                Mat::from_fn(self.n, self.n, |i, j| if i == j { c } else { ZERO })
            }
            Repr::Dense(m) => (**m).clone(),
        }
    }

    /// Owned dense matrix, without copying when the storage is unshared.
    pub fn into_mat(self) -> Mat<c64> {
        match self.repr {
            Repr::Dense(m) => Arc::try_unwrap(m).unwrap_or_else(|m| (*m).clone()),
            Repr::Scalar(_) => self.to_mat(),
        }
    }

    /// Dense view, materializing scalars when needed.
    pub fn with_mat<R>(&self, f: impl FnOnce(MatRef<'_, c64>) -> R) -> R {
        match &self.repr {
            Repr::Dense(m) => f((**m).as_ref()),
            Repr::Scalar(_) => {
                let m = self.to_mat();
                f(m.as_ref())
            }
        }
    }

    pub fn get(&self, i: usize, j: usize) -> c64 {
        match &self.repr {
            Repr::Scalar(c) => {
                if i == j {
                    *c
                } else {
                    ZERO
                }
            }
            Repr::Dense(m) => m[(i, j)],
        }
    }

    pub fn to_row_major(&self) -> Vec<c64> {
        let n = self.n;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.get(i, j));
            }
        }
        out
    }

    fn check(&self, other: &Self) {
        assert_eq!(self.n, other.n, "algebra elements from different spaces");
    }

    pub fn scale(&self, c: c64) -> Self {
        match &self.repr {
            Repr::Scalar(a) => Self::scalar(self.n, a * c),
            Repr::Dense(m) => {
                if c == ZERO {
                    return Self::zeros(self.n);
                }
                if c == ONE {
                    return self.clone();
                }
                Self::from_mat(Scale(c) * &**m)
            }
        }
    }

    pub fn scale_re(&self, x: f64) -> Self {
        self.scale(cr(x))
    }

    /// self + c·other
    pub fn axpy(&self, c: c64, other: &Self) -> Self {
        self.check(other);
        match (&self.repr, &other.repr) {
            (Repr::Scalar(a), Repr::Scalar(b)) => Self::scalar(self.n, a + c * b),
            (Repr::Scalar(a), Repr::Dense(m)) => {
                let mut out = if c == ONE { (**m).clone() } else { Scale(c) * &**m };
                for i in 0..self.n {
                    out[(i, i)] += *a;
                }
                Self::from_mat(out)
            }
            (Repr::Dense(m), Repr::Scalar(b)) => {
                if c * b == ZERO {
                    return self.clone();
                }
                let mut out = (**m).clone();
                for i in 0..self.n {
                    out[(i, i)] += c * b;
                }
                Self::from_mat(out)
            }
            (Repr::Dense(a), Repr::Dense(b)) => {
                if c == ONE {
                    Self::from_mat(&**a + &**b)
                } else if c == cr(-1.0) {
                    Self::from_mat(&**a - &**b)
                } else {
                    Self::from_mat(&**a + Scale(c) * &**b)
                }
            }
        }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        self.check(other);
        match (&self.repr, &other.repr) {
            (Repr::Scalar(a), _) => other.scale(*a),
            (_, Repr::Scalar(b)) => self.scale(*b),
            (Repr::Dense(a), Repr::Dense(b)) => {
                let mut out = Mat::<c64>::zeros(self.n, self.n);
                matmul(out.as_mut(), Accum::Replace, a.as_ref(), b.as_ref(), ONE, Par::Seq);
                Self::from_mat(out)
            }
        }
    }

    /// Product of a sequence of factors, left to right.
    pub fn product(n: usize, factors: &[&AlgebraElement]) -> Self {
        let mut acc = Self::identity(n);
        for f in factors {
            acc = acc.matmul(f);
        }
        acc
    }

    pub fn adjoint(&self) -> Self {
        match &self.repr {
            Repr::Scalar(a) => Self::scalar(self.n, a.conj()),
            Repr::Dense(m) => Self::from_mat(m.adjoint().to_owned()),
        }
    }

    pub fn transpose(&self) -> Self {
        match &self.repr {
            Repr::Scalar(_) => self.clone(),
            Repr::Dense(m) => Self::from_mat(m.transpose().to_owned()),
        }
    }

    pub fn pow(&self, k: usize) -> Self {
        let mut acc = Self::identity(self.n);
        for _ in 0..k {
            acc = acc.matmul(self);
        }
        acc
    }

    /// Normalized trace φ(X) = (1/N)·Σ X_ii.
    pub fn trace(&self) -> c64 {
        match &self.repr {
            Repr::Scalar(a) => *a,
            Repr::Dense(m) => {
                let mut s = ZERO;
                for i in 0..self.n {
                    s += m[(i, i)];
                }
                s / self.n as f64
            }
        }
    }

    /// φ(X·Y) without forming the product.
    pub fn trace_of_product(&self, other: &Self) -> c64 {
        self.check(other);
        match (&self.repr, &other.repr) {
            (Repr::Scalar(a), _) => *a * other.trace(),
            (_, Repr::Scalar(b)) => *b * self.trace(),
            (Repr::Dense(a), Repr::Dense(b)) => {
                let mut s = ZERO;
                for i in 0..self.n {
                    for k in 0..self.n {
                        s += a[(i, k)] * b[(k, i)];
                    }
                }
                s / self.n as f64
            }
        }
    }

    /// Frobenius norm (unnormalized).
    pub fn frobenius(&self) -> f64 {
        match &self.repr {
            Repr::Scalar(a) => a.norm() * (self.n as f64).sqrt(),
            Repr::Dense(m) => m.norm_l2(),
        }
    }

    /// ‖X‖_{L²(φ)} = (φ(X*X))^{1/2}.
    pub fn l2_norm(&self) -> f64 {
        self.frobenius() / (self.n as f64).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        match &self.repr {
            Repr::Scalar(a) => a.re.is_finite() && a.im.is_finite(),
            Repr::Dense(m) => (0..self.n).all(|j| (0..self.n).all(|i| m[(i, j)].re.is_finite() && m[(i, j)].im.is_finite())),
        }
    }

    pub fn max_abs(&self) -> f64 {
        match &self.repr {
            Repr::Scalar(a) => a.norm(),
            Repr::Dense(m) => {
                let mut best = 0.0f64;
                for j in 0..self.n {
                    for i in 0..self.n {
                        best = best.max(m[(i, j)].norm());
                    }
                }
                best
            }
        }
    }

    /// max |X_ij − conj(X_ji)|.
    pub fn self_adjoint_defect(&self) -> f64 {
        match &self.repr {
            Repr::Scalar(a) => 2.0 * a.im.abs(),
            Repr::Dense(m) => {
                let mut best = 0.0f64;
                for i in 0..self.n {
                    for j in 0..=i {
                        best = best.max((m[(i, j)] - m[(j, i)].conj()).norm());
                    }
                }
                best
            }
        }
    }

    pub fn is_self_adjoint(&self) -> bool {
        self.self_adjoint_defect() <= SELF_ADJOINT_TOL * self.max_abs().max(1.0)
    }

    /// (X + X*)/2.
    pub fn symmetrized(&self) -> Self {
        match &self.repr {
            Repr::Scalar(a) => Self::scalar(self.n, cr(a.re)),
            Repr::Dense(m) => Self::from_fn(self.n, |i, j| (m[(i, j)] + m[(j, i)].conj()) * 0.5),
        }
    }

    /// Symmetrize if within tolerance, otherwise a usage error.
    pub fn checked_self_adjoint(&self) -> Result<Self> {
        let defect = self.self_adjoint_defect();
        if defect > SELF_ADJOINT_TOL * self.max_abs().max(1.0) {
            return Err(Error::usage(format!(
                "element is not self-adjoint (defect {defect:.3e})"
            )));
        }
        Ok(self.symmetrized())
    }

    /// Singular values in nonincreasing order; NaN when the matrix holds
    /// non-finite entries.
    pub fn singular_values(&self) -> Vec<f64> {
        match &self.repr {
            Repr::Scalar(a) => vec![a.norm(); self.n],
            Repr::Dense(_) if !self.is_finite() => vec![f64::NAN; self.n],
            Repr::Dense(m) => m.singular_values().unwrap_or_else(|_| vec![f64::NAN; self.n]),
        }
    }

    /// Operator norm ‖X‖ = largest singular value; NaN for non-finite input.
    pub fn op_norm(&self) -> f64 {
        match &self.repr {
            Repr::Scalar(a) => a.norm(),
            Repr::Dense(_) if !self.is_finite() => f64::NAN,
            Repr::Dense(m) => {
                if self.self_adjoint_defect() == 0.0 {
                    m.self_adjoint_eigenvalues(Side::Lower)
                        .map_or(f64::NAN, |ev| ev.iter().fold(0.0f64, |a, x| a.max(x.abs())))
                } else {
                    self.singular_values()[0]
                }
            }
        }
    }

    /// ‖X‖_{L^p(φ)} = φ(|X|^p)^{1/p}; `p = f64::INFINITY` gives the operator norm.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        if !(p >= 1.0) {
            return Err(Error::usage(format!("L^p norm needs p >= 1, got {p}")));
        }
        if p.is_infinite() {
            return Ok(self.op_norm());
        }
        if p == 2.0 {
            return Ok(self.l2_norm());
        }
        let s = self.singular_values();
        let mean = s.iter().map(|x| x.powf(p)).sum::<f64>() / self.n as f64;
        Ok(mean.powf(1.0 / p))
    }

    /// Spectral decomposition of a self-adjoint element.
    pub fn eigh(&self) -> Result<Spectral> {
        let x = self.checked_self_adjoint()?;
        Ok(match &x.repr {
            Repr::Scalar(a) => Spectral {
                values: vec![a.re; self.n],
                vectors: Arc::new(Mat::identity(self.n, self.n)),
            },
            Repr::Dense(m) => {
                let e = m
                    .self_adjoint_eigen(Side::Lower)
                    .map_err(|_| Error::numeric("eigendecomposition failed", f64::NAN))?;
                let values = (0..self.n).map(|i| e.S()[i].re).collect();
                Spectral {
                    values,
                    vectors: Arc::new(e.U().to_owned()),
                }
            }
        })
    }

    /// Matrix exponential e^{c·X} by scaling and squaring of a Taylor series.
    /// Works for any X; self-adjoint inputs are better served by `Spectral`.
    pub fn expm(&self, c: c64) -> Self {
        if let Repr::Scalar(a) = self.repr {
            return Self::scalar(self.n, (a * c).exp());
        }
        let a = self.scale(c);
        let norm = a.frobenius();
        let mut squarings = 0u32;
        let mut scaled = norm;
        while scaled > 0.5 {
            scaled *= 0.5;
            squarings += 1;
        }
        let a = a.scale_re(0.5f64.powi(squarings as i32));
        // Taylor to degree 20 on ‖A‖_F ≤ 1/2: remainder below 1e-25 relative.
        let mut term = Self::identity(self.n);
        let mut sum = Self::identity(self.n);
        for k in 1..=20 {
            term = term.matmul(&a).scale_re(1.0 / k as f64);
            sum = &sum + &term;
        }
        for _ in 0..squarings {
            sum = sum.matmul(&sum);
        }
        sum
    }

    /// max |X_ij − Y_ij|, an entrywise distance.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (self - other).max_abs()
    }
}

/// X = V·diag(λ)·V* for self-adjoint X.
#[derive(Clone, Debug)]
pub struct Spectral {
    pub values: Vec<f64>,
    pub vectors: Arc<Mat<c64>>,
}

impl Spectral {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// V·diag(f(λ))·V*.
    pub fn apply(&self, f: impl Fn(f64) -> c64) -> AlgebraElement {
        let n = self.dim();
        let d: Vec<c64> = self.values.iter().map(|&l| f(l)).collect();
        let v = self.vectors.as_ref();
        let scaled = Mat::from_fn(n, n, |i, j| v[(i, j)] * d[j]);
        let mut out = Mat::<c64>::zeros(n, n);
        matmul(out.as_mut(), Accum::Replace, scaled.as_ref(), v.adjoint(), ONE, Par::Seq);
        AlgebraElement::from_mat(out)
    }

    /// V*·Y·V, the matrix of Y in the eigenbasis.
    pub fn to_eigenbasis(&self, y: &AlgebraElement) -> Mat<c64> {
        let n = self.dim();
        let v = self.vectors.as_ref();
        y.with_mat(|ym| {
            let mut tmp = Mat::<c64>::zeros(n, n);
            matmul(tmp.as_mut(), Accum::Replace, v.adjoint(), ym, ONE, Par::Seq);
            let mut out = Mat::<c64>::zeros(n, n);
            matmul(out.as_mut(), Accum::Replace, tmp.as_ref(), v, ONE, Par::Seq);
            out
        })
    }

    /// V·M·V*.
    pub fn from_eigenbasis(&self, m: &Mat<c64>) -> AlgebraElement {
        let n = self.dim();
        let v = self.vectors.as_ref();
        let mut tmp = Mat::<c64>::zeros(n, n);
        matmul(tmp.as_mut(), Accum::Replace, v, m.as_ref(), ONE, Par::Seq);
        let mut out = Mat::<c64>::zeros(n, n);
        matmul(out.as_mut(), Accum::Replace, tmp.as_ref(), v.adjoint(), ONE, Par::Seq);
        AlgebraElement::from_mat(out)
    }
}

impl Add for &AlgebraElement {
    type Output = AlgebraElement;
    fn add(self, rhs: &AlgebraElement) -> AlgebraElement {
        self.axpy(ONE, rhs)
    }
}

impl Sub for &AlgebraElement {
    type Output = AlgebraElement;
    fn sub(self, rhs: &AlgebraElement) -> AlgebraElement {
        self.axpy(cr(-1.0), rhs)
    }
}

impl Mul for &AlgebraElement {
    type Output = AlgebraElement;
    fn mul(self, rhs: &AlgebraElement) -> AlgebraElement {
        self.matmul(rhs)
    }
}

impl Mul<c64> for &AlgebraElement {
    type Output = AlgebraElement;
    fn mul(self, rhs: c64) -> AlgebraElement {
        self.scale(rhs)
    }
}

impl Neg for &AlgebraElement {
    type Output = AlgebraElement;
    fn neg(self) -> AlgebraElement {
        self.scale(cr(-1.0))
    }
}

/// Running sum that avoids reallocating on every addition.
pub struct Accumulator {
    n: usize,
    scalar: c64,
    dense: Option<Mat<c64>>,
}

impl Accumulator {
    pub fn new(n: usize) -> Self {
        Accumulator {
            n,
            scalar: ZERO,
            dense: None,
        }
    }

    pub fn add_scaled(&mut self, c: c64, x: &AlgebraElement) {
        assert_eq!(self.n, x.n);
        match &x.repr {
            Repr::Scalar(a) => self.scalar += c * a,
            Repr::Dense(m) => {
                let d = self
                    .dense
                    .get_or_insert_with(|| Mat::zeros(self.n, self.n));
                if c == ONE {
                    *d += m.as_ref();
                } else {
                    for j in 0..self.n {
                        for i in 0..self.n {
                            d[(i, j)] += c * m[(i, j)];
                        }
                    }
                }
            }
        }
    }

    pub fn add(&mut self, x: &AlgebraElement) {
        self.add_scaled(ONE, x);
    }

    /// Adds c·a·b, skipping the matmul when either factor is scalar.
    pub fn add_product(&mut self, c: c64, a: &AlgebraElement, b: &AlgebraElement) {
        match (&a.repr, &b.repr) {
            (Repr::Scalar(s), _) => self.add_scaled(c * s, b),
            (_, Repr::Scalar(s)) => self.add_scaled(c * s, a),
            (Repr::Dense(am), Repr::Dense(bm)) => {
                let d = self
                    .dense
                    .get_or_insert_with(|| Mat::zeros(self.n, self.n));
                matmul(d.as_mut(), Accum::Add, am.as_ref(), bm.as_ref(), c, Par::Seq);
            }
        }
    }

    pub fn finish(self) -> AlgebraElement {
        match self.dense {
            None => AlgebraElement::scalar(self.n, self.scalar),
            Some(mut d) => {
                if self.scalar != ZERO {
                    for i in 0..self.n {
                        d[(i, i)] += self.scalar;
                    }
                }
                AlgebraElement::from_mat(d)
            }
        }
    }
}
