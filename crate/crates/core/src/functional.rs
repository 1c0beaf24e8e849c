//! Functional calculus: f(X), the tensor derivatives ∂f(X), ∂²f(X), and
//! independent Fréchet-derivative oracles.

use faer::{c64, Mat};
use serde::{Deserialize, Serialize};

use crate::algebra::{cr, Accumulator, AlgebraElement, ZERO};
use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;
use crate::tensor::{Config, TensorElement2, TensorElement3};

/// Default Gauss–Legendre node count for the α-integrals.
pub const DEFAULT_NODES: usize = 32;
/// Eigenvalue gap below which divided differences fall back to f′.
pub const DIVIDED_DIFFERENCE_GAP: f64 = 1e-8;

/// A complex number written either as a bare real or as `[re, im]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coef {
    Real(f64),
    Complex([f64; 2]),
}

impl Coef {
    pub fn value(self) -> c64 {
        match self {
            Coef::Real(x) => cr(x),
            Coef::Complex([a, b]) => c64::new(a, b),
        }
    }

    fn from_c64(z: c64) -> Self {
        if z.im == 0.0 {
            Coef::Real(z.re)
        } else {
            Coef::Complex([z.re, z.im])
        }
    }
}

/// f(x) = Σ a_k x^k, or f(x) = Σ w_k e^{iξ_k x} (a finite atomic μ_f).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FunctionSpec {
    Poly { coeffs: Vec<Coef> },
    Fourier { atoms: Vec<[f64; 3]> },
}

impl FunctionSpec {
    pub fn poly(coeffs: &[f64]) -> Self {
        FunctionSpec::Poly {
            coeffs: coeffs.iter().map(|&c| Coef::Real(c)).collect(),
        }
    }

    pub fn poly_complex(coeffs: &[c64]) -> Self {
        FunctionSpec::Poly {
            coeffs: coeffs.iter().map(|&c| Coef::from_c64(c)).collect(),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::poly(&[c])
    }

    pub fn identity() -> Self {
        Self::poly(&[0.0, 1.0])
    }

    /// x^k.
    pub fn monomial(k: usize) -> Self {
        let mut c = vec![0.0; k + 1];
        c[k] = 1.0;
        Self::poly(&c)
    }

    /// Atoms (ξ, w).
    pub fn fourier(atoms: &[(f64, c64)]) -> Self {
        FunctionSpec::Fourier {
            atoms: atoms.iter().map(|(x, w)| [*x, w.re, w.im]).collect(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: FunctionSpec = serde_json::from_str(s)?;
        f.validate()?;
        Ok(f)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("function spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let finite = match self {
            FunctionSpec::Poly { coeffs } => coeffs.iter().all(|c| {
                let z = c.value();
                z.re.is_finite() && z.im.is_finite()
            }),
            FunctionSpec::Fourier { atoms } => atoms.iter().flatten().all(|x| x.is_finite()),
        };
        if finite {
            Ok(())
        } else {
            Err(Error::usage("function spec has non-finite entries"))
        }
    }

    pub fn coefficients(&self) -> Option<Vec<c64>> {
        match self {
            FunctionSpec::Poly { coeffs } => Some(coeffs.iter().map(|c| c.value()).collect()),
            _ => None,
        }
    }

    pub fn atoms(&self) -> Option<Vec<(f64, c64)>> {
        match self {
            FunctionSpec::Fourier { atoms } => Some(atoms.iter().map(|a| (a[0], c64::new(a[1], a[2]))).collect()),
            _ => None,
        }
    }

    pub fn is_polynomial(&self) -> bool {
        matches!(self, FunctionSpec::Poly { .. })
    }

    /// Polynomial degree with trailing zeros removed (−1 ↦ None for f = 0).
    pub fn degree(&self) -> Option<usize> {
        let c = self.coefficients()?;
        c.iter().rposition(|z| *z != ZERO)
    }

    /// f* with f*(X) = f(X)* for self-adjoint X.
    pub fn conjugate(&self) -> Self {
        match self {
            FunctionSpec::Poly { coeffs } => FunctionSpec::Poly {
                coeffs: coeffs.iter().map(|c| Coef::from_c64(c.value().conj())).collect(),
            },
            FunctionSpec::Fourier { atoms } => FunctionSpec::Fourier {
                atoms: atoms.iter().map(|a| [-a[0], a[1], -a[2]]).collect(),
            },
        }
    }

    /// f* = f, i.e. f is real on the real line.
    pub fn is_real(&self) -> bool {
        match self {
            FunctionSpec::Poly { coeffs } => coeffs.iter().all(|c| c.value().im == 0.0),
            FunctionSpec::Fourier { .. } => {
                let mut a = self.atoms().unwrap();
                let mut b = self.conjugate().atoms().unwrap();
                let key = |x: &(f64, c64)| (x.0, x.1.re, x.1.im);
                a.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
                b.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
                a.iter().zip(&b).all(|(x, y)| (x.0 - y.0).abs() <= 1e-15 && (x.1 - y.1).norm() <= 1e-15)
            }
        }
    }

    /// ‖f‖_k = Σ_{i≤k} Σ |w| |ξ|^i; polynomials have no such norm.
    pub fn class_norm(&self, k: usize) -> Option<f64> {
        let atoms = self.atoms()?;
        Some(
            (0..=k)
                .map(|i| atoms.iter().map(|(x, w)| w.norm() * x.abs().powi(i as i32)).sum::<f64>())
                .sum(),
        )
    }

    /// Scalar evaluation.
    pub fn eval(&self, x: f64) -> c64 {
        match self {
            FunctionSpec::Poly { .. } => {
                let c = self.coefficients().unwrap();
                c.iter().rev().fold(ZERO, |acc, a| acc * x + a)
            }
            FunctionSpec::Fourier { .. } => self
                .atoms()
                .unwrap()
                .iter()
                .map(|(xi, w)| w * c64::cis(xi * x))
                .sum(),
        }
    }

    /// Scalar derivative f′(x).
    pub fn eval_derivative(&self, x: f64) -> c64 {
        match self {
            FunctionSpec::Poly { .. } => {
                let c = self.coefficients().unwrap();
                c.iter()
                    .enumerate()
                    .skip(1)
                    .rev()
                    .fold(ZERO, |acc, (k, a)| acc * x + a * k as f64)
            }
            FunctionSpec::Fourier { .. } => self
                .atoms()
                .unwrap()
                .iter()
                .map(|(xi, w)| w * c64::new(0.0, *xi) * c64::cis(xi * x))
                .sum(),
        }
    }
}

/// Powers 1, X, …, X^d; X^0 is the symbolic identity so it stays cheap.
fn powers(x: &AlgebraElement, d: usize) -> Vec<AlgebraElement> {
    let mut p = vec![AlgebraElement::identity(x.dim())];
    for k in 1..=d {
        let next = if k == 1 { x.clone() } else { p[k - 1].matmul(x) };
        p.push(next);
    }
    p
}

/// Σ_j c_j X^j from precomputed powers.
fn combine(n: usize, coeffs: &[c64], pw: &[AlgebraElement]) -> AlgebraElement {
    let mut acc = Accumulator::new(n);
    for (c, p) in coeffs.iter().zip(pw) {
        if *c != ZERO {
            acc.add_scaled(*c, p);
        }
    }
    acc.finish()
}

fn require_self_adjoint(x: &AlgebraElement, what: &str) -> Result<()> {
    if x.is_self_adjoint() {
        Ok(())
    } else {
        Err(Error::usage(format!("{what} requires a self-adjoint argument")))
    }
}

/// f(X): Horner for polynomials, spectral calculus for atoms.
pub fn apply_function(f: &FunctionSpec, x: &AlgebraElement) -> Result<AlgebraElement> {
    match f {
        FunctionSpec::Poly { .. } => {
            let c = f.coefficients().unwrap();
            let n = x.dim();
            let mut acc = AlgebraElement::zeros(n);
            for a in c.iter().rev() {
                acc = acc.matmul(x).axpy(*a, &AlgebraElement::identity(n));
            }
            Ok(acc)
        }
        FunctionSpec::Fourier { .. } => {
            require_self_adjoint(x, "Fourier-class function")?;
            let s = x.eigh()?;
            Ok(s.apply(|l| f.eval(l)))
        }
    }
}

/// ∂f(X) as a Config2 tensor.
pub fn tensor_derivative(f: &FunctionSpec, x: &AlgebraElement) -> Result<TensorElement2> {
    tensor_derivative_with(f, x, DEFAULT_NODES)
}

/// ∂f(X) with `nodes` Gauss–Legendre points in α for Fourier kinds.
///
/// Polynomials: ∂P(X) = Σ_i X^i ⊗ P_i(X) with P_i(x) = Σ_j a_{i+j+1} x^j, the
/// defining double sum regrouped by the left power.
pub fn tensor_derivative_with(f: &FunctionSpec, x: &AlgebraElement, nodes: usize) -> Result<TensorElement2> {
    let n = x.dim();
    let mut out = TensorElement2::zero(n, Config::Config2);
    match f {
        FunctionSpec::Poly { .. } => {
            let c = f.coefficients().unwrap();
            let Some(d) = f.degree() else { return Ok(out) };
            if d == 0 {
                return Ok(out);
            }
            let pw = powers(x, d - 1);
            for i in 0..d {
                let tail: Vec<c64> = (0..d - i).map(|j| c[i + j + 1]).collect();
                let right = combine(n, &tail, &pw);
                if !right.is_zero_symbolic() {
                    out.push(pw[i].clone(), right);
                }
            }
        }
        FunctionSpec::Fourier { .. } => {
            require_self_adjoint(x, "Fourier-class tensor derivative")?;
            let s = x.eigh()?;
            let gl = GaussLegendre::new(nodes);
            for (xi, w) in f.atoms().unwrap() {
                if xi == 0.0 || w == ZERO {
                    continue;
                }
                for (a, wa) in gl.nodes.iter().zip(&gl.weights) {
                    let c = c64::new(0.0, xi) * w * *wa;
                    let l = s.apply(|lam| c * c64::cis(a * xi * lam));
                    let r = s.apply(|lam| c64::cis((1.0 - a) * xi * lam));
                    out.push(l, r);
                }
            }
        }
    }
    Ok(out)
}

/// ∂²f(X) as a Config2 rank-3 tensor.
pub fn second_tensor_derivative(f: &FunctionSpec, x: &AlgebraElement) -> Result<TensorElement3> {
    second_tensor_derivative_with(f, x, DEFAULT_NODES / 2)
}

/// Polynomials: Σ_{i,j} X^i ⊗ X^j ⊗ Q_{ij}(X), Q_{ij}(x) = Σ_l a_{i+j+l+2} x^l.
/// Atoms: the simplex integral rewritten as
/// ∫₀¹dα α ∫₀¹dβ e^{i(1−α)ξX} ⊗ e^{iαβξX} ⊗ e^{iα(1−β)ξX}, on a product rule.
pub fn second_tensor_derivative_with(f: &FunctionSpec, x: &AlgebraElement, nodes: usize) -> Result<TensorElement3> {
    let n = x.dim();
    let mut terms = Vec::new();
    match f {
        FunctionSpec::Poly { .. } => {
            let c = f.coefficients().unwrap();
            if let Some(d) = f.degree().filter(|&d| d >= 2) {
                let pw = powers(x, d - 2);
                for i in 0..=d - 2 {
                    for j in 0..=d - 2 - i {
                        let tail: Vec<c64> = (0..=d - 2 - i - j).map(|l| c[i + j + l + 2]).collect();
                        let right = combine(n, &tail, &pw);
                        if !right.is_zero_symbolic() {
                            terms.push((pw[i].clone(), pw[j].clone(), right));
                        }
                    }
                }
            }
        }
        FunctionSpec::Fourier { .. } => {
            require_self_adjoint(x, "Fourier-class tensor derivative")?;
            let s = x.eigh()?;
            let gl = GaussLegendre::new(nodes);
            for (xi, w) in f.atoms().unwrap() {
                if xi == 0.0 || w == ZERO {
                    continue;
                }
                for (a, wa) in gl.nodes.iter().zip(&gl.weights) {
                    let first = s.apply(|lam| cr(-xi * xi) * w * (wa * a) * c64::cis((1.0 - a) * xi * lam));
                    for (b, wb) in gl.nodes.iter().zip(&gl.weights) {
                        let mid = s.apply(|lam| c64::cis(a * b * xi * lam) * *wb);
                        let last = s.apply(|lam| c64::cis(a * (1.0 - b) * xi * lam));
                        terms.push((first.clone(), mid, last));
                    }
                }
            }
        }
    }
    TensorElement3::from_terms(n, Config::Config2, terms)
}

/// ∂f(X) − ∂f(Y) written node by node as (a−a′)⊗b + a′⊗(b−b′), the
/// representation in which `proj_ub` is Lipschitz in X − Y.
pub fn tensor_derivative_difference(
    f: &FunctionSpec,
    x: &AlgebraElement,
    y: &AlgebraElement,
    nodes: usize,
) -> Result<TensorElement2> {
    let atoms = f
        .atoms()
        .ok_or_else(|| Error::usage("derivative difference is defined for Fourier-class functions"))?;
    require_self_adjoint(x, "derivative difference")?;
    require_self_adjoint(y, "derivative difference")?;
    let (sx, sy) = (x.eigh()?, y.eigh()?);
    let gl = GaussLegendre::new(nodes);
    let mut out = TensorElement2::zero(x.dim(), Config::Config2);
    for (xi, w) in atoms {
        for (a, wa) in gl.nodes.iter().zip(&gl.weights) {
            let c = c64::new(0.0, xi) * w * *wa;
            let ax = sx.apply(|l| c64::cis(a * xi * l));
            let ay = sy.apply(|l| c64::cis(a * xi * l));
            let bx = sx.apply(|l| c64::cis((1.0 - a) * xi * l));
            let by = sy.apply(|l| c64::cis((1.0 - a) * xi * l));
            out.push((&ax - &ay).scale(c), bx.clone());
            out.push(ay.scale(c), &bx - &by);
        }
    }
    Ok(out)
}

/// df(X)(Y) by the Daleckii–Krein formula: V (f[λ_i, λ_j] ∘ V*YV) V*.
/// Independent of the tensor representation; used as its oracle.
pub fn frechet_sharp(f: &FunctionSpec, x: &AlgebraElement, y: &AlgebraElement) -> Result<AlgebraElement> {
    require_self_adjoint(x, "Fréchet derivative")?;
    let s = x.eigh()?;
    let lam = &s.values;
    let n = lam.len();
    let fl: Vec<c64> = lam.iter().map(|&l| f.eval(l)).collect();
    let m = s.to_eigenbasis(y);
    let dd = Mat::from_fn(n, n, |i, j| {
        let (a, b) = (lam[i], lam[j]);
        let q = if (a - b).abs() < DIVIDED_DIFFERENCE_GAP {
            f.eval_derivative(0.5 * (a + b))
        } else {
            (fl[i] - fl[j]) / (a - b)
        };
        q * m[(i, j)]
    });
    Ok(s.from_eigenbasis(&dd))
}

/// Y₁♯∂²f(X)♯Y₂ + Y₂♯∂²f(X)♯Y₁.
pub fn second_differential(d2: &TensorElement3, y1: &AlgebraElement, y2: &AlgebraElement) -> AlgebraElement {
    &d2.double_sharp(y1, y2) + &d2.double_sharp(y2, y1)
}

/// ∫₀¹ e^{αX}(X−Y)e^{(1−α)Y} dα by Gauss–Legendre; equals e^X − e^Y.
pub fn duhamel_diff(x: &AlgebraElement, y: &AlgebraElement, nodes: usize) -> AlgebraElement {
    let n = x.dim();
    let d = x - y;
    let gl = GaussLegendre::new(nodes);
    let mut acc = Accumulator::new(n);
    for (a, w) in gl.nodes.iter().zip(&gl.weights) {
        let l = x.expm(cr(*a)).matmul(&d);
        let r = y.expm(cr(1.0 - a));
        acc.add_product(cr(*w), &l, &r);
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::Space;
    use crate::matrix_model::{sample_gue_increment, substream};
    use crate::tensor::Side2;

    fn herm(n: usize, seed: u64) -> AlgebraElement {
        let mut rng = substream(seed, 7, 0);
        sample_gue_increment(Space::new(n).unwrap(), 1.0, &mut rng)
    }

    #[test]
    fn json_roundtrip_and_forms() {
        let f = FunctionSpec::from_json(r#"{"kind":"poly","coeffs":[1, [0, 2]]}"#).unwrap();
        assert_eq!(f.coefficients().unwrap(), vec![cr(1.0), c64::new(0.0, 2.0)]);
        assert_eq!(FunctionSpec::from_json(&f.to_json()).unwrap(), f);
        let g = FunctionSpec::from_json(r#"{"kind":"fourier","atoms":[[1.5, 0.5, 0.0]]}"#).unwrap();
        assert_eq!(g.atoms().unwrap(), vec![(1.5, cr(0.5))]);
        assert!(FunctionSpec::from_json(r#"{"kind":"spline"}"#).is_err());
    }

    #[test]
    fn apply_examples() {
        let x = AlgebraElement::diag(&[cr(1.0), cr(2.0)]);
        let sq = apply_function(&FunctionSpec::monomial(2), &x).unwrap();
        assert!(sq.max_abs_diff(&AlgebraElement::diag(&[cr(1.0), cr(4.0)])) < 1e-15);
        assert!(apply_function(&FunctionSpec::identity(), &x).unwrap().max_abs_diff(&x) < 1e-15);
        let h = herm(8, 1);
        let u = apply_function(&FunctionSpec::fourier(&[(1.3, cr(1.0))]), &h).unwrap();
        assert!((u.op_norm() - 1.0).abs() < 1e-12);
        let nonsa = AlgebraElement::from_fn(2, |i, j| if i < j { ONE_C } else { ZERO });
        assert!(apply_function(&FunctionSpec::fourier(&[(1.0, cr(1.0))]), &nonsa).is_err());
    }

    const ONE_C: c64 = c64 { re: 1.0, im: 0.0 };

    #[test]
    fn taylor_polynomial_matches_atom() {
        let xi = 0.7;
        let h = herm(6, 2);
        let h = h.scale_re(2.0 / (xi * h.op_norm()));
        let mut c = Vec::new();
        let mut fact = 1.0;
        for k in 0..=12 {
            if k > 0 {
                fact *= k as f64;
            }
            c.push(c64::new(0.0, xi).powi(k) / fact);
        }
        let p = apply_function(&FunctionSpec::poly_complex(&c), &h).unwrap();
        let a = apply_function(&FunctionSpec::fourier(&[(xi, cr(1.0))]), &h).unwrap();
        assert!(p.max_abs_diff(&a) < 1e-6);
    }

    #[test]
    fn polynomial_derivatives() {
        let x = herm(4, 3);
        let d = tensor_derivative(&FunctionSpec::monomial(2), &x).unwrap();
        let y = herm(4, 4);
        let expect = &x.matmul(&y) + &y.matmul(&x);
        assert!(d.sharp(&y).max_abs_diff(&expect) < 1e-12);
        assert!(tensor_derivative(&FunctionSpec::constant(3.0), &x).unwrap().is_empty());
        let d2 = second_tensor_derivative(&FunctionSpec::monomial(2), &x).unwrap();
        assert_eq!(d2.len(), 1);
        let one = AlgebraElement::identity(4);
        assert!(d2.double_sharp(&y, &one).max_abs_diff(&y) < 1e-15);
        let d3 = second_tensor_derivative(&FunctionSpec::monomial(3), &x).unwrap();
        assert_eq!(d3.len(), 3);
        assert!(d3.partial_trace_mid().max_abs_diff(&(&x.scale_re(2.0) + &AlgebraElement::identity(4).scale(x.trace()))) < 1e-12);
    }

    #[test]
    fn derivative_matches_daleckii_krein() {
        let x = herm(6, 5);
        let y = herm(6, 6);
        for f in [
            FunctionSpec::poly(&[0.5, -1.0, 0.3, 0.2]),
            FunctionSpec::fourier(&[(1.2, c64::new(0.4, 0.1)), (-0.6, cr(0.7))]),
        ] {
            let a = tensor_derivative(&f, &x).unwrap().sharp(&y);
            let b = frechet_sharp(&f, &x, &y).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-10, "{f:?}");
        }
        let id = frechet_sharp(&FunctionSpec::identity(), &x, &y).unwrap();
        assert!(id.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let x = herm(6, 7);
        let y = herm(6, 8);
        let f = FunctionSpec::fourier(&[(1.5, cr(1.0))]);
        let eps = 1e-5;
        let fp = apply_function(&f, &x.axpy(cr(eps), &y)).unwrap();
        let fm = apply_function(&f, &x.axpy(cr(-eps), &y)).unwrap();
        let fd = (&fp - &fm).scale_re(0.5 / eps);
        let d = tensor_derivative(&f, &x).unwrap().sharp(&y);
        assert!(fd.max_abs_diff(&d) < 1e-6);
    }

    #[test]
    fn quadrature_is_converged_at_default_nodes() {
        let x = herm(6, 9);
        let x = x.scale_re(3.0 / x.op_norm());
        let y = herm(6, 10);
        let f = FunctionSpec::fourier(&[(4.0, cr(1.0))]);
        let a = tensor_derivative_with(&f, &x, DEFAULT_NODES).unwrap().sharp(&y);
        let b = tensor_derivative_with(&f, &x, 2 * DEFAULT_NODES).unwrap().sharp(&y);
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn second_derivative_matches_finite_difference() {
        let x = herm(5, 11);
        let (y1, y2) = (herm(5, 12), herm(5, 13));
        for f in [FunctionSpec::poly(&[0.0, 0.0, 1.0, 0.5]), FunctionSpec::fourier(&[(1.1, cr(0.8))])] {
            let d2 = second_tensor_derivative(&f, &x).unwrap();
            let sym = second_differential(&d2, &y1, &y2);
            assert!(sym.max_abs_diff(&second_differential(&d2, &y2, &y1)) < 1e-12);
            let e = 1e-3;
            let at = |a: f64, b: f64| apply_function(&f, &x.axpy(cr(a), &y1).axpy(cr(b), &y2)).unwrap();
            let fd = (&(&at(e, e) - &at(e, -e)) - &(&at(-e, e) - &at(-e, -e))).scale_re(0.25 / (e * e));
            assert!(fd.max_abs_diff(&sym) < 1e-4, "{f:?}");
        }
    }

    #[test]
    fn lipschitz_in_representation() {
        let f = FunctionSpec::fourier(&[(1.0, cr(0.5)), (-2.0, cr(0.25))]);
        let norm2 = f.class_norm(2).unwrap();
        for s in 0..4 {
            let x = herm(6, 20 + s);
            let y = x.axpy(cr(0.1), &herm(6, 30 + s));
            let diff = tensor_derivative_difference(&f, &x, &y, 16).unwrap();
            let z = herm(6, 40 + s);
            let direct = &tensor_derivative_with(&f, &x, 16).unwrap().sharp(&z)
                - &tensor_derivative_with(&f, &y, 16).unwrap().sharp(&z);
            assert!(diff.sharp(&z).max_abs_diff(&direct) < 1e-12);
            assert!(diff.proj_ub() <= 1.2 * norm2 * (&x - &y).op_norm());
        }
    }

    #[test]
    fn conjugate_function() {
        let x = herm(5, 14);
        for f in [
            FunctionSpec::poly_complex(&[c64::new(1.0, 2.0), c64::new(0.0, -1.0)]),
            FunctionSpec::fourier(&[(0.8, c64::new(0.3, 0.4))]),
        ] {
            let a = apply_function(&f.conjugate(), &x).unwrap();
            let b = apply_function(&f, &x).unwrap().adjoint();
            assert!(a.max_abs_diff(&b) < 1e-12);
            assert!(!f.is_real());
        }
        assert!(FunctionSpec::fourier(&[(1.0, cr(0.5)), (-1.0, cr(0.5))]).is_real());
        assert!(FunctionSpec::monomial(3).is_real());
    }

    #[test]
    fn duhamel_examples() {
        let x = herm(4, 15);
        assert!(duhamel_diff(&x, &x, 8).max_abs() < 1e-15);
        let nil = AlgebraElement::from_fn(2, |i, j| if i == 0 && j == 1 { ONE_C } else { ZERO });
        assert!(duhamel_diff(&nil, &AlgebraElement::zeros(2), 8).max_abs_diff(&nil) < 1e-14);
        let y = herm(4, 16);
        let d = duhamel_diff(&x, &y, 32);
        let direct = &x.eigh().unwrap().apply(|l| cr(l.exp())) - &y.eigh().unwrap().apply(|l| cr(l.exp()));
        assert!(d.max_abs_diff(&direct) < 1e-10);
    }

    #[test]
    fn partial_trace_of_derivative_is_bounded() {
        let x = herm(4, 17);
        let d = tensor_derivative(&FunctionSpec::monomial(3), &x).unwrap().with_config(Config::Config1);
        let p = d.partial_trace(Side2::Left);
        assert!(p.op_norm() <= d.spatial_norm().unwrap() * (1.0 + 1e-12));
    }
}
