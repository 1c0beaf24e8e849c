//! One-dimensional quadrature: Gauss–Legendre rules and adaptive Gauss–Kronrod.

use crate::error::{Error, Result};

/// Gauss–Legendre nodes and weights on [0, 1].
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// `m`-point rule, nodes from Newton iteration on P_m.
    pub fn new(m: usize) -> Self {
        assert!(m >= 1);
        let mut nodes = vec![0.0; m];
        let mut weights = vec![0.0; m];
        let mf = m as f64;
        for i in 0..(m + 1) / 2 {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (mf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(m, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(m, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // map [-1,1] → [0,1]
            nodes[i] = 0.5 * (1.0 - x);
            nodes[m - 1 - i] = 0.5 * (1.0 + x);
            weights[i] = 0.5 * w;
            weights[m - 1 - i] = 0.5 * w;
        }
        GaussLegendre { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let h = b - a;
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(a + h * x))
            .sum::<f64>()
            * h
    }
}

/// P_m(x) and P_m'(x) by the three-term recurrence.
fn legendre(m: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if m == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=m {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = m as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// G7/K15 on one interval: (Kronrod estimate, |K − G|).
fn gk15(a: f64, b: f64, f: &impl Fn(f64) -> f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss–Kronrod with global error control by bisection of the worst
/// interval. Fails with the achieved error estimate if `max_intervals` is hit.
pub fn adaptive_gk(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    abs_tol: f64,
    max_intervals: usize,
) -> Result<(f64, f64)> {
    let mut parts = vec![(a, b, gk15(a, b, &f))];
    loop {
        let total: f64 = parts.iter().map(|p| p.2 .0).sum();
        let err: f64 = parts.iter().map(|p| p.2 .1).sum();
        if err <= abs_tol {
            return Ok((total, err));
        }
        if parts.len() >= max_intervals {
            return Err(Error::numeric(
                "adaptive quadrature did not reach tolerance",
                err,
            ));
        }
        let (idx, _) = parts
            .iter()
            .enumerate()
            .fold((0, -1.0), |best, (i, p)| if p.2 .1 > best.1 { (i, p.2 .1) } else { best });
        let (lo, hi, _) = parts.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        parts.push((lo, mid, gk15(lo, mid, &f)));
        parts.push((mid, hi, gk15(mid, hi, &f)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let gl = GaussLegendre::new(8);
        let s: f64 = gl.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-14);
        // degree 15 is integrated exactly by 8 nodes
        let v = gl.integrate(0.0, 2.0, |x| x.powi(15));
        assert!((v - 2f64.powi(16) / 16.0).abs() < 1e-9);
    }

    #[test]
    fn adaptive_handles_smooth_and_peaked() {
        let (v, _) = adaptive_gk(|x| x.sin(), 0.0, std::f64::consts::PI, 1e-13, 200).unwrap();
        assert!((v - 2.0).abs() < 1e-13);
        let (v, _) = adaptive_gk(|x| 1.0 / (1e-4 + x * x), -1.0, 1.0, 1e-10, 500).unwrap();
        let exact = 2.0 * (1.0f64 / 1e-2).atan() / 1e-2;
        assert!((v - exact).abs() < 1e-8 * exact);
    }

    #[test]
    fn adaptive_reports_failure() {
        let r = adaptive_gk(|x| 1.0 / x.abs().sqrt().max(1e-300), -1.0, 1.0, 1e-15, 4);
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }
}
