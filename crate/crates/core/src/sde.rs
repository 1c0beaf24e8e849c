//! Controlled processes, integrand lifts and rough SDE solvers.

use serde::{Deserialize, Serialize};

use crate::algebra::{cr, Accumulator, AlgebraElement, ONE};
use crate::error::{Error, Result};
use crate::functional::{apply_function, tensor_derivative, FunctionSpec};
use crate::matrix_model::{holder_norm, GridPath};
use crate::rough::{germ, holder2_norm, BiprocessValue, LevyArea, TwoParamGrid};
use crate::tensor::{Config, TensorElement2, TensorElement3};

/// Tolerance used when compressing lifted tensors.
pub const LIFT_COMPRESS_TOL: f64 = 1e-10;
/// Term count above which lifted tensors are compressed.
const COMPRESS_ABOVE: usize = 4;

/// Y with its Gubinelli derivative 𝐘^X on a coarse partition of fine indices.
#[derive(Clone, Debug)]
pub struct ControlledProcess {
    pub indices: Vec<usize>,
    pub path: GridPath,
    pub yx: Vec<TensorElement2>,
    /// Last Picard gap, when solved by Picard iteration.
    pub picard_gap: Option<f64>,
    pub picard_history: Vec<f64>,
}

impl ControlledProcess {
    pub fn new(indices: Vec<usize>, path: GridPath, yx: Vec<TensorElement2>) -> Result<Self> {
        if indices.len() != path.len() || yx.len() != path.len() {
            return Err(Error::usage("controlled process needs one derivative per grid point"));
        }
        Ok(ControlledProcess {
            indices,
            path,
            yx,
            picard_gap: None,
            picard_history: Vec::new(),
        })
    }

    /// The driving path itself: Y = X, 𝐘^X = 1⊗1.
    pub fn driving(area: &LevyArea, indices: &[usize]) -> Result<Self> {
        let times = indices.iter().map(|&i| area.time(i)).collect();
        let values = indices.iter().map(|&i| area.value(i)).collect();
        let n = area.dim();
        Self::new(
            indices.to_vec(),
            GridPath::new(times, values)?,
            vec![TensorElement2::unit(n, Config::Config2); indices.len()],
        )
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.path.dim()
    }

    /// Y^♭_{ij} = (δY)_{ij} − 𝐘^X_i♯(δX)_{ij}.
    pub fn residual(&self, area: &LevyArea, i: usize, j: usize) -> AlgebraElement {
        let dx = area.increment(self.indices[i], self.indices[j]);
        &self.path.increment(i, j) - &self.yx[i].sharp(&dx)
    }

    /// max_k max(‖Y_k − Y_k*‖, ‖(𝐘^X_k − 𝐘^X_k*)♯Z‖ over unit probes Z).
    pub fn self_adjoint_defect(&self) -> f64 {
        let n = self.dim();
        let probes = [
            AlgebraElement::identity(n),
            AlgebraElement::from_fn(n, |i, j| cr(((i + 2 * j) % 5) as f64 - 2.0)),
        ];
        let mut worst = 0.0f64;
        for (y, t) in self.path.values().iter().zip(&self.yx) {
            worst = worst.max((y - &y.adjoint()).op_norm());
            let d = t.sub(&t.adjoint()).expect("same configuration");
            for z in &probes {
                worst = worst.max(d.sharp(z).op_norm() / z.op_norm());
            }
        }
        worst
    }
}

/// How g is built from f for self-adjoint solutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMode {
    /// g = (f_m*, …, f_1*).
    ReverseStar,
    /// g = (f_1*, …, f_m*).
    SameStar,
}

pub fn paired_g(f: &[FunctionSpec], mode: PairingMode) -> Vec<FunctionSpec> {
    let mut g: Vec<FunctionSpec> = f.iter().map(|h| h.conjugate()).collect();
    if mode == PairingMode::ReverseStar {
        g.reverse();
    }
    g
}

/// Σ f_i(Y) Z g_i(Y) is self-adjoint for self-adjoint Y, Z: the pairs
/// (g_i*, f_i*) are a permutation of the pairs (f_i, g_i).
pub fn adjoint_pairing_holds(f: &[FunctionSpec], g: &[FunctionSpec]) -> bool {
    if f.len() != g.len() {
        return false;
    }
    let mut pool: Vec<(FunctionSpec, FunctionSpec)> = f.iter().cloned().zip(g.iter().cloned()).collect();
    for (a, b) in f.iter().zip(g) {
        let want = (b.conjugate(), a.conjugate());
        match pool.iter().position(|p| *p == want) {
            Some(k) => {
                pool.swap_remove(k);
            }
            None => return false,
        }
    }
    true
}

/// Σ f_i(Y) ⊗ g_i(Y).
pub fn coefficient_tensor(fy: &[AlgebraElement], gy: &[AlgebraElement]) -> TensorElement2 {
    let n = fy[0].dim();
    let mut t = TensorElement2::zero(n, Config::Config2);
    for (a, b) in fy.iter().zip(gy) {
        t.push(a.clone(), b.clone());
    }
    t
}

fn compress_if_large(t: TensorElement2) -> TensorElement2 {
    if t.len() > COMPRESS_ABOVE {
        t.compress(LIFT_COMPRESS_TOL)
    } else {
        t
    }
}

/// U = Σ f_i(Y)⊗g_i(Y), 𝕌¹ = Σ [∂f_i(Y)·𝐘^X]⊗g_i(Y), 𝕌² = Σ f_i(Y)⊗[∂g_i(Y)·𝐘^X]
/// at a single time.
pub fn lift_value(f: &[FunctionSpec], g: &[FunctionSpec], y: &AlgebraElement, yx: &TensorElement2) -> Result<BiprocessValue> {
    if f.len() != g.len() || f.is_empty() {
        return Err(Error::usage("f and g lists must have the same nonzero length"));
    }
    let n = y.dim();
    let fy: Vec<AlgebraElement> = f.iter().map(|h| apply_function(h, y)).collect::<Result<_>>()?;
    let gy: Vec<AlgebraElement> = g.iter().map(|h| apply_function(h, y)).collect::<Result<_>>()?;
    let mut u1 = TensorElement3::zero(n, Config::Config2);
    let mut u2 = TensorElement3::zero(n, Config::Config2);
    for i in 0..f.len() {
        let df = tensor_derivative(&f[i], y)?;
        if !df.is_empty() {
            let p = compress_if_large(df.mul(yx)?);
            u1 = u1.add(&p.tensor_right(&gy[i]))?;
        }
        let dg = tensor_derivative(&g[i], y)?;
        if !dg.is_empty() {
            let p = compress_if_large(dg.mul(yx)?);
            u2 = u2.add(&p.tensor_left(&fy[i]))?;
        }
    }
    Ok(BiprocessValue {
        u: coefficient_tensor(&fy, &gy),
        u1,
        u2,
    })
}

/// The controlled biprocess f(Y)⊗g(Y) at every point of Y's partition.
pub fn lift_integrand(
    f: &[FunctionSpec],
    g: &[FunctionSpec],
    y: &ControlledProcess,
) -> Result<crate::rough::ControlledBiprocess> {
    let values = y
        .path
        .values()
        .iter()
        .zip(&y.yx)
        .map(|(v, t)| lift_value(f, g, v, t))
        .collect::<Result<Vec<_>>>()?;
    crate::rough::ControlledBiprocess::new(y.indices.clone(), values)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    OneStep,
    /// At most this many Picard iterations; stops once the gap is below `PICARD_TOL`.
    Picard(usize),
}

/// Picard iteration stops once successive iterates differ by less than this.
pub const PICARD_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct SdeProblem {
    pub initial: AlgebraElement,
    pub f: Vec<FunctionSpec>,
    pub g: Vec<FunctionSpec>,
    /// Require and check a self-adjoint solution.
    pub self_adjoint: bool,
}

impl SdeProblem {
    pub fn new(initial: AlgebraElement, f: Vec<FunctionSpec>, g: Vec<FunctionSpec>) -> Self {
        SdeProblem {
            initial,
            f,
            g,
            self_adjoint: false,
        }
    }

    pub fn self_adjoint(mut self) -> Self {
        self.self_adjoint = true;
        self
    }

    fn validate(&self, area: &LevyArea) -> Result<()> {
        if self.f.len() != self.g.len() || self.f.is_empty() {
            return Err(Error::usage("f and g lists must have the same nonzero length"));
        }
        if self.initial.dim() != area.dim() {
            return Err(Error::usage("initial condition and path live in different spaces"));
        }
        if self.self_adjoint {
            if !self.initial.is_self_adjoint() {
                return Err(Error::usage("self-adjoint solution requested for a non-self-adjoint initial value"));
            }
            if !adjoint_pairing_holds(&self.f, &self.g) {
                return Err(Error::usage("g is not an adjoint pairing of f"));
            }
        }
        Ok(())
    }
}

fn check_partition(area: &LevyArea, coarse: &[usize]) -> Result<()> {
    if coarse.len() < 2 || coarse.windows(2).any(|w| w[1] <= w[0]) || *coarse.last().unwrap() >= area.points() {
        return Err(Error::usage("coarse partition must be increasing fine indices"));
    }
    Ok(())
}

fn coefficient_at(p: &SdeProblem, y: &AlgebraElement) -> Result<TensorElement2> {
    let fy: Vec<_> = p.f.iter().map(|h| apply_function(h, y)).collect::<Result<_>>()?;
    let gy: Vec<_> = p.g.iter().map(|h| apply_function(h, y)).collect::<Result<_>>()?;
    Ok(coefficient_tensor(&fy, &gy))
}

/// dY = Σ f_i(Y)·dX·g_i(Y), Y_0 = A, on a coarse partition of the area's grid.
pub fn solve_rough_sde(p: &SdeProblem, area: &LevyArea, coarse: &[usize], scheme: Scheme) -> Result<ControlledProcess> {
    p.validate(area)?;
    check_partition(area, coarse)?;
    match scheme {
        Scheme::OneStep => one_step(p, area, coarse),
        Scheme::Picard(k) => picard(p, area, coarse, k),
    }
}

fn one_step(p: &SdeProblem, area: &LevyArea, coarse: &[usize]) -> Result<ControlledProcess> {
    let mut y = p.initial.clone();
    let mut ys = Vec::with_capacity(coarse.len());
    let mut yxs = Vec::with_capacity(coarse.len());
    for (k, &i) in coarse.iter().enumerate() {
        let yx = coefficient_at(p, &y)?;
        ys.push(y.clone());
        yxs.push(yx.clone());
        if k + 1 < coarse.len() {
            let v = lift_value(&p.f, &p.g, &y, &yx)?;
            y = &y + &germ(area, &v, i, coarse[k + 1])?;
            if !y.is_finite() {
                return Err(Error::numeric(format!("solution blew up before t = {}", area.time(coarse[k + 1])), f64::INFINITY));
            }
        }
    }
    let times = coarse.iter().map(|&i| area.time(i)).collect();
    ControlledProcess::new(coarse.to_vec(), GridPath::new(times, ys)?, yxs)
}

/// Picard iteration runs on successive windows of at most this length; the
/// fixed-point map contracts only on short intervals.
pub const PICARD_WINDOW: f64 = 1.0 / 16.0;

/// Windows of coarse positions [a, b], each spanning at most `PICARD_WINDOW`
/// in time and at least one cell.
fn picard_windows(area: &LevyArea, coarse: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut a = 0;
    while a + 1 < coarse.len() {
        let t0 = area.time(coarse[a]);
        let mut b = a + 1;
        while b + 1 < coarse.len() && area.time(coarse[b + 1]) - t0 <= PICARD_WINDOW * (1.0 + 1e-12) {
            b += 1;
        }
        out.push((a, b));
        a = b;
    }
    out
}

fn picard(p: &SdeProblem, area: &LevyArea, coarse: &[usize], max_iter: usize) -> Result<ControlledProcess> {
    let mut ys = vec![p.initial.clone()];
    let mut history = Vec::new();
    let mut worst = 0.0f64;
    for (a, b) in picard_windows(area, coarse) {
        let start = ys.last().unwrap().clone();
        let (window, h) = picard_window(p, &start, area, &coarse[a..=b], max_iter)?;
        worst = worst.max(*h.last().unwrap());
        history.extend(h);
        ys.extend(window.into_iter().skip(1));
    }
    // 𝐘^X is taken at the final iterate, as in the one-step output.
    let yxs = ys.iter().map(|y| coefficient_at(p, y)).collect::<Result<Vec<_>>>()?;
    let times = coarse.iter().map(|&i| area.time(i)).collect();
    let mut out = ControlledProcess::new(coarse.to_vec(), GridPath::new(times, ys)?, yxs)?;
    out.picard_gap = Some(worst);
    out.picard_history = history;
    Ok(out)
}

/// Γ(Y)_t = Y_a + J_{at}(f(Y)⊗g(Y) ♯ dX), 𝐘^X = f(Y)⊗g(Y), iterated from
/// Y ≡ Y_a on one window. Returns the iterate and the gap history.
fn picard_window(
    p: &SdeProblem,
    initial: &AlgebraElement,
    area: &LevyArea,
    coarse: &[usize],
    max_iter: usize,
) -> Result<(Vec<AlgebraElement>, Vec<f64>)> {
    let m = coarse.len();
    let mut ys = vec![initial.clone(); m];
    let mut yxs: Vec<TensorElement2> = vec![coefficient_at(p, initial)?; m];
    let mut history = Vec::new();
    for _ in 0..max_iter {
        // Integrand known only on the coarse partition: the corrected sum over
        // coarse cells is the integral.
        let cells = (0..m - 1)
            .map(|k| {
                let v = lift_value(&p.f, &p.g, &ys[k], &yxs[k])?;
                germ(area, &v, coarse[k], coarse[k + 1])
            })
            .collect::<Result<Vec<_>>>()?;
        let mut next = Vec::with_capacity(m);
        let mut acc = initial.clone();
        next.push(acc.clone());
        for c in &cells {
            acc = &acc + c;
            next.push(acc.clone());
        }
        let next_yx = ys.iter().map(|y| coefficient_at(p, y)).collect::<Result<Vec<_>>>()?;
        let gap = next
            .iter()
            .zip(&ys)
            .map(|(a, b)| (a - b).op_norm())
            .fold(0.0, |g: f64, d| if d.is_nan() || g.is_nan() { f64::NAN } else { g.max(d) });
        history.push(gap);
        let finite = next.iter().all(|y| y.is_finite());
        ys = next;
        yxs = next_yx;
        if !gap.is_finite() || !finite {
            return Err(Error::Divergence { history });
        }
        let h = history.len();
        if h >= 4 && history[h - 4] < history[h - 3] && history[h - 3] < history[h - 2] && history[h - 2] < history[h - 1] {
            return Err(Error::Divergence { history });
        }
        if gap < PICARD_TOL {
            return Ok((ys, history));
        }
    }
    Err(Error::Divergence { history })
}

/// dY = φ(f(Y)) dX with the second-order correction
/// c_k·(φ×Id)[((Σ b_i a_i)⊗1)·𝐓_k], 𝐓_k the Config1 tensor area of the step
/// and ∂f(Y_k) = Σ a_i⊗b_i, c_k = Re φ(f(Y_k)).
pub fn solve_trace_sde(initial: &AlgebraElement, f: &FunctionSpec, area: &LevyArea, coarse: &[usize]) -> Result<GridPath> {
    if !initial.is_self_adjoint() {
        return Err(Error::usage("trace equation needs a self-adjoint initial value"));
    }
    if !f.is_real() {
        return Err(Error::usage("trace equation needs f with a symmetric spectral measure"));
    }
    check_partition(area, coarse)?;
    let mut y = initial.clone();
    let mut ys = vec![y.clone()];
    for w in coarse.windows(2) {
        let c = apply_function(f, &y)?.trace().re;
        let d = tensor_derivative(f, &y)?;
        let mut swapped = Accumulator::new(y.dim());
        for (a, b) in d.terms() {
            swapped.add_product(ONE, b, a);
        }
        let dd = swapped.finish();
        let correction = trace_correction(area, &dd, w[0], w[1]);
        y = &(&y + &area.increment(w[0], w[1]).scale_re(c)) + &correction.scale_re(c);
        ys.push(y.clone());
    }
    GridPath::new(coarse.iter().map(|&i| area.time(i)).collect(), ys)
}

/// Σ_j φ(D·(X_j − X_s))·(δX)_j = (φ×Id)[(D⊗1)·𝐓_{st}] evaluated by trace
/// cyclicity without forming the tensor area.
pub fn trace_correction(area: &LevyArea, d: &AlgebraElement, s: usize, t: usize) -> AlgebraElement {
    let mut acc = Accumulator::new(area.dim());
    let xs = area.value(s);
    for j in s + 1..t {
        let z = &area.value(j) - &xs;
        acc.add_scaled(d.trace_of_product(&z), &area.increment(j, j + 1));
    }
    acc.finish()
}

/// Fine-grid Euler reference for dY = φ(f(Y)) dX.
pub fn trace_sde_euler(initial: &AlgebraElement, f: &FunctionSpec, path: &GridPath) -> Result<GridPath> {
    let mut y = initial.clone();
    let mut ys = vec![y.clone()];
    for k in 0..path.steps() {
        let c = apply_function(f, &y)?.trace().re;
        y = &y + &path.increment(k, k + 1).scale_re(c);
        ys.push(y.clone());
    }
    GridPath::new(path.times().to_vec(), ys)
}

/// Classical RK4 for Y′ = Σ f_i(Y) X′(u) g_i(Y) with a given derivative X′.
pub fn classical_rk4(
    initial: &AlgebraElement,
    f: &[FunctionSpec],
    g: &[FunctionSpec],
    xdot: impl Fn(f64) -> AlgebraElement,
    horizon: f64,
    steps: usize,
) -> Result<Vec<AlgebraElement>> {
    let rhs = |y: &AlgebraElement, v: &AlgebraElement| -> Result<AlgebraElement> {
        let mut acc = Accumulator::new(y.dim());
        for (a, b) in f.iter().zip(g) {
            let fy = apply_function(a, y)?;
            let gy = apply_function(b, y)?;
            acc.add_product(ONE, &fy.matmul(v), &gy);
        }
        Ok(acc.finish())
    };
    let h = horizon / steps as f64;
    let mut y = initial.clone();
    let mut out = vec![y.clone()];
    for k in 0..steps {
        let t = k as f64 * h;
        let (v0, v1, v2) = (xdot(t), xdot(t + 0.5 * h), xdot(t + h));
        let k1 = rhs(&y, &v0)?;
        let k2 = rhs(&y.axpy(cr(0.5 * h), &k1), &v1)?;
        let k3 = rhs(&y.axpy(cr(0.5 * h), &k2), &v1)?;
        let k4 = rhs(&y.axpy(cr(h), &k3), &v2)?;
        let incr = &(&k1 + &k4) + &(&k2 + &k3).scale_re(2.0);
        y = y.axpy(cr(h / 6.0), &incr);
        out.push(y.clone());
    }
    Ok(out)
}

/// Classical solution driven by the piecewise-linear path through the given
/// values: on each cell X′ is constant and RK4 runs with `substeps` steps.
pub fn classical_piecewise_linear(
    initial: &AlgebraElement,
    f: &[FunctionSpec],
    g: &[FunctionSpec],
    times: &[f64],
    values: &[AlgebraElement],
    substeps: usize,
) -> Result<Vec<AlgebraElement>> {
    let mut y = initial.clone();
    let mut out = vec![y.clone()];
    for k in 0..times.len() - 1 {
        let dt = times[k + 1] - times[k];
        let slope = (&values[k + 1] - &values[k]).scale_re(1.0 / dt);
        let ys = classical_rk4(&y, f, g, |_| slope.clone(), dt, substeps)?;
        y = ys.last().unwrap().clone();
        out.push(y.clone());
    }
    Ok(out)
}

/// Components of N[Y; Q(X)] with projective upper bounds for tensors.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SeminormRecord {
    pub holder_y: f64,
    pub sup_yx: f64,
    pub holder_yx: f64,
    pub holder_residual: f64,
    pub total: f64,
}

pub fn picard_bound_report(y: &ControlledProcess, area: &LevyArea, gamma: f64) -> Result<SeminormRecord> {
    let holder_y = holder_norm(&y.path, gamma)?;
    let sup_yx = y.yx.iter().map(|t| t.proj_ub()).fold(0.0, f64::max);
    let t = y.path.times();
    let mut holder_yx = 0.0f64;
    for j in 1..y.len() {
        for i in 0..j {
            let d = y.yx[j].sub(&y.yx[i])?.compress(1e-12);
            holder_yx = holder_yx.max(d.proj_ub() / (t[j] - t[i]).powf(gamma));
        }
    }
    let res = TwoParamGrid::from_fn(t.to_vec(), y.dim(), |i, j| Ok(y.residual(area, i, j)))?;
    let holder_residual = holder2_norm(&res, 2.0 * gamma);
    Ok(SeminormRecord {
        holder_y,
        sup_yx,
        holder_yx,
        holder_residual,
        total: holder_y + sup_yx + holder_yx + holder_residual,
    })
}
