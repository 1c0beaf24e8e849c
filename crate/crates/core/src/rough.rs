//! δ-calculus on grids, product Lévy areas and the corrected-Riemann-sum
//! rough integral.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;

use crate::algebra::{cr, Accumulator, AlgebraElement, ONE};
use crate::error::{Error, Result};
use crate::matrix_model::GridPath;
use crate::tensor::{group_by_first, group_by_last, Config, Side2, TensorElement2, TensorElement3};

/// Default Cauchy tolerance for refinement limits.
pub const DEFAULT_TOL: f64 = 1e-9;
/// Default slack applied to the asymptotic inequalities at finite N.
pub const DEFAULT_SLACK: f64 = 1.1;
/// Largest grid for which a dense two-parameter table is built.
pub const TWO_PARAM_BUDGET: usize = 1025;

/// A two-parameter process on a grid, g_{ij} for i < j; zero on the diagonal.
#[derive(Clone, Debug)]
pub struct TwoParamGrid {
    times: Vec<f64>,
    n: usize,
    values: Vec<AlgebraElement>,
}

fn tri_index(i: usize, j: usize) -> usize {
    j * (j - 1) / 2 + i
}

impl TwoParamGrid {
    pub fn zeros(times: Vec<f64>, n: usize) -> Result<Self> {
        Self::from_fn(times, n, |_, _| Ok(AlgebraElement::zeros(n)))
    }

    /// Builds g from a function of index pairs (i < j).
    pub fn from_fn(times: Vec<f64>, n: usize, mut f: impl FnMut(usize, usize) -> Result<AlgebraElement>) -> Result<Self> {
        let m = times.len();
        if m > TWO_PARAM_BUDGET {
            return Err(Error::Size {
                what: "two-parameter grid points",
                size: m,
                budget: TWO_PARAM_BUDGET,
            });
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::usage("grid times must be strictly increasing"));
        }
        let mut values = Vec::with_capacity(m * m.saturating_sub(1) / 2);
        for j in 1..m {
            for i in 0..j {
                let v = f(i, j)?;
                if v.dim() != n {
                    return Err(Error::usage("two-parameter values live in different spaces"));
                }
                values.push(v);
            }
        }
        Ok(TwoParamGrid { times, n, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// g_{ij}; the diagonal is zero and i > j is a usage error.
    pub fn get(&self, i: usize, j: usize) -> Result<AlgebraElement> {
        if i > j || j >= self.len() {
            return Err(Error::usage(format!("two-parameter index ({i},{j}) out of range")));
        }
        if i == j {
            return Ok(AlgebraElement::zeros(self.n));
        }
        Ok(self.values[tri_index(i, j)].clone())
    }

    pub fn set(&mut self, i: usize, j: usize, v: AlgebraElement) {
        assert!(i < j && j < self.len());
        self.values[tri_index(i, j)] = v;
    }

    pub fn combine(&self, a: f64, other: &TwoParamGrid, b: f64) -> Result<TwoParamGrid> {
        if self.times != other.times {
            return Err(Error::usage("two-parameter grids differ"));
        }
        Ok(TwoParamGrid {
            times: self.times.clone(),
            n: self.n,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| x.scale_re(a).axpy(cr(b), y))
                .collect(),
        })
    }

    /// (δg)_{sut} = g_{st} − g_{su} − g_{ut}.
    pub fn delta2(&self, s: usize, u: usize, t: usize) -> Result<AlgebraElement> {
        if !(s <= u && u <= t) {
            return Err(Error::usage("delta2 needs s ≤ u ≤ t"));
        }
        Ok(&(&self.get(s, t)? - &self.get(s, u)?) - &self.get(u, t)?)
    }

    /// max ‖(δg)_{sut}‖ over all grid triples.
    pub fn delta2_max(&self) -> f64 {
        let mut best = 0.0f64;
        for t in 2..self.len() {
            for u in 1..t {
                for s in 0..u {
                    best = best.max(self.delta2(s, u, t).unwrap().op_norm());
                }
            }
        }
        best
    }

    /// CSV rows (s, t, ‖g_st‖, Re φ(g_st), Im φ(g_st)).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["s", "t", "op_norm", "trace_re", "trace_im"])?;
        for j in 1..self.len() {
            for i in 0..j {
                let v = &self.values[tri_index(i, j)];
                let tr = v.trace();
                wr.write_record(&[
                    format!("{}", self.times[i]),
                    format!("{}", self.times[j]),
                    format!("{:e}", v.op_norm()),
                    format!("{:e}", tr.re),
                    format!("{:e}", tr.im),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// (δX)_{st} for all grid pairs.
pub fn delta1(path: &GridPath) -> Result<TwoParamGrid> {
    TwoParamGrid::from_fn(path.times().to_vec(), path.dim(), |i, j| Ok(path.increment(i, j)))
}

/// sup ‖g_{st}‖/(t−s)^α.
pub fn holder2_norm(g: &TwoParamGrid, alpha: f64) -> f64 {
    let t = g.times();
    let mut best = 0.0f64;
    for j in 1..g.len() {
        for i in 0..j {
            let v = g.values[tri_index(i, j)].op_norm();
            best = best.max(v / (t[j] - t[i]).powf(alpha));
        }
    }
    best
}

/// sup ‖h_{sut}‖/((t−u)^α (u−s)^β) over grid triples.
pub fn holder3_norm(times: &[f64], h: impl Fn(usize, usize, usize) -> Result<AlgebraElement>, alpha: f64, beta: f64) -> Result<f64> {
    Ok(holder3_table(times, h)?
        .iter()
        .map(|&(v, a, b)| v / (a.powf(alpha) * b.powf(beta)))
        .fold(0.0, f64::max))
}

/// (‖h_{sut}‖, t−u, u−s) for all grid triples.
fn holder3_table(times: &[f64], h: impl Fn(usize, usize, usize) -> Result<AlgebraElement>) -> Result<Vec<(f64, f64, f64)>> {
    let mut out = Vec::new();
    for t in 2..times.len() {
        for u in 1..t {
            for s in 0..u {
                out.push((h(s, u, t)?.op_norm(), times[t] - times[u], times[u] - times[s]));
            }
        }
    }
    Ok(out)
}

/// min over α ∈ {0, μ/k, …, μ} of the single-split C₃^{(α,μ−α)} norm: an
/// upper bound for the C₃^μ norm.
pub fn holder3_best_split(
    times: &[f64],
    h: impl Fn(usize, usize, usize) -> Result<AlgebraElement>,
    mu: f64,
    splits: usize,
) -> Result<(f64, f64)> {
    let table = holder3_table(times, h)?;
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..=splits {
        let a = mu * k as f64 / splits.max(1) as f64;
        let v = table
            .iter()
            .map(|&(x, l, r)| x / (l.powf(a) * r.powf(mu - a)))
            .fold(0.0, f64::max);
        if v < best.0 {
            best = (v, a);
        }
    }
    Ok(best)
}

/// How an area is built over the fine path.
#[derive(Clone, Debug, PartialEq)]
pub enum AreaVariant {
    /// Left-point sums Σ (U♯(X_k − X_s))·(δX)_k.
    Ito,
    /// Itô plus ½(t−s)(Id×φ)[U].
    Stratonovich,
    /// Exact area of the linear interpolation along the given fine indices.
    Interpolated(Vec<usize>),
    /// Exact area of the piecewise-linear path through every fine point.
    SmoothLebesgue,
}

type CacheKey = (usize, usize, u64);

/// A product Lévy area above a fine path (or above its interpolation).
#[derive(Clone)]
pub struct LevyArea {
    path: Arc<GridPath>,
    variant: AreaVariant,
    cache: Arc<RwLock<HashMap<CacheKey, AlgebraElement>>>,
    capacity: usize,
}

impl std::fmt::Debug for LevyArea {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LevyArea")
            .field("variant", &self.variant)
            .field("points", &self.path.len())
            .finish()
    }
}

/// Hash of a tensor's configuration and entries.
pub fn fingerprint(u: &TensorElement2) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    (u.config() as u8).hash(&mut h);
    for (a, b) in u.terms() {
        for x in [a, b] {
            match x.as_scalar() {
                Some(c) => {
                    0u8.hash(&mut h);
                    c.re.to_bits().hash(&mut h);
                    c.im.to_bits().hash(&mut h);
                }
                None => {
                    1u8.hash(&mut h);
                    for z in x.to_row_major() {
                        z.re.to_bits().hash(&mut h);
                        z.im.to_bits().hash(&mut h);
                    }
                }
            }
        }
    }
    h.finish()
}

impl LevyArea {
    pub fn new(path: Arc<GridPath>, variant: AreaVariant) -> Result<Self> {
        if let AreaVariant::Interpolated(d) = &variant {
            let last = path.len() - 1;
            if d.first() != Some(&0) || d.last() != Some(&last) || d.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::usage(
                    "interpolation partition must be increasing fine indices from 0 to the last point",
                ));
            }
        }
        Ok(LevyArea {
            path,
            variant,
            cache: Arc::new(RwLock::new(HashMap::new())),
            capacity: 64,
        })
    }

    pub fn ito(path: Arc<GridPath>) -> Self {
        Self::new(path, AreaVariant::Ito).unwrap()
    }

    pub fn stratonovich(path: Arc<GridPath>) -> Self {
        Self::new(path, AreaVariant::Stratonovich).unwrap()
    }

    /// Same path and shared cache, different variant.
    pub fn with_variant(&self, variant: AreaVariant) -> Result<Self> {
        let mut a = Self::new(self.path.clone(), variant)?;
        a.cache = self.cache.clone();
        a.capacity = self.capacity;
        Ok(a)
    }

    /// Maximum number of cached Itô evaluations (0 disables caching).
    pub fn with_cache_capacity(mut self, capacity: usize) -> Self {
        self.capacity = capacity;
        self
    }

    pub fn variant(&self) -> &AreaVariant {
        &self.variant
    }

    pub fn path(&self) -> &Arc<GridPath> {
        &self.path
    }

    pub fn dim(&self) -> usize {
        self.path.dim()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.path.time(i)
    }

    pub fn points(&self) -> usize {
        self.path.len()
    }

    /// Value at a fine index of the path this area sits above.
    pub fn value(&self, i: usize) -> AlgebraElement {
        match &self.variant {
            AreaVariant::Interpolated(d) => interpolate(&self.path, d, i),
            _ => self.path.value(i).clone(),
        }
    }

    /// Increment of the underlying path.
    pub fn increment(&self, s: usize, t: usize) -> AlgebraElement {
        match &self.variant {
            AreaVariant::Interpolated(_) => &self.value(t) - &self.value(s),
            _ => self.path.increment(s, t),
        }
    }

    fn check(&self, s: usize, t: usize, u: &TensorElement2) -> Result<()> {
        if s > t || t >= self.points() {
            return Err(Error::usage(format!("area indices ({s},{t}) off the fine grid")));
        }
        if u.config() != Config::Config2 {
            return Err(Error::usage("product Lévy areas act on Config2 tensors"));
        }
        if u.dim() != self.dim() {
            return Err(Error::usage("tensor and path live in different spaces"));
        }
        Ok(())
    }

    /// 𝐗_{st}[U] for fine indices s ≤ t.
    pub fn eval(&self, s: usize, t: usize, u: &TensorElement2) -> Result<AlgebraElement> {
        self.check(s, t, u)?;
        let n = self.dim();
        if s == t || u.is_empty() {
            return Ok(AlgebraElement::zeros(n));
        }
        match &self.variant {
            AreaVariant::Ito => self.ito_cached(s, t, u),
            AreaVariant::Stratonovich => {
                let corr = u.partial_trace(Side2::Right).scale_re(0.5 * (self.time(t) - self.time(s)));
                Ok(&self.ito_cached(s, t, u)? + &corr)
            }
            AreaVariant::Interpolated(d) => Ok(self.piecewise_linear(s, t, u, Some(d))),
            AreaVariant::SmoothLebesgue => Ok(self.piecewise_linear(s, t, u, None)),
        }
    }

    /// 𝐗*_{st}[U] = 𝐗_{st}[U*]*.
    pub fn eval_star(&self, s: usize, t: usize, u: &TensorElement2) -> Result<AlgebraElement> {
        Ok(self.eval(s, t, &u.adjoint())?.adjoint())
    }

    fn ito_cached(&self, s: usize, t: usize, u: &TensorElement2) -> Result<AlgebraElement> {
        if self.capacity == 0 {
            return Ok(self.ito_raw(s, t, u));
        }
        let key = (s, t, fingerprint(u));
        if let Some(v) = self.cache.read().expect("area cache poisoned").get(&key) {
            return Ok(v.clone());
        }
        let v = self.ito_raw(s, t, u);
        let mut w = self.cache.write().expect("area cache poisoned");
        if w.len() < self.capacity {
            w.insert(key, v.clone());
        }
        Ok(v)
    }

    fn ito_raw(&self, s: usize, t: usize, u: &TensorElement2) -> AlgebraElement {
        let p = &self.path;
        let mut acc = Accumulator::new(self.dim());
        let xs = p.value(s);
        for k in s + 1..t {
            let z = p.value(k) - xs;
            acc.add_product(ONE, &u.sharp(&z), &p.increment(k, k + 1));
        }
        acc.finish()
    }

    /// Exact ∫ (U♯(Y_r − Y_s))·dY_r for Y linear between consecutive breakpoints.
    fn piecewise_linear(&self, s: usize, t: usize, u: &TensorElement2, d: Option<&Vec<usize>>) -> AlgebraElement {
        let mut bps = vec![s];
        match d {
            Some(d) => bps.extend(d.iter().copied().filter(|&i| s < i && i < t)),
            None => bps.extend(s + 1..t),
        }
        bps.push(t);
        let val = |i: usize| match d {
            Some(d) => interpolate(&self.path, d, i),
            None => self.path.value(i).clone(),
        };
        let ys = val(s);
        let mut acc = Accumulator::new(self.dim());
        let mut prev = ys.clone();
        for &b in &bps[1..] {
            let next = val(b);
            let delta = &next - &prev;
            let z = &(&prev - &ys) + &delta.scale_re(0.5);
            acc.add_product(ONE, &u.sharp(&z), &delta);
            prev = next;
        }
        acc.finish()
    }
}

/// Linear interpolation of the path along the fine indices `d`, at index i.
pub fn interpolate(path: &GridPath, d: &[usize], i: usize) -> AlgebraElement {
    match d.binary_search(&i) {
        Ok(_) => path.value(i).clone(),
        Err(pos) => {
            let (lo, hi) = (d[pos - 1], d[pos]);
            let (tl, th, ti) = (path.time(lo), path.time(hi), path.time(i));
            let w = (ti - tl) / (th - tl);
            path.value(lo).scale_re(1.0 - w).axpy(cr(w), path.value(hi))
        }
    }
}

/// The spatial tensor area Σ_k (X_k − X_s)⊗(δX)_k as a Config1 tensor.
pub fn tensor_area(path: &GridPath, s: usize, t: usize) -> Result<TensorElement2> {
    if s > t || t >= path.len() {
        return Err(Error::usage("tensor area indices off the grid"));
    }
    let mut out = TensorElement2::zero(path.dim(), Config::Config1);
    for k in s + 1..t {
        out.push(path.increment(s, k), path.increment(k, k + 1));
    }
    Ok(out)
}

/// Values of a controlled biprocess at one time: U, 𝕌¹, 𝕌² (Config2).
#[derive(Clone, Debug)]
pub struct BiprocessValue {
    pub u: TensorElement2,
    pub u1: TensorElement3,
    pub u2: TensorElement3,
}

impl BiprocessValue {
    /// A biprocess with vanishing triprocesses.
    pub fn constant(u: TensorElement2) -> Self {
        let n = u.dim();
        BiprocessValue {
            u,
            u1: TensorElement3::zero(n, Config::Config2),
            u2: TensorElement3::zero(n, Config::Config2),
        }
    }

    pub fn dim(&self) -> usize {
        self.u.dim()
    }
}

/// A biprocess evaluated lazily at fine indices.
pub trait BiprocessSource: Sync {
    fn dim(&self) -> usize;
    fn defined_at(&self, fine_index: usize) -> bool;
    fn at(&self, fine_index: usize) -> Result<BiprocessValue>;
}

/// Stored values at a set of fine indices.
#[derive(Clone, Debug)]
pub struct ControlledBiprocess {
    pub indices: Vec<usize>,
    pub values: Vec<BiprocessValue>,
}

impl ControlledBiprocess {
    pub fn new(indices: Vec<usize>, values: Vec<BiprocessValue>) -> Result<Self> {
        if indices.len() != values.len() || indices.is_empty() {
            return Err(Error::usage("biprocess needs one value per index"));
        }
        if indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::usage("biprocess indices must increase"));
        }
        Ok(ControlledBiprocess { indices, values })
    }
}

impl BiprocessSource for ControlledBiprocess {
    fn dim(&self) -> usize {
        self.values[0].dim()
    }

    fn defined_at(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    fn at(&self, i: usize) -> Result<BiprocessValue> {
        self.indices
            .binary_search(&i)
            .map(|k| self.values[k].clone())
            .map_err(|_| Error::usage(format!("biprocess undefined at fine index {i}")))
    }
}

/// A biprocess given by a function of the fine index, defined on multiples
/// of `stride`.
pub struct FnBiprocess<F> {
    pub n: usize,
    pub stride: usize,
    pub f: F,
}

impl<F> BiprocessSource for FnBiprocess<F>
where
    F: Fn(usize) -> Result<BiprocessValue> + Sync,
{
    fn dim(&self) -> usize {
        self.n
    }

    fn defined_at(&self, i: usize) -> bool {
        i % self.stride == 0
    }

    fn at(&self, i: usize) -> Result<BiprocessValue> {
        (self.f)(i)
    }
}

/// U^♭_{st} = (δU)_{st} − (δX)_{st}♯𝕌¹_s − 𝕌²_s♯(δX)_{st}.
pub fn biprocess_residual(area: &LevyArea, src: &dyn BiprocessSource, s: usize, t: usize) -> Result<TensorElement2> {
    let (a, b) = (src.at(s)?, src.at(t)?);
    let dx = area.increment(s, t);
    b.u.sub(&a.u)?
        .sub(&a.u1.tri_sharp(&dx, Side2::Left))?
        .sub(&a.u2.tri_sharp(&dx, Side2::Right))
}

/// M_{st} = U_s♯(δX)_{st} + [𝐗_{st}×Id](𝕌¹_s) + [Id×𝐗*_{st}](𝕌²_s).
pub fn germ(area: &LevyArea, value: &BiprocessValue, s: usize, t: usize) -> Result<AlgebraElement> {
    let dx = area.increment(s, t);
    let mut acc = Accumulator::new(area.dim());
    acc.add(&value.u.sharp(&dx));
    for (pair, c) in group_by_last(&value.u1) {
        acc.add_product(ONE, &area.eval(s, t, &pair)?, &c);
    }
    for (a, pair) in group_by_first(&value.u2) {
        acc.add_product(ONE, &a, &area.eval_star(s, t, &pair)?);
    }
    Ok(acc.finish())
}

/// Which dyadic refinement levels to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Refinement {
    /// Coarse to fine, stopping once successive levels agree within tol.
    Full,
    /// Only the two finest available levels.
    FinestPair,
}

#[derive(Clone, Copy, Debug)]
pub struct IntegralOptions {
    pub tol: f64,
    pub refinement: Refinement,
    /// Cap on the refinement depth below each coarse cell.
    pub max_level: Option<usize>,
}

impl Default for IntegralOptions {
    fn default() -> Self {
        IntegralOptions {
            tol: DEFAULT_TOL,
            refinement: Refinement::Full,
            max_level: None,
        }
    }
}

/// J over a coarse partition, stored through its cell values (J is additive).
#[derive(Clone, Debug)]
pub struct RoughIntegral {
    pub indices: Vec<usize>,
    pub times: Vec<f64>,
    pub cells: Vec<AlgebraElement>,
    /// Cell values at the previous level, for gap reporting.
    pub previous: Option<Vec<AlgebraElement>>,
    /// Refinement depth of the reported values below each coarse cell.
    pub level: usize,
    /// Operator norm of the last level difference, max over [s,t] unions of cells.
    pub gap: f64,
    pub converged: bool,
    /// Gap after each level (Full) or the single finest gap (FinestPair).
    pub history: Vec<f64>,
}

impl RoughIntegral {
    /// J_{s t} between coarse positions i ≤ j.
    pub fn value(&self, i: usize, j: usize) -> AlgebraElement {
        let n = self.cells.first().map(|c| c.dim()).unwrap_or(1);
        let mut acc = Accumulator::new(n);
        for c in &self.cells[i..j] {
            acc.add(c);
        }
        acc.finish()
    }

    /// J_{0T}.
    pub fn total(&self) -> AlgebraElement {
        self.value(0, self.cells.len())
    }

    pub fn to_grid(&self) -> Result<TwoParamGrid> {
        let n = self.cells.first().map(|c| c.dim()).unwrap_or(1);
        let mut cum = vec![AlgebraElement::zeros(n)];
        for c in &self.cells {
            let next = cum.last().unwrap() + c;
            cum.push(next);
        }
        TwoParamGrid::from_fn(self.times.clone(), n, |i, j| Ok(&cum[j] - &cum[i]))
    }
}

/// Deepest dyadic level ℓ such that every cell splits into 2^ℓ sub-cells with
/// the integrand defined at every sub-point.
fn max_level(indices: &[usize], src: &dyn BiprocessSource, cap: Option<usize>) -> usize {
    let mut l = 0;
    loop {
        if cap.is_some_and(|c| l >= c) {
            return l;
        }
        let next = l + 1;
        let ok = indices.windows(2).all(|w| {
            let len = w[1] - w[0];
            len % (1 << next) == 0 && (0..(1 << next)).all(|k| src.defined_at(w[0] + k * (len >> next)))
        });
        if !ok {
            return l;
        }
        l = next;
    }
}

/// Σ_k M over the level-ℓ dyadic refinement of every cell.
fn level_sums(area: &LevyArea, src: &dyn BiprocessSource, indices: &[usize], level: usize) -> Result<Vec<AlgebraElement>> {
    indices
        .par_windows(2)
        .map(|w| {
            let step = (w[1] - w[0]) >> level;
            let mut acc = Accumulator::new(area.dim());
            for k in 0..(1usize << level) {
                let p = w[0] + k * step;
                let v = src.at(p)?;
                acc.add(&germ(area, &v, p, p + step)?);
            }
            Ok(acc.finish())
        })
        .collect()
}

/// Largest operator-norm difference over unions of consecutive cells.
fn cell_gap(a: &[AlgebraElement], b: &[AlgebraElement]) -> f64 {
    let diffs: Vec<AlgebraElement> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut best = diffs.iter().map(|d| d.op_norm()).fold(0.0, f64::max);
    if diffs.len() > 1 {
        let mut acc = Accumulator::new(diffs[0].dim());
        for d in &diffs {
            acc.add(d);
        }
        best = best.max(acc.finish().op_norm());
    }
    best
}

/// The rough integral J(𝐔♯dX) on a coarse partition of fine indices, as the
/// limit of corrected Riemann sums over dyadic refinements inside the fine
/// grid. Stops at tol (Full) or reports the finest available gap.
pub fn rough_integral(
    src: &dyn BiprocessSource,
    area: &LevyArea,
    coarse: &[usize],
    opts: &IntegralOptions,
) -> Result<RoughIntegral> {
    if coarse.len() < 2 || coarse.windows(2).any(|w| w[1] <= w[0]) || *coarse.last().unwrap() >= area.points() {
        return Err(Error::usage("coarse partition must be increasing fine indices"));
    }
    if src.dim() != area.dim() {
        return Err(Error::usage("integrand and path live in different spaces"));
    }
    if let Some(&i) = coarse.iter().find(|&&i| !src.defined_at(i)) {
        return Err(Error::usage(format!("integrand undefined at coarse index {i}")));
    }
    let top = max_level(coarse, src, opts.max_level);
    let times = coarse.iter().map(|&i| area.time(i)).collect();
    let mut history = Vec::new();
    let (start, mut prev) = match opts.refinement {
        Refinement::Full => (1, level_sums(area, src, coarse, 0)?),
        Refinement::FinestPair if top == 0 => (1, level_sums(area, src, coarse, 0)?),
        Refinement::FinestPair => (top, level_sums(area, src, coarse, top - 1)?),
    };
    if top == 0 {
        return Ok(RoughIntegral {
            indices: coarse.to_vec(),
            times,
            cells: prev,
            previous: None,
            level: 0,
            gap: f64::INFINITY,
            converged: false,
            history,
        });
    }
    let mut level = start;
    loop {
        let cur = level_sums(area, src, coarse, level)?;
        let gap = cell_gap(&cur, &prev);
        history.push(gap);
        let converged = gap <= opts.tol;
        if converged || level == top {
            return Ok(RoughIntegral {
                indices: coarse.to_vec(),
                times,
                cells: cur,
                previous: Some(prev),
                level,
                gap,
                converged,
                history,
            });
        }
        prev = cur;
        level += 1;
    }
}

/// c_μ = 2 + 2^μ ζ(μ), ζ by Euler–Maclaurin with 1000 explicit terms.
pub fn sewing_constant(mu: f64) -> Result<f64> {
    if mu <= 1.0 {
        return Err(Error::usage("sewing needs μ > 1"));
    }
    let k = 1000usize;
    let kf = k as f64;
    let head: f64 = (1..k).map(|i| (i as f64).powf(-mu)).sum();
    let tail = kf.powf(1.0 - mu) / (mu - 1.0) + 0.5 * kf.powf(-mu) + mu * kf.powf(-mu - 1.0) / 12.0;
    Ok(2.0 + 2f64.powf(mu) * (head + tail))
}

#[derive(Clone, Debug)]
pub struct SewingReport {
    /// ΛδM = M − J on the grid.
    pub lambda_part: TwoParamGrid,
    /// J, the additive part.
    pub additive: TwoParamGrid,
    /// Best-split upper bound of the C₃^μ norm of δM and its α.
    pub delta_norm: f64,
    pub split_alpha: f64,
    /// sup ‖ΛδM_{st}‖/(t−s)^μ.
    pub lambda_norm: f64,
    pub c_mu: f64,
    pub gap: f64,
    pub bound_holds: bool,
}

/// Sewing of a germ M given as a function of times: J_{st} is the sum of M
/// over the `levels`-fold dyadic refinement of each grid cell, and the
/// contraction bound of the sewing map is checked on the grid.
pub fn sewing_residual(
    times: &[f64],
    n: usize,
    m: impl Fn(f64, f64) -> AlgebraElement + Sync,
    mu: f64,
    levels: usize,
    slack: f64,
) -> Result<SewingReport> {
    let c_mu = sewing_constant(mu)?;
    let sum_level = |a: f64, b: f64, l: usize| {
        let parts = 1usize << l;
        let h = (b - a) / parts as f64;
        let mut acc = Accumulator::new(n);
        for k in 0..parts {
            let lo = a + h * k as f64;
            let hi = if k + 1 == parts { b } else { lo + h };
            acc.add(&m(lo, hi));
        }
        acc.finish()
    };
    let cells: Vec<(AlgebraElement, AlgebraElement)> = times
        .par_windows(2)
        .map(|w| (sum_level(w[0], w[1], levels), sum_level(w[0], w[1], levels.saturating_sub(1))))
        .collect();
    let gap = cell_gap(
        &cells.iter().map(|c| c.0.clone()).collect::<Vec<_>>(),
        &cells.iter().map(|c| c.1.clone()).collect::<Vec<_>>(),
    );
    let mut cum = vec![AlgebraElement::zeros(n)];
    for c in &cells {
        let next = cum.last().unwrap() + &c.0;
        cum.push(next);
    }
    let additive = TwoParamGrid::from_fn(times.to_vec(), n, |i, j| Ok(&cum[j] - &cum[i]))?;
    let mgrid = TwoParamGrid::from_fn(times.to_vec(), n, |i, j| Ok(m(times[i], times[j])))?;
    let lambda_part = mgrid.combine(1.0, &additive, -1.0)?;
    let (delta_norm, split_alpha) = holder3_best_split(times, |s, u, t| mgrid.delta2(s, u, t), mu, 20)?;
    let lambda_norm = holder2_norm(&lambda_part, mu);
    let bound_holds = lambda_norm <= slack * c_mu * delta_norm + 1e-12;
    Ok(SewingReport {
        lambda_part,
        additive,
        delta_norm,
        split_alpha,
        lambda_norm,
        c_mu,
        gap,
        bound_holds,
    })
}

/// Least-squares slope and R² of log y against log x.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    let k = pts.len() as f64;
    if pts.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::Space;
    use crate::functional::{second_tensor_derivative, tensor_derivative, FunctionSpec};
    use crate::matrix_model::{simulate_free_bm, substream, sample_gue_increment, uniform_grid};
    use faer::c64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn bm(n: usize, steps: usize, seed: u64) -> Arc<GridPath> {
        Arc::new(simulate_free_bm(Space::new(n).unwrap(), &uniform_grid(1.0, steps), seed, 0).unwrap())
    }

    fn rnd(n: usize, seed: u64) -> AlgebraElement {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AlgebraElement::from_fn(n, |_, _| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            c64::new(a, b)
        })
    }

    fn rnd_tensor(n: usize, seed: u64) -> TensorElement2 {
        TensorElement2::from_terms(n, Config::Config2, (0..2).map(|k| (rnd(n, seed + 2 * k), rnd(n, seed + 2 * k + 1))).collect()).unwrap()
    }

    fn linear(n: usize, steps: usize) -> (AlgebraElement, Arc<GridPath>) {
        let a = sample_gue_increment(Space::new(n).unwrap(), 1.0, &mut substream(9, 0, 0));
        let p = GridPath::from_fn(uniform_grid(1.0, steps), |t| a.scale_re(t)).unwrap();
        (a, Arc::new(p))
    }

    #[test]
    fn delta_calculus() {
        let p = bm(4, 8, 1);
        let g = delta1(&p).unwrap();
        assert!(g.delta2_max() < 1e-14);
        let c = GridPath::from_fn(uniform_grid(1.0, 4), |_| AlgebraElement::identity(3)).unwrap();
        assert_eq!(holder2_norm(&delta1(&c).unwrap(), 0.5), 0.0);
        let lin = TwoParamGrid::from_fn(uniform_grid(1.0, 5), 2, |i, j| Ok(AlgebraElement::identity(2).scale_re((j - i) as f64 / 5.0))).unwrap();
        assert!(lin.delta2_max() < 1e-15);
        assert!((holder2_norm(&lin, 1.0) - 1.0).abs() < 1e-14);
        assert!(lin.get(3, 1).is_err());
        assert_eq!(lin.get(2, 2).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn chen_identity_all_variants() {
        let p = bm(5, 16, 2);
        let variants = [
            AreaVariant::Ito,
            AreaVariant::Stratonovich,
            AreaVariant::Interpolated(vec![0, 3, 4, 9, 16]),
            AreaVariant::SmoothLebesgue,
        ];
        for v in variants {
            let area = LevyArea::new(p.clone(), v.clone()).unwrap();
            for (k, (s, u, t)) in [(0, 5, 16), (2, 3, 11), (1, 8, 9), (4, 10, 15)].into_iter().enumerate() {
                let tu = rnd_tensor(5, 10 * k as u64);
                let lhs = &(&area.eval(s, t, &tu).unwrap() - &area.eval(s, u, &tu).unwrap()) - &area.eval(u, t, &tu).unwrap();
                let rhs = tu.sharp(&area.increment(s, u)).matmul(&area.increment(u, t));
                assert!(lhs.max_abs_diff(&rhs) < 1e-12 * (1.0 + rhs.max_abs()), "{v:?}");
            }
        }
    }

    #[test]
    fn ito_area_on_linear_path() {
        let one = TensorElement2::unit(3, Config::Config2);
        let mut errs = Vec::new();
        for steps in [16, 64, 256] {
            let (a, p) = linear(3, steps);
            let x = LevyArea::ito(p).eval(0, steps, &one).unwrap();
            errs.push(x.max_abs_diff(&a.matmul(&a).scale_re(0.5)));
        }
        assert!(errs[2] < errs[1] && errs[1] < errs[0]);
        assert!((errs[0] / errs[2] - 16.0).abs() < 1e-6);
        let (a, p) = linear(3, 8);
        let s = LevyArea::new(p, AreaVariant::SmoothLebesgue).unwrap().eval(2, 6, &one).unwrap();
        assert!(s.max_abs_diff(&a.matmul(&a).scale_re(0.5 * 0.25)) < 1e-14);
    }

    #[test]
    fn stratonovich_and_star() {
        let p = bm(4, 16, 3);
        let ito = LevyArea::ito(p.clone());
        let strat = ito.with_variant(AreaVariant::Stratonovich).unwrap();
        let one = TensorElement2::unit(4, Config::Config2);
        let d = &strat.eval(2, 10, &one).unwrap() - &ito.eval(2, 10, &one).unwrap();
        assert!(d.max_abs_diff(&AlgebraElement::identity(4).scale_re(0.25)) < 1e-14);
        let u = rnd_tensor(4, 50);
        let d = &strat.eval(0, 16, &u).unwrap() - &ito.eval(0, 16, &u).unwrap();
        assert!(d.max_abs_diff(&u.partial_trace(Side2::Right).scale_re(0.5)) < 1e-13);
        let ds = &strat.eval_star(0, 16, &u).unwrap() - &ito.eval_star(0, 16, &u).unwrap();
        assert!(ds.max_abs_diff(&u.partial_trace(Side2::Left).scale_re(0.5)) < 1e-13);
        let star = ito.eval_star(3, 9, &one).unwrap();
        let mut mirror = AlgebraElement::zeros(4);
        for k in 3..9 {
            mirror = &mirror + &p.increment(k, k + 1).matmul(&p.increment(3, k));
        }
        assert!(star.max_abs_diff(&mirror) < 1e-14);
        assert_eq!(ito.eval(4, 4, &u).unwrap().max_abs(), 0.0);
        assert!(ito.eval(0, 17, &u).is_err());
    }

    #[test]
    fn interpolated_single_cell_and_linear_path() {
        let p = bm(3, 8, 4);
        let area = LevyArea::new(p.clone(), AreaVariant::Interpolated(vec![0, 4, 8])).unwrap();
        let u = rnd_tensor(3, 60);
        let dx = p.increment(0, 4);
        assert!(area.eval(0, 4, &u).unwrap().max_abs_diff(&u.sharp(&dx).matmul(&dx).scale_re(0.5)) < 1e-13);
        let (_, lp) = linear(3, 8);
        let a = LevyArea::new(lp.clone(), AreaVariant::Interpolated(vec![0, 8])).unwrap();
        let b = LevyArea::new(lp, AreaVariant::SmoothLebesgue).unwrap();
        assert!(a.eval(1, 7, &u).unwrap().max_abs_diff(&b.eval(1, 7, &u).unwrap()) < 1e-13);
        assert!(LevyArea::new(p, AreaVariant::Interpolated(vec![1, 8])).is_err());
    }

    #[test]
    fn tensor_area_chen() {
        let p = bm(3, 12, 5);
        let (s, u, t) = (1, 6, 11);
        let lhs = tensor_area(&p, s, t).unwrap();
        let rhs = tensor_area(&p, s, u)
            .unwrap()
            .add(&tensor_area(&p, u, t).unwrap())
            .unwrap()
            .add(&TensorElement2::simple(p.increment(s, u), p.increment(u, t), Config::Config1))
            .unwrap();
        let diff = lhs.sub(&rhs).unwrap();
        assert!(diff.spatial_norm().unwrap() < 1e-13);
        assert!(tensor_area(&p, 4, 4).unwrap().is_empty());
    }

    #[test]
    fn constant_integrand_is_exact() {
        let p = bm(4, 32, 6);
        let (a, b) = (rnd(4, 70), rnd(4, 71));
        let u = TensorElement2::simple(a.clone(), b.clone(), Config::Config2);
        let src = FnBiprocess { n: 4, stride: 1, f: |_| Ok(BiprocessValue::constant(u.clone())) };
        let area = LevyArea::ito(p.clone());
        let j = rough_integral(&src, &area, &[0, 8, 16, 32], &IntegralOptions::default()).unwrap();
        assert!(j.converged);
        assert!(j.gap < 1e-12);
        let exact = a.matmul(&p.increment(8, 32)).matmul(&b);
        assert!(j.value(1, 3).max_abs_diff(&exact) < 1e-12);
        let g = j.to_grid().unwrap();
        assert!(g.delta2_max() < 1e-12);
    }

    #[test]
    fn square_residual_equals_defect() {
        let n = 6;
        let p = bm(n, 64, 7);
        let f = FunctionSpec::monomial(2);
        let pp = p.clone();
        let src = FnBiprocess {
            n,
            stride: 1,
            f: move |i: usize| {
                let x = pp.value(i);
                let d2 = second_tensor_derivative(&f, x)?;
                Ok(BiprocessValue { u: tensor_derivative(&f, x)?, u1: d2.clone(), u2: d2 })
            },
        };
        let area = LevyArea::stratonovich(p.clone());
        for policy in [Refinement::Full, Refinement::FinestPair] {
            let opts = IntegralOptions { refinement: policy, ..Default::default() };
            let j = rough_integral(&src, &area, &[0, 16, 64], &opts).unwrap();
            let sq = |i: usize| p.value(i).matmul(p.value(i));
            let residual = &j.value(0, 2) - &(&sq(64) - &sq(0));
            let mut defect = AlgebraElement::identity(n);
            for k in 0..64 {
                let d = p.increment(k, k + 1);
                defect = &defect - &d.matmul(&d);
            }
            assert!(residual.max_abs_diff(&defect) < 1e-12);
            for h in &j.history {
                assert!(*h < 1e-12);
            }
        }
    }

    #[test]
    fn integral_is_linear() {
        let p = bm(3, 16, 8);
        let area = LevyArea::ito(p.clone());
        let mk = |seed: u64| {
            let u = rnd_tensor(3, seed);
            let u1 = TensorElement3::simple(rnd(3, seed + 5), rnd(3, seed + 6), rnd(3, seed + 7), Config::Config2);
            BiprocessValue { u, u1: u1.clone(), u2: u1 }
        };
        let (a, b) = (mk(100), mk(200));
        let c = BiprocessValue {
            u: a.u.add(&b.u.scale(cr(2.0))).unwrap(),
            u1: a.u1.add(&b.u1.scale(cr(2.0))).unwrap(),
            u2: a.u2.add(&b.u2.scale(cr(2.0))).unwrap(),
        };
        let run = |v: BiprocessValue| {
            let src = FnBiprocess { n: 3, stride: 1, f: move |_| Ok(v.clone()) };
            rough_integral(&src, &area, &[0, 8, 16], &IntegralOptions::default()).unwrap().total()
        };
        let (ja, jb, jc) = (run(a), run(b), run(c));
        assert!(jc.max_abs_diff(&ja.axpy(cr(2.0), &jb)) < 1e-12);
    }

    #[test]
    fn coarse_integrand_limits_refinement() {
        let p = bm(3, 16, 9);
        let area = LevyArea::ito(p);
        let src = FnBiprocess { n: 3, stride: 4, f: |_| Ok(BiprocessValue::constant(TensorElement2::unit(3, Config::Config2))) };
        let j = rough_integral(&src, &area, &[0, 8, 16], &IntegralOptions::default()).unwrap();
        assert_eq!(j.level, 1);
        let bad = rough_integral(&src, &area, &[0, 6, 16], &IntegralOptions::default());
        assert!(bad.is_err());
    }

    #[test]
    fn sewing_examples() {
        let times = uniform_grid(1.0, 8);
        let p = bm(3, 8, 10);
        let pp = p.clone();
        let idx = move |t: f64| (t * 8.0).round() as usize;
        let r = sewing_residual(&times, 3, move |s, t| pp.increment(idx(s), idx(t)), 2.0, 0, 1.1).unwrap();
        assert!(holder2_norm(&r.lambda_part, 0.0) < 1e-14);
        let r = sewing_residual(&times, 2, |s, t| AlgebraElement::identity(2).scale_re((t - s).powi(2)), 2.0, 18, 1.1).unwrap();
        assert!(r.bound_holds);
        assert!(r.additive.get(0, 8).unwrap().op_norm() < 1e-5);
        let m = r.lambda_part.get(0, 8).unwrap();
        assert!((m.op_norm() - 1.0).abs() < 1e-5);
        let c2 = sewing_constant(2.0).unwrap();
        assert!((c2 - (2.0 + 4.0 * std::f64::consts::PI.powi(2) / 6.0)).abs() < 1e-10);
        assert!(sewing_constant(1.0).is_err());
    }

    #[test]
    fn csv_export() {
        let g = delta1(&bm(2, 2, 11)).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 4);
        assert!(s.starts_with("s,t,op_norm,trace_re,trace_im"));
    }

    #[test]
    fn loglog() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(0.7)).collect();
        let (s, r2) = loglog_fit(&x, &y);
        assert!((s - 0.7).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
