//! Scripted studies: area and solution convergence, Itô-formula residuals,
//! the Burkholder–Gundy inequality, the non-extension trend and bounds.
//!
//! Every study is a pure function of its configuration and master seed and
//! returns a table plus named pass/fail checks.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{cr, AlgebraElement, Space};
use crate::error::{Error, Result};
use crate::functional::{apply_function, second_tensor_derivative, tensor_derivative, FunctionSpec};
use crate::matrix_model::{
    for_each_dyadic_value, holder_norm, sample_gue_increment, simulate_free_bm, substream, uniform_grid, GridPath,
};
use crate::pairing::moment_bound_check;
use crate::rough::{
    germ, interpolate, loglog_fit, rough_integral, tensor_area, AreaVariant, BiprocessValue, FnBiprocess,
    IntegralOptions, LevyArea,
};
use crate::sde::{
    classical_piecewise_linear, lift_value, paired_g, picard_bound_report, solve_rough_sde, PairingMode, Scheme,
    SdeProblem,
};
use crate::tensor::{Config, TensorElement2};

/// Path ids at or above this value never collide with per-seed path ids.
const AUX_BASE: u64 = 1 << 32;
const PROBE_STREAM: u64 = 1;
const INITIAL_STREAM: u64 = 2;
const INTEGRAND_STREAM: u64 = 3;
const FREE_STREAM: u64 = 4;

fn aux_rng(seed: u64, stream: u64, item: u64, k: u64) -> rand_chacha::ChaCha8Rng {
    substream(seed, AUX_BASE + stream, (item << 24) | k)
}

fn gue(n: usize, dt: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Result<AlgebraElement> {
    Ok(sample_gue_increment(Space::new(n)?, dt, rng))
}

/// Self-adjoint initial value scale·G with G a GUE(1) draw, independent of
/// every driving path of the same seed.
pub fn random_initial(n: usize, scale: f64, seed: u64, item: u64) -> Result<AlgebraElement> {
    Ok(gue(n, 1.0, &mut aux_rng(seed, INITIAL_STREAM, item, 0))?.scale_re(scale))
}

/// A CSV table with a header row. Cells are formatted when pushed.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.columns).map_err(csv_err)?;
        for r in &self.rows {
            out.write_record(r).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Values of a column parsed as numbers (non-numeric cells become NaN).
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k].parse().unwrap_or(f64::NAN)).collect())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Shortest round-trip decimal form.
pub fn num(x: f64) -> String {
    format!("{x}")
}

/// One named assertion of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn at_most(name: &str, value: f64, limit: f64, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            value,
            limit,
            pass: value <= limit,
            detail: detail.into(),
        }
    }

    pub fn at_least(name: &str, value: f64, limit: f64, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            value,
            limit,
            pass: value >= limit,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyReport {
    pub name: String,
    pub table: Table,
    pub checks: Vec<Check>,
}

impl StudyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

/// Fine indices of the dyadic level-`level` points inside a level-`fine` grid.
pub fn level_indices(fine: u32, level: u32) -> Vec<usize> {
    let stride = 1usize << (fine - level);
    (0..=(1usize << level)).map(|k| k * stride).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// The piecewise-linear interpolation of `path` along the fine indices `d`,
/// evaluated on the whole fine grid.
pub fn linear_interpolation(path: &GridPath, d: &[usize]) -> Result<GridPath> {
    let last = path.len() - 1;
    if d.first() != Some(&0) || d.last() != Some(&last) || d.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::usage("interpolation partition must be increasing fine indices from 0 to the last point"));
    }
    let values = (0..path.len()).map(|i| interpolate(path, d, i)).collect();
    GridPath::new(path.times().to_vec(), values)
}

/// Area of the linear interpolation along `d`, in the Lebesgue sense.
pub fn interp_area(path: &Arc<GridPath>, d: &[usize], u: &TensorElement2, s: usize, t: usize) -> Result<AlgebraElement> {
    LevyArea::new(path.clone(), AreaVariant::Interpolated(d.to_vec()))?.eval(s, t, u)
}

/// Σ (Y_r − Y_s + ½Δ)⊗Δ over the linear pieces of the interpolation along `d`
/// inside [s, t]: the spatial tensor area of the interpolated path (Config1).
pub fn interp_tensor_area(path: &GridPath, d: &[usize], s: usize, t: usize) -> Result<TensorElement2> {
    if s > t || t >= path.len() {
        return Err(Error::usage("tensor area indices off the grid"));
    }
    let mut bps = vec![s];
    bps.extend(d.iter().copied().filter(|&i| s < i && i < t));
    bps.push(t);
    let ys = interpolate(path, d, s);
    let mut prev = ys.clone();
    let mut out = TensorElement2::zero(path.dim(), Config::Config1);
    for &b in &bps[1..] {
        let next = interpolate(path, d, b);
        let delta = &next - &prev;
        out.push(&(&prev - &ys) + &delta.scale_re(0.5), delta);
        prev = next;
    }
    Ok(out)
}

/// 𝐗_{e_a e_b}[U] for all a < b, assembled from the consecutive cells by
/// 𝐗_{st} = 𝐗_{su} + 𝐗_{ut} + (U♯δX_{su})·δX_{ut}.
pub fn chen_pairs(area: &LevyArea, e: &[usize], u: &TensorElement2) -> Result<Vec<(usize, usize, AlgebraElement)>> {
    let cells: Vec<AlgebraElement> = e.windows(2).map(|w| area.eval(w[0], w[1], u)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for a in 0..e.len() - 1 {
        let mut acc = AlgebraElement::zeros(area.dim());
        for b in a + 1..e.len() {
            if b > a + 1 {
                let left = u.sharp(&area.increment(e[a], e[b - 1]));
                acc = &acc + &left.matmul(&area.increment(e[b - 1], e[b]));
            }
            acc = &acc + &cells[b - 1];
            out.push((e[a], e[b], acc.clone()));
        }
    }
    Ok(out)
}

/// 1⊗1 followed by random a⊗b with ‖a‖ = ‖b‖ = 1.
fn probe_tensors(n: usize, count: usize, seed: u64, item: u64) -> Result<Vec<TensorElement2>> {
    let mut out = vec![TensorElement2::unit(n, Config::Config2)];
    for k in 1..count {
        let mut rng = aux_rng(seed, PROBE_STREAM, item, k as u64);
        let a = gue(n, 1.0, &mut rng)?;
        let b = gue(n, 1.0, &mut rng)?;
        let (a, b) = (a.scale_re(1.0 / a.op_norm()), b.scale_re(1.0 / b.op_norm()));
        out.push(TensorElement2::simple(a, b, Config::Config2));
    }
    Ok(out)
}

/// Appends per-mesh means over seeds and the trend checks shared by the
/// convergence studies.
fn convergence_checks(
    table: &mut Table,
    checks: &mut Vec<Check>,
    label: &str,
    meshes: &[f64],
    per_seed: &[Vec<f64>],
    extra: usize,
    min_rate: f64,
) -> Vec<f64> {
    let means: Vec<f64> = (0..meshes.len())
        .map(|m| mean(&per_seed.iter().map(|r| r[m]).collect::<Vec<_>>()))
        .collect();
    for (m, h) in meshes.iter().enumerate() {
        let mut row = vec!["mean".to_string(), num(*h), num(means[m])];
        row.extend(std::iter::repeat_n(String::new(), extra));
        table.push(row);
    }
    let (rate, r2) = loglog_fit(meshes, &means);
    let first = means[0];
    let last = *means.last().unwrap();
    if first <= 1e-12 {
        let worst = means.iter().copied().fold(0.0, f64::max);
        checks.push(Check::at_most(&format!("{label} distance"), worst, 1e-12, "zero up to rounding"));
        return means;
    }
    checks.push(Check::at_least(&format!("{label} fitted rate"), rate, min_rate, format!("R^2 = {r2}")));
    checks.push(Check::at_most(
        &format!("{label} final/first"),
        last / first,
        0.3,
        format!("first {first}, final {last}"),
    ));
    let worst = means.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
    checks.push(Check::at_most(&format!("{label} monotone within noise"), worst, 1.2, "largest ratio of consecutive means"));
    means
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AreaConvergenceConfig {
    pub n: usize,
    pub fine_level: u32,
    pub mesh_levels: Vec<u32>,
    pub eval_level: u32,
    pub seeds: usize,
    pub gamma: f64,
    pub probes: usize,
    /// Dimension of the companion path used for the spatial tensor area (0 skips it).
    pub spatial_dim: usize,
    pub min_rate: f64,
}

impl Default for AreaConvergenceConfig {
    fn default() -> Self {
        AreaConvergenceConfig {
            n: 128,
            fine_level: 10,
            mesh_levels: vec![2, 3, 4, 5, 6],
            eval_level: 2,
            seeds: 10,
            gamma: 0.4,
            probes: 2,
            spatial_dim: 16,
            min_rate: 0.2,
        }
    }
}

fn check_levels(fine: u32, eval: u32, meshes: &[u32]) -> Result<()> {
    if fine > 16 {
        return Err(Error::usage("fine_level above 16 is out of budget"));
    }
    if meshes.len() < 2 || meshes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::usage("mesh_levels must hold at least two increasing levels"));
    }
    if eval > meshes[0] || *meshes.last().unwrap() > fine {
        return Err(Error::usage("need eval_level <= mesh levels <= fine_level"));
    }
    Ok(())
}

impl AreaConvergenceConfig {
    pub fn validate(&self) -> Result<()> {
        check_levels(self.fine_level, self.eval_level, &self.mesh_levels)?;
        Space::new(self.n)?;
        if self.seeds == 0 || self.probes == 0 {
            return Err(Error::usage("seeds and probes must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma < 0.5) {
            return Err(Error::usage("gamma must lie in (0, 1/2)"));
        }
        Ok(())
    }
}

/// Distance between the areas of linear interpolations and the Stratonovich
/// area, sup over evaluation pairs and probes of ‖𝐗ⁿ_{st}[U] − 𝐗^S_{st}[U]‖/(t−s)^{2γ}.
pub fn area_convergence_study(cfg: &AreaConvergenceConfig, seed: u64) -> Result<StudyReport> {
    cfg.validate()?;
    let fine = 1usize << cfg.fine_level;
    let grid = uniform_grid(1.0, fine);
    let e = level_indices(cfg.fine_level, cfg.eval_level);
    let meshes: Vec<f64> = cfg.mesh_levels.iter().map(|&l| 0.5f64.powi(l as i32)).collect();
    let per_seed: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.seeds)
        .into_par_iter()
        .map(|i| -> Result<(Vec<f64>, Vec<f64>)> {
            let path = Arc::new(simulate_free_bm(Space::new(cfg.n)?, &grid, seed, i as u64)?);
            let strat = LevyArea::stratonovich(path.clone()).with_cache_capacity(0);
            let probes = probe_tensors(cfg.n, cfg.probes, seed, i as u64)?;
            let reference = probes.iter().map(|u| chen_pairs(&strat, &e, u)).collect::<Result<Vec<_>>>()?;
            let spatial = if cfg.spatial_dim > 0 {
                let sp = simulate_free_bm(Space::new(cfg.spatial_dim)?, &grid, seed, i as u64)?;
                let ito = tensor_area(&sp, 0, fine)?;
                Some((sp, ito))
            } else {
                None
            };
            let mut dists = Vec::new();
            let mut sdists = Vec::new();
            for &l in &cfg.mesh_levels {
                let d = level_indices(cfg.fine_level, l);
                let approx = strat.with_variant(AreaVariant::Interpolated(d.clone()))?;
                let mut dist = 0.0f64;
                for (u, refs) in probes.iter().zip(&reference) {
                    for ((s, t, x), (_, _, y)) in chen_pairs(&approx, &e, u)?.iter().zip(refs) {
                        let dt = path.time(*t) - path.time(*s);
                        dist = dist.max((x - y).op_norm() / dt.powf(2.0 * cfg.gamma));
                    }
                }
                dists.push(dist);
                sdists.push(match &spatial {
                    Some((sp, ito)) => interp_tensor_area(sp, &d, 0, fine)?.sub(ito)?.spatial_norm()?,
                    None => f64::NAN,
                });
            }
            Ok((dists, sdists))
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new(&["seed", "mesh", "distance", "spatial_distance"]);
    for (i, (d, s)) in per_seed.iter().enumerate() {
        for m in 0..meshes.len() {
            table.push(vec![i.to_string(), num(meshes[m]), num(d[m]), num(s[m])]);
        }
    }
    let mut checks = Vec::new();
    let dists: Vec<Vec<f64>> = per_seed.iter().map(|p| p.0.clone()).collect();
    let means = convergence_checks(&mut table, &mut checks, "area", &meshes, &dists, 1, cfg.min_rate);
    if cfg.spatial_dim > 0 {
        let sm: Vec<f64> = (0..meshes.len())
            .map(|m| mean(&per_seed.iter().map(|p| p.1[m]).collect::<Vec<_>>()))
            .collect();
        let k0 = table.rows.len() - meshes.len();
        for m in 0..meshes.len() {
            table.rows[k0 + m][3] = num(sm[m]);
        }
        let (rate, r2) = loglog_fit(&meshes, &sm);
        checks.push(Check::at_least("spatial area fitted rate", rate, 0.0, format!("R^2 = {r2}")));
    }
    debug_assert_eq!(means.len(), meshes.len());
    Ok(StudyReport {
        name: "area-convergence".into(),
        table,
        checks,
    })
}

/// Area used for the rough reference solution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceArea {
    Stratonovich,
    /// Exact area of the piecewise-linear fine path: the limit of the
    /// interpolated areas at this N and fine mesh.
    SmoothLebesgue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolutionConvergenceConfig {
    pub n: usize,
    pub fine_level: u32,
    /// Level of the partition on which the rough solution is computed.
    pub reference_level: u32,
    pub mesh_levels: Vec<u32>,
    pub eval_level: u32,
    pub seeds: usize,
    pub gamma: f64,
    pub f: Vec<FunctionSpec>,
    pub pairing: PairingMode,
    pub initial_scale: f64,
    pub substeps: usize,
    pub reference_area: ReferenceArea,
    pub min_rate: f64,
}

impl Default for SolutionConvergenceConfig {
    fn default() -> Self {
        SolutionConvergenceConfig {
            n: 128,
            fine_level: 10,
            reference_level: 8,
            mesh_levels: vec![2, 3, 4, 5, 6],
            eval_level: 2,
            seeds: 10,
            gamma: 0.4,
            f: vec![FunctionSpec::identity(), FunctionSpec::constant(1.0)],
            pairing: PairingMode::ReverseStar,
            initial_scale: 1.0,
            substeps: 4,
            reference_area: ReferenceArea::Stratonovich,
            min_rate: 0.2,
        }
    }
}

impl SolutionConvergenceConfig {
    pub fn validate(&self) -> Result<()> {
        check_levels(self.fine_level, self.eval_level, &self.mesh_levels)?;
        Space::new(self.n)?;
        if self.reference_level > self.fine_level || self.reference_level < *self.mesh_levels.last().unwrap() {
            return Err(Error::usage("need finest mesh level <= reference_level <= fine_level"));
        }
        if self.seeds == 0 || self.substeps == 0 || self.f.is_empty() {
            return Err(Error::usage("seeds, substeps and f must be nonempty"));
        }
        if !(self.gamma > 0.0 && self.gamma < 0.5) {
            return Err(Error::usage("gamma must lie in (0, 1/2)"));
        }
        for h in &self.f {
            h.validate()?;
        }
        Ok(())
    }
}

/// γ-Hölder distance between the rough solution and the classical solutions
/// driven by linear interpolations, on the evaluation partition.
pub fn solution_convergence_study(cfg: &SolutionConvergenceConfig, seed: u64) -> Result<StudyReport> {
    cfg.validate()?;
    let fine = 1usize << cfg.fine_level;
    let grid = uniform_grid(1.0, fine);
    let g = paired_g(&cfg.f, cfg.pairing);
    let meshes: Vec<f64> = cfg.mesh_levels.iter().map(|&l| 0.5f64.powi(l as i32)).collect();
    let e = level_indices(cfg.fine_level, cfg.eval_level);
    let e_times: Vec<f64> = e.iter().map(|&i| grid[i]).collect();
    let per_seed: Vec<Vec<f64>> = (0..cfg.seeds)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let path = Arc::new(simulate_free_bm(Space::new(cfg.n)?, &grid, seed, i as u64)?);
            let a = random_initial(cfg.n, cfg.initial_scale, seed, i as u64)?;
            let problem = SdeProblem::new(a.clone(), cfg.f.clone(), g.clone()).self_adjoint();
            let variant = match cfg.reference_area {
                ReferenceArea::Stratonovich => AreaVariant::Stratonovich,
                ReferenceArea::SmoothLebesgue => AreaVariant::SmoothLebesgue,
            };
            let area = LevyArea::new(path.clone(), variant)?.with_cache_capacity(0);
            let coarse = level_indices(cfg.fine_level, cfg.reference_level);
            let rough = solve_rough_sde(&problem, &area, &coarse, Scheme::OneStep)?;
            let stride = 1usize << (cfg.reference_level - cfg.eval_level);
            let rough_e: Vec<AlgebraElement> = (0..e.len()).map(|k| rough.path.value(k * stride).clone()).collect();
            let mut out = Vec::new();
            for &l in &cfg.mesh_levels {
                let d = level_indices(cfg.fine_level, l);
                let times: Vec<f64> = d.iter().map(|&j| grid[j]).collect();
                let values: Vec<AlgebraElement> = d.iter().map(|&j| path.value(j).clone()).collect();
                let classical = classical_piecewise_linear(&a, &cfg.f, &g, &times, &values, cfg.substeps)?;
                let stride = 1usize << (l - cfg.eval_level);
                let diff: Vec<AlgebraElement> =
                    (0..e.len()).map(|k| &rough_e[k] - &classical[k * stride]).collect();
                let diff = GridPath::new(e_times.clone(), diff)?;
                out.push(holder_norm(&diff, cfg.gamma)? + diff.value(0).op_norm());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new(&["seed", "mesh", "distance"]);
    for (i, d) in per_seed.iter().enumerate() {
        for m in 0..meshes.len() {
            table.push(vec![i.to_string(), num(meshes[m]), num(d[m])]);
        }
    }
    let mut checks = Vec::new();
    convergence_checks(&mut table, &mut checks, "solution", &meshes, &per_seed, 0, cfg.min_rate);
    Ok(StudyReport {
        name: "solution-convergence".into(),
        table,
        checks,
    })
}

/// Finest-level corrected sums of a biprocess that is a function of X,
/// accumulated per coarse cell while the path is generated, so that no fine
/// path is stored.
#[derive(Clone, Debug)]
pub struct StreamedPass {
    pub times: Vec<f64>,
    /// X at the coarse points.
    pub values: Vec<AlgebraElement>,
    /// Σ M^I over the fine steps of each coarse cell.
    pub ito: Vec<AlgebraElement>,
    /// Σ M^S over the fine steps of each coarse cell.
    pub strat: Vec<AlgebraElement>,
    /// Trapezoid rule for ∫ ½(Id×φ×Id)[𝕌¹_u + 𝕌²_u] du over each cell.
    pub drift: Vec<AlgebraElement>,
    /// Σ (δX_k)² over each cell.
    pub qv: Vec<AlgebraElement>,
}

impl StreamedPass {
    /// Σ of a per-cell quantity over cells a..b.
    pub fn span(cells: &[AlgebraElement], a: usize, b: usize) -> AlgebraElement {
        let mut acc = AlgebraElement::zeros(cells[0].dim());
        for c in &cells[a..b] {
            acc = &acc + c;
        }
        acc
    }

    /// ‖(t−s)·1 − Σ(δX_k)²‖ maximized over coarse pairs.
    pub fn defect(&self) -> f64 {
        let n = self.values[0].dim();
        self.sup_over_pairs(|a, b| {
            &AlgebraElement::identity(n).scale_re(self.times[b] - self.times[a]) - &Self::span(&self.qv, a, b)
        })
    }

    /// max over coarse a < b of ‖r(a, b)‖.
    pub fn sup_over_pairs(&self, r: impl Fn(usize, usize) -> AlgebraElement) -> f64 {
        let m = self.times.len();
        let mut best = 0.0f64;
        for a in 0..m - 1 {
            for b in a + 1..m {
                best = best.max(r(a, b).op_norm());
            }
        }
        best
    }

    pub fn sup_value_norm(&self) -> f64 {
        self.values.iter().map(|v| v.op_norm()).fold(0.0, f64::max)
    }
}

/// Generates the dyadic bridge path at `level` over [0, 1] and accumulates the
/// finest-level germs of `value(X_k)` per coarse cell.
pub fn stream_finest_level(
    space: Space,
    level: u32,
    seed: u64,
    path_id: u64,
    cells: usize,
    value: impl Fn(&AlgebraElement) -> Result<BiprocessValue>,
) -> Result<StreamedPass> {
    let steps = 1usize << level;
    if cells == 0 || !cells.is_power_of_two() || cells > steps {
        return Err(Error::usage("coarse cells must be a power of two not above the step count"));
    }
    let per_cell = steps / cells;
    let grid = uniform_grid(1.0, steps);
    let n = space.dim();
    let zeros = || vec![AlgebraElement::zeros(n); cells];
    let mut out = StreamedPass {
        times: (0..=cells).map(|k| grid[k * per_cell]).collect(),
        values: Vec::with_capacity(cells + 1),
        ito: zeros(),
        strat: zeros(),
        drift: zeros(),
        qv: zeros(),
    };
    let mut err: Option<Error> = None;
    let mut prev: Option<(usize, AlgebraElement, BiprocessValue, AlgebraElement)> = None;
    let drift_of = |v: &BiprocessValue| -> Result<AlgebraElement> {
        Ok(v.u1.add(&v.u2)?.partial_trace_mid().scale_re(0.5))
    };
    for_each_dyadic_value(space, 1.0, level, seed, path_id, |k, x| {
        if err.is_some() {
            return;
        }
        let mut step = || -> Result<(BiprocessValue, AlgebraElement)> {
            let v = value(x)?;
            let d = drift_of(&v)?;
            if let Some((j, xp, vp, dp)) = &prev {
                let c = j / per_cell;
                let dt = grid[k] - grid[*j];
                let two = GridPath::new(vec![grid[*j], grid[k]], vec![xp.clone(), x.clone()])?;
                let ito = LevyArea::new(Arc::new(two), AreaVariant::Ito)?.with_cache_capacity(0);
                let strat = ito.with_variant(AreaVariant::Stratonovich)?;
                // The two germs share U♯δX; only the area terms differ.
                let gi = germ(&ito, vp, 0, 1)?;
                let areas_only = BiprocessValue {
                    u: TensorElement2::zero(n, Config::Config2),
                    u1: vp.u1.clone(),
                    u2: vp.u2.clone(),
                };
                let correction = &germ(&strat, &areas_only, 0, 1)? - &germ(&ito, &areas_only, 0, 1)?;
                out.strat[c] = &out.strat[c] + &(&gi + &correction);
                out.ito[c] = &out.ito[c] + &gi;
                out.drift[c] = out.drift[c].axpy(cr(0.5 * dt), &(dp + &d));
                let dx = x - xp;
                out.qv[c] = &out.qv[c] + &dx.matmul(&dx);
            }
            Ok((v, d))
        };
        match step() {
            Ok((v, d)) => {
                if k % per_cell == 0 {
                    out.values.push(x.clone());
                }
                prev = Some((k, x.clone(), v, d));
            }
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// ‖(t−s)·1 − Σ(δX_k)²‖ over coarse pairs, streamed.
pub fn quadratic_variation_defect(n: usize, level: u32, cells: usize, seed: u64, path_id: u64) -> Result<f64> {
    let steps = 1usize << level;
    if cells == 0 || !cells.is_power_of_two() || cells > steps {
        return Err(Error::usage("coarse cells must be a power of two not above the step count"));
    }
    let per_cell = steps / cells;
    let mut qv = vec![AlgebraElement::zeros(n); cells];
    let mut prev: Option<AlgebraElement> = None;
    for_each_dyadic_value(Space::new(n)?, 1.0, level, seed, path_id, |k, x| {
        if let Some(p) = &prev {
            let d = x - p;
            let c = (k - 1) / per_cell;
            qv[c] = &qv[c] + &d.matmul(&d);
        }
        prev = Some(x.clone());
    });
    let pass = StreamedPass {
        times: (0..=cells).map(|c| c as f64 / cells as f64).collect(),
        values: vec![AlgebraElement::zeros(n); cells + 1],
        ito: Vec::new(),
        strat: Vec::new(),
        drift: Vec::new(),
        qv,
    };
    Ok(pass.defect())
}

/// ∂f(X) with 𝕌¹ = 𝕌² = ∂²f(X).
pub fn derivative_biprocess(f: &FunctionSpec, x: &AlgebraElement) -> Result<BiprocessValue> {
    let d2 = second_tensor_derivative(f, x)?;
    Ok(BiprocessValue {
        u: tensor_derivative(f, x)?,
        u1: d2.clone(),
        u2: d2,
    })
}

/// Sup-norm residuals of the Itô formula over coarse pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItoFormulaResiduals {
    /// δf(X) − J^S(∂f(X)♯dX).
    pub strat: f64,
    /// δf(X) − J^I(∂f(X)♯dX) − ∫(Id×φ×Id)(∂²f(X_u))du.
    pub ito: f64,
    /// ‖(δf − J^S) + ((t−s)1 − Σ(δX_k)²)‖: zero exactly when f(x) = x².
    pub strat_plus_defect: f64,
    pub defect: f64,
    /// max ‖X‖ over the coarse points.
    pub sup_x: f64,
}

fn residuals_from(f: &FunctionSpec, pass: &StreamedPass) -> Result<ItoFormulaResiduals> {
    let fx: Vec<AlgebraElement> = pass.values.iter().map(|x| apply_function(f, x)).collect::<Result<_>>()?;
    let m = pass.values.len();
    let r_s: Vec<AlgebraElement> = (0..m - 1).map(|c| &(&fx[c + 1] - &fx[c]) - &pass.strat[c]).collect();
    let r_i: Vec<AlgebraElement> = (0..m - 1)
        .map(|c| &(&(&fx[c + 1] - &fx[c]) - &pass.ito[c]) - &pass.drift[c])
        .collect();
    let n = pass.values[0].dim();
    Ok(ItoFormulaResiduals {
        strat: pass.sup_over_pairs(|a, b| StreamedPass::span(&r_s, a, b)),
        ito: pass.sup_over_pairs(|a, b| StreamedPass::span(&r_i, a, b)),
        strat_plus_defect: pass.sup_over_pairs(|a, b| {
            let defect = &AlgebraElement::identity(n).scale_re(pass.times[b] - pass.times[a]) - &StreamedPass::span(&pass.qv, a, b);
            &StreamedPass::span(&r_s, a, b) + &defect
        }),
        defect: pass.defect(),
        sup_x: pass.sup_value_norm(),
    })
}

/// Itô-formula residuals on a simulated path, computed in one streaming pass
/// at the finest level.
pub fn ito_formula_streamed(f: &FunctionSpec, n: usize, level: u32, cells: usize, seed: u64, path_id: u64) -> Result<ItoFormulaResiduals> {
    let pass = stream_finest_level(Space::new(n)?, level, seed, path_id, cells, |x| derivative_biprocess(f, x))?;
    residuals_from(f, &pass)
}

/// Itô-formula residuals on a stored path via the refined rough integral;
/// the drift integral uses the trapezoid rule on the fine grid.
pub fn ito_formula_check(f: &FunctionSpec, path: Arc<GridPath>, coarse: &[usize], opts: &IntegralOptions) -> Result<ItoFormulaResiduals> {
    let n = path.dim();
    let pp = path.clone();
    let ff = f.clone();
    let src = FnBiprocess {
        n,
        stride: 1,
        f: move |i: usize| derivative_biprocess(&ff, pp.value(i)),
    };
    let strat = LevyArea::stratonovich(path.clone());
    let ito = strat.with_variant(AreaVariant::Ito)?;
    let js = rough_integral(&src, &strat, coarse, opts)?;
    let ji = rough_integral(&src, &ito, coarse, opts)?;
    let m = coarse.len();
    let mut drift = Vec::with_capacity(m - 1);
    let mut qv = Vec::with_capacity(m - 1);
    for w in coarse.windows(2) {
        let mut d = AlgebraElement::zeros(n);
        let mut q = AlgebraElement::zeros(n);
        let mut left = derivative_biprocess(f, path.value(w[0]))?;
        for k in w[0]..w[1] {
            let right = derivative_biprocess(f, path.value(k + 1))?;
            let dt = path.time(k + 1) - path.time(k);
            let a = left.u1.add(&left.u2)?.partial_trace_mid();
            let b = right.u1.add(&right.u2)?.partial_trace_mid();
            d = d.axpy(cr(0.25 * dt), &(&a + &b));
            let dx = path.increment(k, k + 1);
            q = &q + &dx.matmul(&dx);
            left = right;
        }
        drift.push(d);
        qv.push(q);
    }
    let pass = StreamedPass {
        times: coarse.iter().map(|&i| path.time(i)).collect(),
        values: coarse.iter().map(|&i| path.value(i).clone()).collect(),
        ito: (0..m - 1).map(|c| ji.value(c, c + 1)).collect(),
        strat: (0..m - 1).map(|c| js.value(c, c + 1)).collect(),
        drift,
        qv,
    };
    residuals_from(f, &pass)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ItoFormulaConfig {
    pub n: usize,
    pub level: u32,
    pub cells: usize,
    pub seeds: usize,
    pub functions: Vec<FunctionSpec>,
    /// Bound on ‖(t−s)1 − Σ(δX_k)²‖.
    pub defect_limit: f64,
    /// Bound on residual/max(1, sup‖X‖)^deg for degree ≥ 3.
    pub normalized_limit: f64,
    /// Further seeds on which only the quadratic-variation defect is measured.
    pub defect_only_seeds: usize,
}

impl Default for ItoFormulaConfig {
    fn default() -> Self {
        ItoFormulaConfig {
            n: 128,
            level: 10,
            cells: 4,
            seeds: 3,
            functions: vec![FunctionSpec::identity(), FunctionSpec::monomial(2), FunctionSpec::monomial(3)],
            defect_limit: 0.1,
            normalized_limit: 0.05,
            defect_only_seeds: 0,
        }
    }
}

impl ItoFormulaConfig {
    pub fn validate(&self) -> Result<()> {
        Space::new(self.n)?;
        if self.level > 16 || self.seeds == 0 || self.functions.is_empty() {
            return Err(Error::usage("need level <= 16, seeds > 0 and at least one function"));
        }
        if self.cells == 0 || !self.cells.is_power_of_two() || self.cells > (1usize << self.level) {
            return Err(Error::usage("cells must be a power of two not above 2^level"));
        }
        for f in &self.functions {
            f.validate()?;
        }
        Ok(())
    }
}

/// Both forms of the Itô formula, per function and seed, with the
/// quadratic-variation defect that drives the residuals.
pub fn ito_formula_study(cfg: &ItoFormulaConfig, seed: u64) -> Result<StudyReport> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.functions.len())
        .flat_map(|f| (0..cfg.seeds).map(move |s| (f, s)))
        .collect();
    let results: Vec<ItoFormulaResiduals> = jobs
        .par_iter()
        .map(|&(f, s)| ito_formula_streamed(&cfg.functions[f], cfg.n, cfg.level, cfg.cells, seed, s as u64))
        .collect::<Result<_>>()?;
    let mut table = Table::new(&[
        "function", "seed", "residual_strat", "residual_ito", "defect", "strat_plus_defect", "sup_x", "normalized",
    ]);
    let mut checks = Vec::new();
    for (&(fi, s), r) in jobs.iter().zip(&results) {
        let f = &cfg.functions[fi];
        let deg = f.degree().unwrap_or(0);
        let scale = r.sup_x.max(1.0).powi(deg.max(1) as i32);
        let normalized = r.strat / scale;
        table.push(vec![
            fi.to_string(),
            s.to_string(),
            num(r.strat),
            num(r.ito),
            num(r.defect),
            num(r.strat_plus_defect),
            num(r.sup_x),
            num(normalized),
        ]);
        let tag = format!("function {fi} seed {s}");
        checks.push(Check::at_most("defect", r.defect, cfg.defect_limit, tag.clone()));
        match (f.is_polynomial(), deg) {
            (true, 0 | 1) => {
                checks.push(Check::at_most("linear residual", r.strat.max(r.ito), 1e-10 * r.sup_x.max(1.0), tag));
            }
            (true, 2) => {
                let f2 = f.coefficients().map(|c| c[2].re).unwrap_or(1.0);
                checks.push(Check::at_most(
                    "quadratic residual equals defect",
                    r.strat_plus_defect,
                    1e-10 * f2.abs().max(1.0) * r.sup_x.max(1.0),
                    format!("{tag}, exact when the quadratic coefficient is 1"),
                ));
                checks.push(Check::at_most(
                    "quadratic residual bounded by defect",
                    r.strat,
                    f2.abs() * r.defect * (1.0 + 1e-9) + 1e-10,
                    tag,
                ));
            }
            _ => checks.push(Check::at_most("normalized residual", normalized, cfg.normalized_limit, tag)),
        }
    }
    let extra: Vec<f64> = (cfg.seeds..cfg.seeds + cfg.defect_only_seeds)
        .into_par_iter()
        .map(|s| quadratic_variation_defect(cfg.n, cfg.level, cfg.cells, seed, s as u64))
        .collect::<Result<_>>()?;
    for (k, d) in extra.iter().enumerate() {
        let s = cfg.seeds + k;
        let blank = String::new;
        table.push(vec!["none".into(), s.to_string(), blank(), blank(), num(*d), blank(), blank(), blank()]);
        checks.push(Check::at_most("defect", *d, cfg.defect_limit, format!("seed {s}")));
    }
    Ok(StudyReport {
        name: "ito-formula".into(),
        table,
        checks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrandPair {
    pub f: Vec<FunctionSpec>,
    pub g: Vec<FunctionSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ItoStratoConfig {
    pub n: usize,
    pub level: u32,
    pub cells: usize,
    pub seeds: usize,
    pub pairs: Vec<IntegrandPair>,
    pub limit: f64,
}

impl Default for ItoStratoConfig {
    fn default() -> Self {
        ItoStratoConfig {
            n: 128,
            level: 10,
            cells: 4,
            seeds: 1,
            pairs: vec![
                IntegrandPair {
                    f: vec![FunctionSpec::constant(1.0)],
                    g: vec![FunctionSpec::constant(1.0)],
                },
                IntegrandPair {
                    f: vec![FunctionSpec::monomial(2)],
                    g: vec![FunctionSpec::constant(1.0)],
                },
                IntegrandPair {
                    f: vec![FunctionSpec::poly(&[1.0, -0.4, 0.3]), FunctionSpec::poly(&[0.0, 0.0, 0.0, 0.5])],
                    g: vec![FunctionSpec::poly(&[0.2, 1.0]), FunctionSpec::poly(&[1.0, 0.0, -0.25])],
                },
            ],
            limit: 5e-3,
        }
    }
}

impl ItoStratoConfig {
    pub fn validate(&self) -> Result<()> {
        Space::new(self.n)?;
        if self.level > 16 || self.seeds == 0 || self.pairs.is_empty() {
            return Err(Error::usage("need level <= 16, seeds > 0 and at least one pair"));
        }
        if self.cells == 0 || !self.cells.is_power_of_two() || self.cells > (1usize << self.level) {
            return Err(Error::usage("cells must be a power of two not above 2^level"));
        }
        for p in &self.pairs {
            if p.f.len() != p.g.len() || p.f.is_empty() {
                return Err(Error::usage("each pair needs f and g lists of equal nonzero length"));
            }
            for h in p.f.iter().chain(&p.g) {
                h.validate()?;
            }
        }
        Ok(())
    }
}

/// ‖(J^S − J^I)_{st} − ½∫(Id×φ×Id)[𝕌¹+𝕌²]du‖ over coarse pairs for the lift
/// of Σ f_i(X)⊗g_i(X) along X itself.
pub fn ito_strato_gap(pair: &IntegrandPair, n: usize, level: u32, cells: usize, seed: u64, path_id: u64) -> Result<f64> {
    let unit = TensorElement2::unit(n, Config::Config2);
    let pass = stream_finest_level(Space::new(n)?, level, seed, path_id, cells, |x| lift_value(&pair.f, &pair.g, x, &unit))?;
    let gap: Vec<AlgebraElement> = (0..cells).map(|c| &(&pass.strat[c] - &pass.ito[c]) - &pass.drift[c]).collect();
    Ok(pass.sup_over_pairs(|a, b| StreamedPass::span(&gap, a, b)))
}

pub fn ito_strato_study(cfg: &ItoStratoConfig, seed: u64) -> Result<StudyReport> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.pairs.len())
        .flat_map(|p| (0..cfg.seeds).map(move |s| (p, s)))
        .collect();
    let gaps: Vec<f64> = jobs
        .par_iter()
        .map(|&(p, s)| ito_strato_gap(&cfg.pairs[p], cfg.n, cfg.level, cfg.cells, seed, s as u64))
        .collect::<Result<_>>()?;
    let mut table = Table::new(&["pair", "seed", "residual"]);
    let mut checks = Vec::new();
    for (&(p, s), g) in jobs.iter().zip(&gaps) {
        table.push(vec![p.to_string(), s.to_string(), num(*g)]);
        checks.push(Check::at_most("ito-strato residual", *g, cfg.limit, format!("pair {p} seed {s}")));
    }
    Ok(StudyReport {
        name: "ito-strato".into(),
        table,
        checks,
    })
}

/// Burkholder–Gundy sides for a step integrand on a partition of the path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BgOutcome {
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// lhs = ‖Σ V_i⊗(δX)_i‖ in L∞(φ⊗φ), rhs = 2·√(Σ‖V_i‖²Δt_i), V_i held on
/// [t_{d_i}, t_{d_{i+1}}).
pub fn bg_inequality_check(v: &[AlgebraElement], path: &GridPath, d: &[usize], slack: f64) -> Result<BgOutcome> {
    if v.len() + 1 != d.len() {
        return Err(Error::usage("need one integrand value per partition cell"));
    }
    let mut sum = TensorElement2::zero(path.dim(), Config::Config1);
    let mut energy = 0.0;
    for (vi, w) in v.iter().zip(d.windows(2)) {
        sum.push(vi.clone(), path.increment(w[0], w[1]));
        energy += vi.op_norm().powi(2) * (path.time(w[1]) - path.time(w[0]));
    }
    let lhs = sum.spatial_norm()?;
    let rhs = 2.0 * energy.sqrt();
    Ok(BgOutcome {
        lhs,
        rhs,
        pass: lhs <= slack * rhs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BgConfig {
    pub n: usize,
    pub steps: usize,
    pub seeds: usize,
    pub slack: f64,
}

impl Default for BgConfig {
    fn default() -> Self {
        BgConfig {
            n: 64,
            steps: 16,
            seeds: 20,
            slack: 1.1,
        }
    }
}

/// Random adapted integrand V_i = c₀ + c₁X_{t_i} + c₂(X_{t_i}² − t_i), c ~ U(−1, 1).
fn adapted_integrand(path: &GridPath, i: usize, seed: u64, item: u64) -> AlgebraElement {
    use rand::Rng;
    let mut rng = aux_rng(seed, INTEGRAND_STREAM, item, i as u64);
    let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let x = path.value(i);
    let n = x.dim();
    let sq = &x.matmul(x) - &AlgebraElement::identity(n).scale_re(path.time(i));
    AlgebraElement::identity(n).scale_re(c[0]).axpy(cr(c[1]), x).axpy(cr(c[2]), &sq)
}

impl BgConfig {
    pub fn validate(&self) -> Result<()> {
        Space::new(self.n)?;
        if self.steps == 0 || self.seeds == 0 {
            return Err(Error::usage("steps and seeds must be positive"));
        }
        if !(self.slack >= 1.0) {
            return Err(Error::usage("slack must be at least 1"));
        }
        Ok(())
    }
}

pub fn bg_study(cfg: &BgConfig, seed: u64) -> Result<StudyReport> {
    cfg.validate()?;
    let grid = uniform_grid(1.0, cfg.steps);
    let d: Vec<usize> = (0..=cfg.steps).collect();
    let kinds = ["zero", "unit", "adapted"];
    let rows: Vec<Vec<BgOutcome>> = (0..cfg.seeds)
        .into_par_iter()
        .map(|i| -> Result<Vec<BgOutcome>> {
            let path = simulate_free_bm(Space::new(cfg.n)?, &grid, seed, i as u64)?;
            let zero = vec![AlgebraElement::zeros(cfg.n); cfg.steps];
            let unit = vec![AlgebraElement::identity(cfg.n); cfg.steps];
            let adapted: Vec<AlgebraElement> = (0..cfg.steps).map(|k| adapted_integrand(&path, k, seed, i as u64)).collect();
            [zero, unit, adapted]
                .iter()
                .map(|v| bg_inequality_check(v, &path, &d, cfg.slack))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new(&["seed", "integrand", "lhs", "rhs", "ratio", "pass"]);
    let mut total = 0usize;
    let mut passed = 0usize;
    let mut worst = (0.0f64, String::new());
    for (i, r) in rows.iter().enumerate() {
        for (kind, o) in kinds.iter().zip(r) {
            let ratio = if o.rhs > 0.0 { o.lhs / o.rhs } else { 0.0 };
            table.push(vec![i.to_string(), kind.to_string(), num(o.lhs), num(o.rhs), num(ratio), o.pass.to_string()]);
            total += 1;
            passed += o.pass as usize;
            if ratio > worst.0 {
                worst = (ratio, format!("seed {i} {kind}"));
            }
        }
    }
    let checks = vec![
        Check::at_least("pass rate", passed as f64 / total as f64, 1.0, format!("{passed}/{total}")),
        Check::at_most("largest lhs/rhs", worst.0, cfg.slack, worst.1),
    ];
    Ok(StudyReport {
        name: "bg".into(),
        table,
        checks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonextensionConfig {
    pub n: usize,
    pub ns: Vec<usize>,
    pub seeds: usize,
    pub slack: f64,
}

impl Default for NonextensionConfig {
    fn default() -> Self {
        NonextensionConfig {
            n: 256,
            ns: vec![1, 2, 4, 8, 16],
            seeds: 1,
            slack: 1.1,
        }
    }
}

/// a_n = ‖ΣY_i²‖_{L²(φ)} and b_n = ‖ΣY_i⊗Y_i‖_{L∞(φ⊗φ)} for unit-spaced
/// increments Y_i = X_{i+1} − X_i.
impl NonextensionConfig {
    pub fn validate(&self) -> Result<()> {
        Space::new(self.n)?;
        if self.ns.is_empty() || self.ns.contains(&0) || self.seeds == 0 {
            return Err(Error::usage("ns must be positive and seeds nonzero"));
        }
        if !(self.slack >= 1.0) {
            return Err(Error::usage("slack must be at least 1"));
        }
        Ok(())
    }
}

pub fn nonextension_demo(cfg: &NonextensionConfig, seed: u64) -> Result<StudyReport> {
    cfg.validate()?;
    let top = *cfg.ns.iter().max().unwrap();
    let rows: Vec<Vec<(f64, f64)>> = (0..cfg.seeds)
        .into_par_iter()
        .map(|i| -> Result<Vec<(f64, f64)>> {
            let path = simulate_free_bm(Space::new(cfg.n)?, &uniform_grid(top as f64, top), seed, i as u64)?;
            let ys: Vec<AlgebraElement> = (0..top).map(|k| path.increment(k, k + 1)).collect();
            cfg.ns
                .iter()
                .map(|&m| -> Result<(f64, f64)> {
                    let mut sq = AlgebraElement::zeros(cfg.n);
                    let mut t = TensorElement2::zero(cfg.n, Config::Config1);
                    for y in &ys[..m] {
                        sq = &sq + &y.matmul(y);
                        t.push(y.clone(), y.clone());
                    }
                    Ok((sq.l2_norm(), t.spatial_norm()?))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new(&["seed", "n", "a_n", "b_n", "ratio", "b_n_over_sqrt_n"]);
    let mut checks = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        for (&m, &(a, b)) in cfg.ns.iter().zip(r) {
            let sq = (m as f64).sqrt();
            table.push(vec![i.to_string(), m.to_string(), num(a), num(b), num(a / b), num(b / sq)]);
            let tag = format!("seed {i} n {m}");
            checks.push(Check::at_least("a_n >= 0.9 n", a / m as f64, 0.9, tag.clone()));
            checks.push(Check::at_most("b_n / sqrt(n)", b / sq, 4.0 * cfg.slack, tag));
        }
        let ratio = |m: usize| cfg.ns.iter().position(|&x| x == m).map(|k| r[k].0 / r[k].1);
        if let (Some(r4), Some(r16)) = (ratio(4), ratio(16)) {
            checks.push(Check::at_least("ratio growth n=4 to n=16", r16 / r4, 1.6, format!("seed {i}")));
        }
    }
    Ok(StudyReport {
        name: "nonextension".into(),
        table,
        checks,
    })
}

/// ‖Σ_{i<k} Y_i Z Y_i − φ(Z) Σ Y_i²‖ for k increments of mesh 1/k and Z = W²
/// with W an independent GUE matrix.
pub fn free_independence_proxy(n: usize, k: usize, seed: u64, item: u64) -> Result<f64> {
    let path = simulate_free_bm(Space::new(n)?, &uniform_grid(1.0, k), seed, AUX_BASE + FREE_STREAM + item)?;
    let w = gue(n, 1.0, &mut aux_rng(seed, FREE_STREAM, item, k as u64))?;
    let z = w.matmul(&w);
    let tz = z.trace();
    let mut acc = AlgebraElement::zeros(n);
    for i in 0..k {
        let y = path.increment(i, i + 1);
        acc = &acc + &(&AlgebraElement::product(n, &[&y, &z, &y]) - &y.matmul(&y).scale(tz));
    }
    Ok(acc.op_norm())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    pub n: usize,
    pub level: u32,
    pub cells: usize,
    pub gamma: f64,
    pub amplitudes: Vec<f64>,
    pub f: Vec<FunctionSpec>,
    pub initial_scale: f64,
    pub moment_ns: Vec<usize>,
    pub moment_ps: Vec<usize>,
    pub moment_qs: Vec<f64>,
    pub proxy_dims: Vec<usize>,
    pub proxy_ks: Vec<usize>,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig {
            n: 32,
            level: 8,
            cells: 32,
            gamma: 0.4,
            amplitudes: vec![0.125, 0.25, 0.5, 1.0],
            f: vec![FunctionSpec::identity()],
            initial_scale: 0.2,
            moment_ns: vec![1, 2, 4, 8],
            moment_ps: vec![1, 2, 3],
            moment_qs: vec![-0.5, 0.0, 0.5],
            proxy_dims: vec![64, 128, 256],
            proxy_ks: vec![4, 16, 64],
        }
    }
}

/// Solution seminorms against the driving amplitude, the combinatorial
/// moment bound, and the free-independence proxy.
impl BoundsConfig {
    pub fn validate(&self) -> Result<()> {
        Space::new(self.n)?;
        if self.level > 14 || self.cells == 0 || self.cells > (1usize << self.level) || (1usize << self.level) % self.cells != 0 {
            return Err(Error::usage("cells must divide 2^level, level <= 14"));
        }
        if self.amplitudes.len() < 3 || self.amplitudes.windows(2).any(|w| w[1] <= w[0]) || self.amplitudes[0] <= 0.0 {
            return Err(Error::usage("need at least three increasing positive amplitudes"));
        }
        if !(self.gamma > 0.0 && self.gamma < 0.5) {
            return Err(Error::usage("gamma must lie in (0, 1/2)"));
        }
        if self.f.is_empty() {
            return Err(Error::usage("f must be nonempty"));
        }
        for f in &self.f {
            f.validate()?;
        }
        for &d in &self.proxy_dims {
            Space::new(d)?;
        }
        if self.proxy_ks.iter().any(|&k| k == 0) || self.moment_qs.iter().any(|q| !(q.abs() < 1.0)) {
            return Err(Error::usage("proxy_ks must be positive and |q| < 1"));
        }
        Ok(())
    }
}

pub fn bounds_study(cfg: &BoundsConfig, seed: u64) -> Result<StudyReport> {
    cfg.validate()?;
    let mut table = Table::new(&["section", "x", "y", "value", "reference", "pass"]);
    let mut checks = Vec::new();

    let steps = 1usize << cfg.level;
    let base = simulate_free_bm(Space::new(cfg.n)?, &uniform_grid(1.0, steps), seed, 0)?;
    let a = random_initial(cfg.n, cfg.initial_scale, seed, 0)?;
    let g = paired_g(&cfg.f, PairingMode::ReverseStar);
    let coarse: Vec<usize> = (0..=cfg.cells).map(|k| k * steps / cfg.cells).collect();
    let norms: Vec<f64> = cfg
        .amplitudes
        .par_iter()
        .map(|&lam| -> Result<f64> {
            let path = Arc::new(base.combine(lam, &base, 0.0)?);
            let area = LevyArea::ito(path).with_cache_capacity(0);
            let p = SdeProblem::new(a.clone(), cfg.f.clone(), g.clone());
            let y = solve_rough_sde(&p, &area, &coarse, Scheme::OneStep)?;
            Ok(picard_bound_report(&y, &area, cfg.gamma)?.total)
        })
        .collect::<Result<_>>()?;
    for (lam, v) in cfg.amplitudes.iter().zip(&norms) {
        table.push(vec!["seminorm".into(), num(*lam), String::new(), num(*v), String::new(), String::new()]);
    }
    let k = norms.len();
    let (slope, _) = loglog_fit(&cfg.amplitudes[..k - 1], &norms[..k - 1]);
    let predicted = norms[k - 2] * (cfg.amplitudes[k - 1] / cfg.amplitudes[k - 2]).powf(slope);
    checks.push(Check::at_most(
        "seminorm growth within fitted prediction",
        norms[k - 1] / predicted,
        1.5,
        format!("fitted exponent {slope}"),
    ));

    for &q in &cfg.moment_qs {
        for &m in &cfg.moment_ns {
            for &p in &cfg.moment_ps {
                let r = moment_bound_check(m, p, q)?;
                let ok = 0.0 <= r.sum && r.sum <= r.bound;
                table.push(vec![
                    "moment-bound".into(),
                    num(q),
                    format!("{m}:{p}"),
                    num(r.sum),
                    num(r.bound),
                    ok.to_string(),
                ]);
                checks.push(Check::at_most("moment sum within bound", r.sum / r.bound, 1.0, format!("q {q} n {m} p {p}")));
            }
        }
    }

    let proxy_jobs: Vec<(usize, usize)> = cfg
        .proxy_dims
        .iter()
        .flat_map(|&d| cfg.proxy_ks.iter().map(move |&k| (d, k)))
        .collect();
    let proxy: Vec<f64> = proxy_jobs
        .par_iter()
        .map(|&(d, k)| free_independence_proxy(d, k, seed, 0))
        .collect::<Result<_>>()?;
    for (&(d, k), v) in proxy_jobs.iter().zip(&proxy) {
        table.push(vec!["free-proxy".into(), d.to_string(), k.to_string(), num(*v), String::new(), String::new()]);
    }
    for &d in &cfg.proxy_dims {
        let (ks, vs): (Vec<f64>, Vec<f64>) = proxy_jobs
            .iter()
            .zip(&proxy)
            .filter(|((dd, _), _)| *dd == d)
            .map(|((_, k), v)| (*k as f64, *v))
            .unzip();
        if ks.len() >= 2 {
            let (slope, r2) = loglog_fit(&ks, &vs);
            checks.push(Check::at_most("free proxy decay in k", slope, -0.25, format!("N {d}, R^2 = {r2}")));
        }
    }
    Ok(StudyReport {
        name: "bounds".into(),
        table,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rough::Refinement;

    fn bm(n: usize, steps: usize, seed: u64) -> Arc<GridPath> {
        Arc::new(simulate_free_bm(Space::new(n).unwrap(), &uniform_grid(1.0, steps), seed, 0).unwrap())
    }

    #[test]
    fn interpolation_examples() {
        let p = bm(3, 16, 1);
        let all: Vec<usize> = (0..17).collect();
        let same = linear_interpolation(&p, &all).unwrap();
        for i in 0..17 {
            assert!(same.value(i).max_abs_diff(p.value(i)) == 0.0);
        }
        let line = linear_interpolation(&p, &[0, 16]).unwrap();
        let mid = p.value(16).scale_re(0.5);
        assert!(line.value(8).max_abs_diff(&mid) < 1e-15);
    }

    #[test]
    fn interp_area_examples() {
        let p = bm(3, 16, 2);
        let u = probe_tensors(3, 2, 2, 0).unwrap().pop().unwrap();
        let d = vec![0, 4, 8, 12, 16];
        // a whole cell: ½ U♯δX · δX
        let dx = p.increment(4, 8);
        let cell = interp_area(&p, &d, &u, 4, 8).unwrap();
        assert!(cell.max_abs_diff(&u.sharp(&dx).matmul(&dx).scale_re(0.5)) < 1e-14);
        // Chen across cell boundaries, including interior start points
        let a = LevyArea::new(p.clone(), AreaVariant::Interpolated(d.clone())).unwrap();
        let (s, m, t) = (2, 9, 15);
        let lhs = a.eval(s, t, &u).unwrap();
        let rhs = &(&a.eval(s, m, &u).unwrap() + &a.eval(m, t, &u).unwrap())
            + &u.sharp(&a.increment(s, m)).matmul(&a.increment(m, t));
        assert!(lhs.max_abs_diff(&rhs) < 1e-13);
        // a globally linear path is its own interpolation
        let (b0, b1) = (p.value(16).clone(), p.value(8).clone());
        let line = Arc::new(GridPath::from_fn(uniform_grid(1.0, 16), move |t| b0.scale_re(t).axpy(cr(t * t - t), &b1)).unwrap());
        let lin = Arc::new(linear_interpolation(&line, &[0, 16]).unwrap());
        let smooth = LevyArea::new(lin.clone(), AreaVariant::SmoothLebesgue).unwrap();
        assert!(interp_area(&lin, &[0, 16], &u, 3, 11).unwrap().max_abs_diff(&smooth.eval(3, 11, &u).unwrap()) < 1e-14);
    }

    #[test]
    fn chen_pairs_match_direct_evaluation() {
        let p = bm(4, 32, 3);
        let u = probe_tensors(4, 2, 3, 0).unwrap().pop().unwrap();
        let e = vec![0, 8, 16, 24, 32];
        for v in [AreaVariant::Ito, AreaVariant::Stratonovich, AreaVariant::Interpolated(vec![0, 2, 8, 20, 24, 32]), AreaVariant::SmoothLebesgue] {
            let a = LevyArea::new(p.clone(), v).unwrap();
            for (s, t, x) in chen_pairs(&a, &e, &u).unwrap() {
                assert!(x.max_abs_diff(&a.eval(s, t, &u).unwrap()) < 1e-13);
            }
        }
    }

    #[test]
    fn interp_tensor_area_of_full_grid_is_smooth_area() {
        let p = bm(3, 8, 4);
        let all: Vec<usize> = (0..9).collect();
        let t = interp_tensor_area(&p, &all, 0, 8).unwrap();
        let mut expect = tensor_area(&p, 0, 8).unwrap();
        for k in 0..8 {
            let d = p.increment(k, k + 1);
            expect.push(d.scale_re(0.5), d);
        }
        let z = probe_tensors(3, 2, 4, 1).unwrap()[1].terms()[0].0.clone();
        assert!(t.apply_flat(&z).max_abs_diff(&expect.apply_flat(&z)) < 1e-13);
    }

    #[test]
    fn streaming_matches_rough_integral_at_finest_level() {
        let (n, level) = (4, 6);
        let f = FunctionSpec::monomial(3);
        let s = ito_formula_streamed(&f, n, level, 4, 9, 0).unwrap();
        let path = Arc::new(simulate_free_bm(Space::new(n).unwrap(), &uniform_grid(1.0, 64), 9, 0).unwrap());
        let opts = IntegralOptions {
            refinement: Refinement::FinestPair,
            ..Default::default()
        };
        let r = ito_formula_check(&f, path, &[0, 16, 32, 48, 64], &opts).unwrap();
        assert!((s.strat - r.strat).abs() < 1e-12);
        assert!((s.ito - r.ito).abs() < 1e-12);
        assert!((s.defect - r.defect).abs() < 1e-12);
    }

    #[test]
    fn ito_formula_small_cases() {
        let x = ito_formula_streamed(&FunctionSpec::identity(), 8, 6, 4, 5, 0).unwrap();
        assert!(x.strat < 1e-13 && x.ito < 1e-13);
        let sq = ito_formula_streamed(&FunctionSpec::monomial(2), 8, 6, 4, 5, 0).unwrap();
        assert!(sq.strat_plus_defect < 1e-12);
        assert_eq!(quadratic_variation_defect(8, 6, 4, 5, 0).unwrap(), sq.defect);
        assert!((sq.strat - sq.defect).abs() < 1e-12);
        // Itô form carries the same defect through the drift quadrature
        assert!((sq.ito - sq.defect).abs() < 1e-12);
    }

    #[test]
    fn ito_strato_constant_integrand_is_exact() {
        let pair = IntegrandPair {
            f: vec![FunctionSpec::constant(1.0)],
            g: vec![FunctionSpec::constant(1.0)],
        };
        assert!(ito_strato_gap(&pair, 6, 6, 4, 1, 0).unwrap() < 1e-14);
        let sq = IntegrandPair {
            f: vec![FunctionSpec::monomial(2)],
            g: vec![FunctionSpec::constant(1.0)],
        };
        // only trapezoid-vs-left-point error remains: ¼Δt‖g(T) − g(0)‖
        assert!(ito_strato_gap(&sq, 6, 8, 4, 1, 0).unwrap() < 1e-2);
    }

    #[test]
    fn bg_examples() {
        let p = bm(16, 8, 6);
        let d: Vec<usize> = (0..9).collect();
        let zero = bg_inequality_check(&vec![AlgebraElement::zeros(16); 8], &p, &d, 1.1).unwrap();
        assert_eq!((zero.lhs, zero.rhs, zero.pass), (0.0, 0.0, true));
        let unit = bg_inequality_check(&vec![AlgebraElement::identity(16); 8], &p, &d, 1.1).unwrap();
        assert!((unit.rhs - 2.0).abs() < 1e-12);
        assert!((unit.lhs - p.value(8).op_norm()).abs() < 1e-9);
    }

    #[test]
    fn table_round_trip() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["x,y".into(), num(0.1)]);
        let s = t.to_csv().unwrap();
        assert_eq!(s, "a,b\n\"x,y\",0.1\n");
        assert_eq!(t.column("b").unwrap(), vec![0.1]);
    }

    #[test]
    fn solution_study_constant_coefficients_vanish() {
        let cfg = SolutionConvergenceConfig {
            n: 4,
            fine_level: 6,
            reference_level: 5,
            mesh_levels: vec![2, 3, 4],
            seeds: 2,
            f: vec![FunctionSpec::constant(1.0)],
            ..Default::default()
        };
        let r = solution_convergence_study(&cfg, 3).unwrap();
        assert!(r.passed(), "{:?}", r.checks);
        assert!(r.table.column("distance").unwrap().iter().all(|d| *d < 1e-12));
    }

    #[test]
    fn studies_are_deterministic() {
        let cfg = AreaConvergenceConfig {
            n: 4,
            fine_level: 6,
            mesh_levels: vec![2, 3, 4],
            seeds: 2,
            spatial_dim: 3,
            ..Default::default()
        };
        let a = area_convergence_study(&cfg, 11).unwrap().table.to_csv().unwrap();
        let b = area_convergence_study(&cfg, 11).unwrap().table.to_csv().unwrap();
        assert_eq!(a, b);
    }
}
