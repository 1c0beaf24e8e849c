use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use ncrough::algebra::{cr, AlgebraElement, Space};
use ncrough::experiments::{
    area_convergence_study, bg_study, bounds_study, ito_formula_check, ito_formula_study, ito_strato_study,
    nonextension_demo, num, random_initial, solution_convergence_study, AreaConvergenceConfig, BgConfig, BoundsConfig,
    ItoFormulaConfig, ItoStratoConfig, NonextensionConfig, SolutionConvergenceConfig, StudyReport, Table,
};
use ncrough::functional::FunctionSpec;
use ncrough::matrix_model::{read_path, simulate_free_bm, uniform_grid, write_path, GridPath};
use ncrough::pairing::{density_moment, q_joint_moment, MomentQuery};
use ncrough::rough::{AreaVariant, IntegralOptions, LevyArea, Refinement};
use ncrough::sde::{paired_g, solve_rough_sde, PairingMode, Scheme, SdeProblem};

use crate::CliError;

/// Files produced by a command, written only once the computation is done.
#[derive(Default)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
    /// Failing checks, one line each; nonempty means exit 3.
    pub failures: Vec<String>,
    /// Extra manifest entries.
    pub summary: serde_json::Map<String, Value>,
}

/// Largest moment order accepted on the command line.
pub const MAX_ORDER: usize = 20;

pub fn moments(q: f64, order: usize) -> Result<Table, CliError> {
    if !(q.abs() < 1.0) {
        return Err(CliError::Usage(format!("q must satisfy |q| < 1, got {q}")));
    }
    if order == 0 || order > MAX_ORDER {
        return Err(CliError::Usage(format!("order must lie in 1..={MAX_ORDER}")));
    }
    let mut table = Table::new(&["order", "pairing", "density", "difference"]);
    for r in 1..=order {
        let pairing = q_joint_moment(&MomentQuery::times(vec![1.0; r], q)?)?;
        let density = density_moment(q, r)?;
        table.push(vec![r.to_string(), num(pairing), num(density), num(density - pairing)]);
    }
    Ok(table)
}

/// Memory ceiling for a stored fine path.
const PATH_BYTES_BUDGET: usize = 1 << 31;

fn check_path_budget(n: usize, level: u32) -> Result<(), CliError> {
    if level > 16 {
        return Err(CliError::Usage("level above 16 is out of budget".into()));
    }
    let bytes = 16 * n * n * ((1usize << level) + 1);
    if bytes > PATH_BYTES_BUDGET {
        return Err(CliError::Usage(format!(
            "a path with N = {n} and 2^{level} steps needs {bytes} bytes, budget is {PATH_BYTES_BUDGET}"
        )));
    }
    Ok(())
}

fn path_bytes(path: &GridPath) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_path(path, &mut buf)?;
    Ok(buf)
}

fn load_path(file: &str) -> Result<GridPath, CliError> {
    let f = std::fs::File::open(file).map_err(|e| CliError::Usage(format!("cannot open path file {file}: {e}")))?;
    Ok(read_path(std::io::BufReader::new(f))?)
}

fn csv_bytes(table: &Table) -> Result<Vec<u8>, CliError> {
    Ok(table.to_csv()?.into_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    pub horizon: f64,
    /// The grid has 2^level steps.
    pub level: u32,
    pub path_id: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n: 64,
            horizon: 1.0,
            level: 8,
            path_id: 0,
        }
    }
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        Space::new(self.n)?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(CliError::Usage("horizon must be positive and finite".into()));
        }
        check_path_budget(self.n, self.level)
    }
}

pub fn simulate(cfg: &SimulateConfig, seed: u64) -> Result<Artifacts, CliError> {
    cfg.validate()?;
    let grid = uniform_grid(cfg.horizon, 1 << cfg.level);
    let path = simulate_free_bm(Space::new(cfg.n)?, &grid, seed, cfg.path_id)?;
    let mut table = Table::new(&["index", "time", "trace_re", "trace_im", "second_moment"]);
    for (k, x) in path.values().iter().enumerate() {
        let tr = x.trace();
        table.push(vec![
            k.to_string(),
            num(path.time(k)),
            num(tr.re),
            num(tr.im),
            num(x.trace_of_product(x).re),
        ]);
    }
    Ok(Artifacts {
        files: vec![("simulate.csv".into(), csv_bytes(&table)?), ("path.ncrp".into(), path_bytes(&path)?)],
        ..Default::default()
    })
}

/// Driving path of integrate and solve: a stored file or a fresh simulation.
fn driving_path(input: &Option<String>, n: usize, level: u32, horizon: f64, seed: u64, path_id: u64) -> Result<GridPath, CliError> {
    match input {
        Some(file) => {
            let path = load_path(file)?;
            let steps = path.steps();
            if path.dim() != n || steps != 1 << level || !path.is_uniform() || path.time(0) != 0.0 {
                return Err(CliError::Usage(format!(
                    "input path has N = {}, {} steps; config asks for N = {n}, 2^{level} uniform steps from 0",
                    path.dim(),
                    steps
                )));
            }
            Ok(path)
        }
        None => Ok(simulate_free_bm(Space::new(n)?, &uniform_grid(horizon, 1 << level), seed, path_id)?),
    }
}

fn check_cells(cells: usize, level: u32) -> Result<(), CliError> {
    if cells == 0 || !cells.is_power_of_two() || cells > 1 << level {
        return Err(CliError::Usage("cells must be a power of two not above 2^level".into()));
    }
    Ok(())
}

fn coarse_indices(cells: usize, level: u32) -> Vec<usize> {
    let steps = 1usize << level;
    (0..=cells).map(|c| c * steps / cells).collect()
}

/// ∫ ∂f(X)♯dX against the Stratonovich and Itô areas, reported through the
/// Itô-formula residuals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrateConfig {
    pub n: usize,
    pub level: u32,
    pub horizon: f64,
    pub cells: usize,
    pub f: FunctionSpec,
    pub refinement: Refinement,
    pub path_id: u64,
    /// Path file written by `simulate`; replaces the simulated path.
    pub input: Option<String>,
}

impl Default for IntegrateConfig {
    fn default() -> Self {
        IntegrateConfig {
            n: 32,
            level: 8,
            horizon: 1.0,
            cells: 4,
            f: FunctionSpec::monomial(2),
            refinement: Refinement::FinestPair,
            path_id: 0,
            input: None,
        }
    }
}

impl IntegrateConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        Space::new(self.n)?;
        self.f.validate()?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(CliError::Usage("horizon must be positive and finite".into()));
        }
        check_path_budget(self.n, self.level)?;
        check_cells(self.cells, self.level)
    }
}

pub fn integrate(cfg: &IntegrateConfig, seed: u64) -> Result<Artifacts, CliError> {
    cfg.validate()?;
    let path = driving_path(&cfg.input, cfg.n, cfg.level, cfg.horizon, seed, cfg.path_id)?;
    let opts = IntegralOptions {
        refinement: cfg.refinement,
        ..Default::default()
    };
    let r = ito_formula_check(&cfg.f, Arc::new(path), &coarse_indices(cfg.cells, cfg.level), &opts)?;
    let mut table = Table::new(&["strat_residual", "ito_residual", "strat_plus_defect", "defect", "sup_x"]);
    table.push(vec![num(r.strat), num(r.ito), num(r.strat_plus_defect), num(r.defect), num(r.sup_x)]);
    Ok(Artifacts {
        files: vec![("integrate.csv".into(), csv_bytes(&table)?)],
        summary: serde_json::to_value(&r).unwrap().as_object().unwrap().clone(),
        ..Default::default()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialValue {
    /// c·1.
    Scalar { value: f64 },
    /// scale·G with G a GUE(1) draw from the master seed.
    Gue { scale: f64 },
    /// A value of a stored path, the last one by default.
    File { path: String, index: Option<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AreaKind {
    Ito,
    Stratonovich,
}

/// dY = Σ f_i(Y)·dX·g_i(Y) with g paired from f.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub n: usize,
    pub level: u32,
    pub horizon: f64,
    /// The solver steps on a partition of 2^mesh_level cells.
    pub mesh_level: u32,
    pub initial: InitialValue,
    pub f: Vec<FunctionSpec>,
    pub g: PairingMode,
    pub scheme: Scheme,
    pub area: AreaKind,
    pub self_adjoint: bool,
    pub path_id: u64,
    pub input: Option<String>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            n: 16,
            level: 8,
            horizon: 1.0,
            mesh_level: 5,
            initial: InitialValue::Gue { scale: 0.5 },
            f: vec![FunctionSpec::identity(), FunctionSpec::constant(1.0)],
            g: PairingMode::ReverseStar,
            scheme: Scheme::OneStep,
            area: AreaKind::Stratonovich,
            self_adjoint: true,
            path_id: 0,
            input: None,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        Space::new(self.n)?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(CliError::Usage("horizon must be positive and finite".into()));
        }
        check_path_budget(self.n, self.level)?;
        if self.mesh_level > self.level {
            return Err(CliError::Usage("mesh_level must not exceed level".into()));
        }
        if self.f.is_empty() {
            return Err(CliError::Usage("f must be nonempty".into()));
        }
        for f in &self.f {
            f.validate()?;
        }
        match &self.initial {
            InitialValue::Scalar { value } if !value.is_finite() => {
                Err(CliError::Usage("initial value must be finite".into()))
            }
            InitialValue::Gue { scale } if !scale.is_finite() => Err(CliError::Usage("initial scale must be finite".into())),
            _ => Ok(()),
        }
    }

    fn initial_value(&self, seed: u64) -> Result<AlgebraElement, CliError> {
        Ok(match &self.initial {
            InitialValue::Scalar { value } => AlgebraElement::scalar(self.n, cr(*value)),
            InitialValue::Gue { scale } => random_initial(self.n, *scale, seed, self.path_id)?,
            InitialValue::File { path, index } => {
                let p = load_path(path)?;
                let i = index.unwrap_or(p.len() - 1);
                if i >= p.len() || p.dim() != self.n {
                    return Err(CliError::Usage(format!(
                        "initial value file {path} has {} values of dimension {}",
                        p.len(),
                        p.dim()
                    )));
                }
                p.value(i).clone()
            }
        })
    }
}

pub fn solve(cfg: &SolveConfig, seed: u64) -> Result<Artifacts, CliError> {
    cfg.validate()?;
    let initial = cfg.initial_value(seed)?;
    let path = Arc::new(driving_path(&cfg.input, cfg.n, cfg.level, cfg.horizon, seed, cfg.path_id)?);
    let g = paired_g(&cfg.f, cfg.g);
    let mut problem = SdeProblem::new(initial, cfg.f.clone(), g);
    if cfg.self_adjoint {
        problem = problem.self_adjoint();
    }
    let strat = LevyArea::stratonovich(path.clone());
    let area = match cfg.area {
        AreaKind::Stratonovich => strat,
        AreaKind::Ito => strat.with_variant(AreaVariant::Ito)?,
    };
    let coarse = coarse_indices(1 << cfg.mesh_level, cfg.level);
    let y = solve_rough_sde(&problem, &area, &coarse, cfg.scheme)?;
    let mut table = Table::new(&["index", "time", "trace_re", "trace_im", "l2_norm", "self_adjoint_defect"]);
    for (k, v) in y.path.values().iter().enumerate() {
        let tr = v.trace();
        table.push(vec![
            coarse[k].to_string(),
            num(y.path.time(k)),
            num(tr.re),
            num(tr.im),
            num(v.l2_norm()),
            num(v.self_adjoint_defect()),
        ]);
    }
    let driving = path.subsample(&coarse)?.with_seed(seed);
    let solution = y.path.clone().with_seed(seed);
    let mut summary = serde_json::Map::new();
    summary.insert("self_adjoint_defect".into(), json!(y.self_adjoint_defect()));
    if let Some(gap) = y.picard_gap {
        summary.insert("picard_gap".into(), json!(gap));
        summary.insert("picard_history".into(), json!(y.picard_history));
    }
    Ok(Artifacts {
        files: vec![
            ("solution.csv".into(), csv_bytes(&table)?),
            ("solution.ncrp".into(), path_bytes(&solution)?),
            ("driving.ncrp".into(), path_bytes(&driving)?),
        ],
        summary,
        ..Default::default()
    })
}

fn study_artifacts(report: StudyReport) -> Result<Artifacts, CliError> {
    let mut checks = Table::new(&["name", "value", "limit", "pass", "detail"]);
    for c in &report.checks {
        checks.push(vec![c.name.clone(), num(c.value), num(c.limit), c.pass.to_string(), c.detail.clone()]);
    }
    let failures = report
        .failures()
        .iter()
        .map(|c| format!("{}: value {} against limit {} ({})", c.name, c.value, c.limit, c.detail))
        .collect();
    let mut summary = serde_json::Map::new();
    summary.insert("checks".into(), json!(report.checks.len()));
    Ok(Artifacts {
        files: vec![
            (format!("{}.csv", report.name), csv_bytes(&report.table)?),
            ("checks.csv".into(), csv_bytes(&checks)?),
        ],
        failures,
        summary,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum StudyName {
    AreaConvergence,
    SolutionConvergence,
    ItoFormula,
    ItoStrato,
    Bg,
    Nonextension,
    Bounds,
}

impl StudyName {
    pub fn as_str(self) -> &'static str {
        match self {
            StudyName::AreaConvergence => "area-convergence",
            StudyName::SolutionConvergence => "solution-convergence",
            StudyName::ItoFormula => "ito-formula",
            StudyName::ItoStrato => "ito-strato",
            StudyName::Bg => "bg",
            StudyName::Nonextension => "nonextension",
            StudyName::Bounds => "bounds",
        }
    }
}

/// A study's parameter record: validation ahead of any work, then the run.
pub trait Study: Serialize + serde::de::DeserializeOwned + Default {
    fn check(&self) -> ncrough::Result<()>;
    fn run(&self, seed: u64) -> ncrough::Result<StudyReport>;
}

macro_rules! study {
    ($cfg:ty, $f:path) => {
        impl Study for $cfg {
            fn check(&self) -> ncrough::Result<()> {
                self.validate()
            }
            fn run(&self, seed: u64) -> ncrough::Result<StudyReport> {
                $f(self, seed)
            }
        }
    };
}

study!(AreaConvergenceConfig, area_convergence_study);
study!(SolutionConvergenceConfig, solution_convergence_study);
study!(ItoFormulaConfig, ito_formula_study);
study!(ItoStratoConfig, ito_strato_study);
study!(BgConfig, bg_study);
study!(NonextensionConfig, nonextension_demo);
study!(BoundsConfig, bounds_study);

pub fn run_study<S: Study>(cfg: &S, seed: u64) -> Result<Artifacts, CliError> {
    cfg.check()?;
    study_artifacts(cfg.run(seed)?)
}
