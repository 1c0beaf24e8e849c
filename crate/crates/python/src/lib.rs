use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::sync::Arc;

use pyo3::exceptions::{PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyString};

use ncrough::algebra::{c64, AlgebraElement};
use ncrough::experiments::{ito_formula_check, random_initial};
use ncrough::functional::{apply_function as apply_fn, tensor_derivative as tensor_deriv, FunctionSpec};
use ncrough::matrix_model::{holder_norm, read_path, simulate_free_bm, uniform_grid, write_path, GridPath};
use ncrough::pairing::{self, MomentQuery};
use ncrough::rough::{AreaVariant, IntegralOptions, LevyArea, Refinement};
use ncrough::sde::{paired_g, solve_rough_sde, ControlledProcess, PairingMode, Scheme, SdeProblem};
use ncrough::tensor::{Config, Side2, TensorElement2};
use ncrough::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::Numeric { .. } | Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for ncrough::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn same_dim(a: usize, b: usize) -> PyResult<()> {
    if a == b {
        Ok(())
    } else {
        Err(PyValueError::new_err(format!("dimension mismatch: {a} vs {b}")))
    }
}

/// A function given as a JSON spec string, real coefficients or complex coefficients.
fn spec(obj: &Bound<'_, PyAny>) -> PyResult<FunctionSpec> {
    let f = if let Ok(s) = obj.cast::<PyString>() {
        FunctionSpec::from_json(s.to_str()?).py()?
    } else if let Ok(c) = obj.extract::<Vec<f64>>() {
        FunctionSpec::poly(&c)
    } else {
        FunctionSpec::poly_complex(&obj.extract::<Vec<c64>>()?)
    };
    f.validate().py()?;
    Ok(f)
}

fn specs(obj: &Bound<'_, PyAny>) -> PyResult<Vec<FunctionSpec>> {
    obj.try_iter()?.map(|item| spec(&item?)).collect()
}

fn config(name: &str) -> PyResult<Config> {
    match name {
        "config1" => Ok(Config::Config1),
        "config2" => Ok(Config::Config2),
        _ => Err(PyValueError::new_err(format!("unknown tensor configuration {name:?}"))),
    }
}

/// An element of M_N(C) with the normalized trace.
#[pyclass(name = "Matrix", module = "ncrough", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Matrix(AlgebraElement);

#[pymethods]
impl Matrix {
    #[new]
    fn new(rows: Vec<Vec<c64>>) -> PyResult<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(PyValueError::new_err("expected a nonempty square list of rows"));
        }
        let flat: Vec<c64> = rows.into_iter().flatten().collect();
        Ok(Matrix(AlgebraElement::from_row_major(n, &flat).py()?))
    }

    #[staticmethod]
    fn identity(n: usize) -> Self {
        Matrix(AlgebraElement::identity(n))
    }

    #[staticmethod]
    fn zeros(n: usize) -> Self {
        Matrix(AlgebraElement::zeros(n))
    }

    /// Scaled GUE sample, as used for random initial values.
    #[staticmethod]
    #[pyo3(signature = (n, scale=1.0, seed=42, item=0))]
    fn gue(n: usize, scale: f64, seed: u64, item: u64) -> PyResult<Self> {
        Ok(Matrix(random_initial(n, scale, seed, item).py()?))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn to_list(&self) -> Vec<Vec<c64>> {
        let n = self.0.dim();
        self.0.to_row_major().chunks(n).map(<[c64]>::to_vec).collect()
    }

    fn __getitem__(&self, ij: (usize, usize)) -> PyResult<c64> {
        let n = self.0.dim();
        if ij.0 >= n || ij.1 >= n {
            return Err(PyIndexError::new_err("matrix index out of range"));
        }
        Ok(self.0.get(ij.0, ij.1))
    }

    /// Normalized trace tr(X) = Tr(X)/N.
    fn trace(&self) -> c64 {
        self.0.trace()
    }

    fn adjoint(&self) -> Self {
        Matrix(self.0.adjoint())
    }

    fn transpose(&self) -> Self {
        Matrix(self.0.transpose())
    }

    fn pow(&self, k: usize) -> Self {
        Matrix(self.0.pow(k))
    }

    /// exp(cX).
    #[pyo3(signature = (c=c64::new(1.0, 0.0)))]
    fn expm(&self, c: c64) -> Self {
        Matrix(self.0.expm(c))
    }

    fn op_norm(&self) -> f64 {
        self.0.op_norm()
    }

    fn frobenius(&self) -> f64 {
        self.0.frobenius()
    }

    fn lp_norm(&self, p: f64) -> PyResult<f64> {
        self.0.lp_norm(p).py()
    }

    fn singular_values(&self) -> Vec<f64> {
        self.0.singular_values()
    }

    fn self_adjoint_defect(&self) -> f64 {
        self.0.self_adjoint_defect()
    }

    fn max_abs_diff(&self, other: &Matrix) -> PyResult<f64> {
        same_dim(self.0.dim(), other.0.dim())?;
        Ok(self.0.max_abs_diff(&other.0))
    }

    fn __add__(&self, other: &Matrix) -> PyResult<Self> {
        same_dim(self.0.dim(), other.0.dim())?;
        Ok(Matrix(&self.0 + &other.0))
    }

    fn __sub__(&self, other: &Matrix) -> PyResult<Self> {
        same_dim(self.0.dim(), other.0.dim())?;
        Ok(Matrix(&self.0 - &other.0))
    }

    fn __matmul__(&self, other: &Matrix) -> PyResult<Self> {
        same_dim(self.0.dim(), other.0.dim())?;
        Ok(Matrix(self.0.matmul(&other.0)))
    }

    fn __mul__(&self, c: c64) -> Self {
        Matrix(self.0.scale(c))
    }

    fn __rmul__(&self, c: c64) -> Self {
        Matrix(self.0.scale(c))
    }

    fn __neg__(&self) -> Self {
        Matrix(self.0.scale_re(-1.0))
    }

    fn __repr__(&self) -> String {
        format!("Matrix(dim={}, op_norm={:.6e})", self.0.dim(), self.0.op_norm())
    }
}

/// Σ u_i ⊗ v_i acting by (a⊗b)♯x = a x b.
#[pyclass(name = "Tensor", module = "ncrough", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Tensor(TensorElement2);

#[pymethods]
impl Tensor {
    #[new]
    #[pyo3(signature = (terms, config="config2"))]
    fn new(terms: Vec<(PyRef<'_, Matrix>, PyRef<'_, Matrix>)>, config: &str) -> PyResult<Self> {
        let cfg = self::config(config)?;
        let n = terms
            .first()
            .map(|(u, _)| u.0.dim())
            .ok_or_else(|| PyValueError::new_err("use Tensor.zero for an empty tensor"))?;
        let t = terms.iter().map(|(u, v)| (u.0.clone(), v.0.clone())).collect();
        Ok(Tensor(TensorElement2::from_terms(n, cfg, t).py()?))
    }

    #[staticmethod]
    #[pyo3(signature = (n, config="config2"))]
    fn zero(n: usize, config: &str) -> PyResult<Self> {
        Ok(Tensor(TensorElement2::zero(n, self::config(config)?)))
    }

    #[staticmethod]
    #[pyo3(signature = (n, config="config2"))]
    fn unit(n: usize, config: &str) -> PyResult<Self> {
        Ok(Tensor(TensorElement2::unit(n, self::config(config)?)))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn config(&self) -> &'static str {
        match self.0.config() {
            Config::Config1 => "config1",
            Config::Config2 => "config2",
        }
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn terms(&self) -> Vec<(Matrix, Matrix)> {
        self.0.terms().iter().map(|(u, v)| (Matrix(u.clone()), Matrix(v.clone()))).collect()
    }

    fn sharp(&self, x: &Matrix) -> PyResult<Matrix> {
        same_dim(self.0.dim(), x.0.dim())?;
        Ok(Matrix(self.0.sharp(&x.0)))
    }

    fn adjoint(&self) -> Self {
        Tensor(self.0.adjoint())
    }

    fn with_config(&self, config: &str) -> PyResult<Self> {
        Ok(Tensor(self.0.with_config(self::config(config)?)))
    }

    fn multiply_out(&self) -> Matrix {
        Matrix(self.0.multiply_out())
    }

    /// (Id ⊗ tr) or (tr ⊗ Id), selected by the side that is kept.
    fn partial_trace(&self, side: &str) -> PyResult<Matrix> {
        let side = match side {
            "left" => Side2::Left,
            "right" => Side2::Right,
            _ => return Err(PyValueError::new_err("side must be \"left\" or \"right\"")),
        };
        Ok(Matrix(self.0.partial_trace(side)))
    }

    fn spatial_norm(&self) -> PyResult<f64> {
        self.0.spatial_norm().py()
    }

    fn proj_ub(&self) -> f64 {
        self.0.proj_ub()
    }

    #[pyo3(signature = (tol=1e-12))]
    fn compress(&self, tol: f64) -> Self {
        Tensor(self.0.compress(tol))
    }

    fn __add__(&self, other: &Tensor) -> PyResult<Self> {
        Ok(Tensor(self.0.add(&other.0).py()?))
    }

    fn __sub__(&self, other: &Tensor) -> PyResult<Self> {
        Ok(Tensor(self.0.sub(&other.0).py()?))
    }

    fn __mul__(&self, other: &Bound<'_, PyAny>) -> PyResult<Self> {
        if let Ok(t) = other.cast::<Tensor>() {
            Ok(Tensor(self.0.mul(&t.get().0).py()?))
        } else {
            Ok(Tensor(self.0.scale(other.extract::<c64>()?)))
        }
    }

    fn __rmul__(&self, c: c64) -> Self {
        Tensor(self.0.scale(c))
    }

    fn __repr__(&self) -> String {
        format!("Tensor(dim={}, terms={}, config={})", self.0.dim(), self.0.len(), self.config())
    }
}

/// A matrix-valued path sampled on a time grid.
#[pyclass(name = "Path", module = "ncrough", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Path(Arc<GridPath>);

#[pymethods]
impl Path {
    #[new]
    fn new(times: Vec<f64>, values: Vec<PyRef<'_, Matrix>>) -> PyResult<Self> {
        let values = values.iter().map(|m| m.0.clone()).collect();
        Ok(Path(Arc::new(GridPath::new(times, values).py()?)))
    }

    /// GUE Brownian motion (variance t/N per entry) on a uniform grid.
    #[staticmethod]
    #[pyo3(signature = (n, steps, horizon=1.0, seed=42, path_id=0))]
    fn simulate(py: Python<'_>, n: usize, steps: usize, horizon: f64, seed: u64, path_id: u64) -> PyResult<Self> {
        let space = ncrough::algebra::Space::new(n).py()?;
        if steps == 0 || !(horizon > 0.0) {
            return Err(PyValueError::new_err("steps and horizon must be positive"));
        }
        let path = py.detach(|| simulate_free_bm(space, &uniform_grid(horizon, steps), seed, path_id)).py()?;
        Ok(Path(Arc::new(path)))
    }

    #[staticmethod]
    fn load(filename: std::path::PathBuf) -> PyResult<Self> {
        let f = File::open(&filename)?;
        Ok(Path(Arc::new(read_path(BufReader::new(f)).py()?)))
    }

    fn save(&self, filename: std::path::PathBuf) -> PyResult<()> {
        let f = File::create(&filename)?;
        write_path(&self.0, BufWriter::new(f)).py()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }

    #[getter]
    fn seed(&self) -> Option<u64> {
        self.0.seed()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.0.times().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn value(&self, i: usize) -> PyResult<Matrix> {
        if i >= self.0.len() {
            return Err(PyIndexError::new_err("path index out of range"));
        }
        Ok(Matrix(self.0.value(i).clone()))
    }

    fn values(&self) -> Vec<Matrix> {
        self.0.values().iter().cloned().map(Matrix).collect()
    }

    /// X_j − X_i.
    fn increment(&self, i: usize, j: usize) -> PyResult<Matrix> {
        if i.max(j) >= self.0.len() {
            return Err(PyIndexError::new_err("path index out of range"));
        }
        Ok(Matrix(self.0.increment(i, j)))
    }

    fn subsample(&self, indices: Vec<usize>) -> PyResult<Self> {
        Ok(Path(Arc::new(self.0.subsample(&indices).py()?)))
    }

    fn holder_norm(&self, gamma: f64) -> PyResult<f64> {
        holder_norm(&self.0, gamma).py()
    }

    fn __repr__(&self) -> String {
        format!("Path(dim={}, steps={}, horizon={})", self.0.dim(), self.0.steps(), self.0.horizon())
    }
}

/// The product Lévy area above a path: (s, t, U) ↦ ∫_s^t (U♯(X_u − X_s))·dX_u.
#[pyclass(name = "Area", module = "ncrough", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Area(LevyArea);

#[pymethods]
impl Area {
    #[new]
    #[pyo3(signature = (path, variant="stratonovich"))]
    fn new(path: &Path, variant: &str) -> PyResult<Self> {
        let v = match variant {
            "ito" => AreaVariant::Ito,
            "stratonovich" => AreaVariant::Stratonovich,
            "smooth" => AreaVariant::SmoothLebesgue,
            _ => return Err(PyValueError::new_err(format!("unknown area variant {variant:?}"))),
        };
        Ok(Area(LevyArea::new(path.0.clone(), v).py()?))
    }

    #[getter]
    fn path(&self) -> Path {
        Path(self.0.path().clone())
    }

    fn eval(&self, s: usize, t: usize, u: &Tensor) -> PyResult<Matrix> {
        self.check(s, t)?;
        Ok(Matrix(self.0.eval(s, t, &u.0).py()?))
    }

    fn increment(&self, s: usize, t: usize) -> PyResult<Matrix> {
        self.check(s, t)?;
        Ok(Matrix(self.0.increment(s, t)))
    }
}

impl Area {
    fn check(&self, s: usize, t: usize) -> PyResult<()> {
        if s > t || t >= self.0.points() {
            return Err(PyIndexError::new_err(format!("need s <= t < {}", self.0.points())));
        }
        Ok(())
    }
}

/// Solution of dY = Σ f_i(Y) dX g_i(Y) on a coarse partition.
#[pyclass(name = "Solution", module = "ncrough", frozen, skip_from_py_object)]
struct Solution(ControlledProcess);

#[pymethods]
impl Solution {
    #[getter]
    fn path(&self) -> Path {
        Path(Arc::new(self.0.path.clone()))
    }

    /// Fine-grid indices of the coarse partition.
    #[getter]
    fn indices(&self) -> Vec<usize> {
        self.0.indices.clone()
    }

    /// Gubinelli derivatives at the coarse points.
    fn derivatives(&self) -> Vec<Tensor> {
        self.0.yx.iter().cloned().map(Tensor).collect()
    }

    #[getter]
    fn picard_gap(&self) -> Option<f64> {
        self.0.picard_gap
    }

    #[getter]
    fn picard_history(&self) -> Vec<f64> {
        self.0.picard_history.clone()
    }

    fn self_adjoint_defect(&self) -> f64 {
        self.0.self_adjoint_defect()
    }
}

#[pyfunction]
fn catalan(p: usize) -> u64 {
    pairing::catalan(p)
}

#[pyfunction]
fn pairing_count(r: usize) -> u64 {
    pairing::pairing_count(r)
}

/// Coefficients of Σ_π q^{cr(π)} over pairings of r points.
#[pyfunction]
fn crossing_polynomial(r: usize) -> PyResult<Vec<u64>> {
    pairing::crossing_polynomial(r).py()
}

/// φ(X_{t_1} ⋯ X_{t_r}) for q-Brownian motion.
#[pyfunction]
fn q_moment(times: Vec<f64>, q: f64) -> PyResult<f64> {
    pairing::q_joint_moment(&MomentQuery::times(times, q).py()?).py()
}

/// Mixed moment of q-Gaussians with covariance matrix `gram`.
#[pyfunction]
fn q_moment_gram(gram: Vec<Vec<f64>>, q: f64) -> PyResult<f64> {
    pairing::q_joint_moment(&MomentQuery::gram(gram, q).py()?).py()
}

#[pyfunction]
fn nu_q_density(q: f64, x: f64) -> PyResult<f64> {
    pairing::nu_q_density(q, x).py()
}

/// ∫ x^order dν_q by quadrature.
#[pyfunction]
fn density_moment(q: f64, order: usize) -> PyResult<f64> {
    pairing::density_moment(q, order).py()
}

/// f(X) by functional calculus.
#[pyfunction]
fn apply_function(f: &Bound<'_, PyAny>, x: &Matrix) -> PyResult<Matrix> {
    Ok(Matrix(apply_fn(&spec(f)?, &x.0).py()?))
}

/// ∂f(X) as an element of the tensor product.
#[pyfunction]
fn tensor_derivative(f: &Bound<'_, PyAny>, x: &Matrix) -> PyResult<Tensor> {
    Ok(Tensor(tensor_deriv(&spec(f)?, &x.0).py()?))
}

#[allow(clippy::too_many_arguments)]
#[pyfunction]
#[pyo3(signature = (initial, f, area, coarse, g=None, pairing="reverse-star", picard=None, self_adjoint=true))]
fn solve(
    py: Python<'_>,
    initial: &Matrix,
    f: &Bound<'_, PyAny>,
    area: &Area,
    coarse: Vec<usize>,
    g: Option<&Bound<'_, PyAny>>,
    pairing: &str,
    picard: Option<usize>,
    self_adjoint: bool,
) -> PyResult<Solution> {
    let f = specs(f)?;
    let g = match g {
        Some(g) => specs(g)?,
        None => paired_g(
            &f,
            match pairing {
                "reverse-star" => PairingMode::ReverseStar,
                "same-star" => PairingMode::SameStar,
                _ => return Err(PyValueError::new_err(format!("unknown pairing {pairing:?}"))),
            },
        ),
    };
    let mut prob = SdeProblem::new(initial.0.clone(), f, g);
    if self_adjoint {
        prob = prob.self_adjoint();
    }
    let scheme = picard.map_or(Scheme::OneStep, Scheme::Picard);
    let area = &area.0;
    let y = py.detach(|| solve_rough_sde(&prob, area, &coarse, scheme)).py()?;
    Ok(Solution(y))
}

/// Residuals of the Itô and Stratonovich formulas for f(X) over the coarse cells.
#[pyfunction]
#[pyo3(signature = (f, path, coarse, refinement="finest-pair"))]
fn ito_formula<'py>(
    py: Python<'py>,
    f: &Bound<'py, PyAny>,
    path: &Path,
    coarse: Vec<usize>,
    refinement: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let f = spec(f)?;
    let opts = IntegralOptions {
        refinement: match refinement {
            "full" => Refinement::Full,
            "finest-pair" => Refinement::FinestPair,
            _ => return Err(PyValueError::new_err(format!("unknown refinement {refinement:?}"))),
        },
        ..IntegralOptions::default()
    };
    let p = path.0.clone();
    let r = py.detach(|| ito_formula_check(&f, p, &coarse, &opts)).py()?;
    let d = PyDict::new(py);
    d.set_item("strat", r.strat)?;
    d.set_item("ito", r.ito)?;
    d.set_item("strat_plus_defect", r.strat_plus_defect)?;
    d.set_item("defect", r.defect)?;
    d.set_item("sup_x", r.sup_x)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "ncrough")]
fn ncrough_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Matrix>()?;
    m.add_class::<Tensor>()?;
    m.add_class::<Path>()?;
    m.add_class::<Area>()?;
    m.add_class::<Solution>()?;
    m.add_function(wrap_pyfunction!(catalan, m)?)?;
    m.add_function(wrap_pyfunction!(pairing_count, m)?)?;
    m.add_function(wrap_pyfunction!(crossing_polynomial, m)?)?;
    m.add_function(wrap_pyfunction!(q_moment, m)?)?;
    m.add_function(wrap_pyfunction!(q_moment_gram, m)?)?;
    m.add_function(wrap_pyfunction!(nu_q_density, m)?)?;
    m.add_function(wrap_pyfunction!(density_moment, m)?)?;
    m.add_function(wrap_pyfunction!(apply_function, m)?)?;
    m.add_function(wrap_pyfunction!(tensor_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(ito_formula, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
