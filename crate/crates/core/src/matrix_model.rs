//! GUE matrix model of free Brownian motion, grid paths and their storage.
//!
//! Randomness is counter based: every Gaussian matrix is drawn from a ChaCha
//! stream keyed by (seed, path id, node key). On dyadic grids the path is
//! built by Brownian-bridge refinement, so the value at a dyadic time does not
//! depend on how finely the grid is refined afterwards.

use std::io::{Read, Write};

use faer::{c64, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::algebra::{AlgebraElement, Space};
use crate::error::{Error, Result};

/// Counter-based substream for a given (seed, path id, key).
pub fn substream(seed: u64, path_id: u64, key: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&path_id.to_le_bytes());
    bytes[16..24].copy_from_slice(b"ncrough\0");
    let mut rng = ChaCha8Rng::from_seed(bytes);
    rng.set_stream(key);
    rng
}

/// Hermitian Gaussian matrix with E|H_jk|² = dt/N, so that E φ(H²) = dt.
pub fn sample_gue_increment<R: Rng + ?Sized>(space: Space, dt: f64, rng: &mut R) -> AlgebraElement {
    let n = space.dim();
    if dt == 0.0 {
        return AlgebraElement::zeros(n);
    }
    let diag_sd = (dt / n as f64).sqrt();
    let off_sd = (dt / (2.0 * n as f64)).sqrt();
    let mut m = Mat::<c64>::zeros(n, n);
    for j in 0..n {
        let d: f64 = rng.sample(StandardNormal);
        m[(j, j)] = c64::new(d * diag_sd, 0.0);
        for k in j + 1..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let z = c64::new(a * off_sd, b * off_sd);
            m[(j, k)] = z;
            m[(k, j)] = z.conj();
        }
    }
    AlgebraElement::from_mat(m)
}

/// Process values on a strictly increasing grid.
#[derive(Clone, Debug)]
pub struct GridPath {
    grid: Vec<f64>,
    values: Vec<AlgebraElement>,
    seed: Option<u64>,
}

/// Relative tolerance for locating a time on a grid.
const GRID_TOL: f64 = 1e-12;

impl GridPath {
    pub fn new(grid: Vec<f64>, values: Vec<AlgebraElement>) -> Result<Self> {
        if grid.is_empty() || grid.len() != values.len() {
            return Err(Error::usage("grid and values must be nonempty and of equal length"));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::usage("grid must be strictly increasing"));
        }
        let n = values[0].dim();
        if values.iter().any(|v| v.dim() != n) {
            return Err(Error::usage("path values live in different spaces"));
        }
        Ok(GridPath {
            grid,
            values,
            seed: None,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// X_t = f(t) evaluated on the grid.
    pub fn from_fn(grid: Vec<f64>, f: impl Fn(f64) -> AlgebraElement) -> Result<Self> {
        let values = grid.iter().map(|&t| f(t)).collect();
        GridPath::new(grid, values)
    }

    pub fn space(&self) -> Space {
        self.values[0].space()
    }

    pub fn dim(&self) -> usize {
        self.values[0].dim()
    }

    pub fn times(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[AlgebraElement] {
        &self.values
    }

    pub fn time(&self, i: usize) -> f64 {
        self.grid[i]
    }

    pub fn value(&self, i: usize) -> &AlgebraElement {
        &self.values[i]
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// (δX)_{ij} = X_{t_j} − X_{t_i}.
    pub fn increment(&self, i: usize, j: usize) -> AlgebraElement {
        &self.values[j] - &self.values[i]
    }

    /// Grid index of `t`, or a usage error when `t` is off the grid.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let scale = self.horizon().abs().max(1.0);
        let pos = self.grid.partition_point(|&x| x < t - GRID_TOL * scale);
        if pos < self.grid.len() && (self.grid[pos] - t).abs() <= GRID_TOL * scale {
            Ok(pos)
        } else {
            Err(Error::usage(format!("time {t} is not a grid point")))
        }
    }

    pub fn is_uniform(&self) -> bool {
        let m = self.steps();
        if m == 0 {
            return true;
        }
        let h = (self.horizon() - self.grid[0]) / m as f64;
        self.grid
            .iter()
            .enumerate()
            .all(|(k, &t)| (t - (self.grid[0] + k as f64 * h)).abs() <= GRID_TOL * self.horizon().abs().max(1.0))
    }

    /// Restriction to the grid points with the given indices (increasing).
    pub fn subsample(&self, indices: &[usize]) -> Result<GridPath> {
        if indices.iter().any(|&i| i >= self.len()) {
            return Err(Error::usage("subsample index out of range"));
        }
        let grid = indices.iter().map(|&i| self.grid[i]).collect();
        let values = indices.iter().map(|&i| self.values[i].clone()).collect();
        let mut p = GridPath::new(grid, values)?;
        p.seed = self.seed;
        Ok(p)
    }

    /// Whether every point is self-adjoint.
    pub fn is_self_adjoint(&self) -> bool {
        self.values.iter().all(|v| v.is_self_adjoint())
    }

    /// Pointwise affine map a·X + b·Y for paths on the same grid.
    pub fn combine(&self, a: f64, other: &GridPath, b: f64) -> Result<GridPath> {
        if self.grid != other.grid {
            return Err(Error::usage("paths live on different grids"));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| x.scale_re(a).axpy(c64::new(b, 0.0), y))
            .collect();
        GridPath::new(self.grid.clone(), values)
    }
}

/// t_k = k·T/M, k = 0..M.
pub fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|k| if k == steps { horizon } else { horizon * k as f64 / steps as f64 })
        .collect()
}

/// Dyadic level L with M = 2^L steps, if `grid` is uniform dyadic from 0.
fn dyadic_level(grid: &[f64]) -> Option<u32> {
    let m = grid.len() - 1;
    if m == 0 || !m.is_power_of_two() || grid[0] != 0.0 {
        return None;
    }
    let t = grid[m];
    let ok = grid
        .iter()
        .enumerate()
        .all(|(k, &x)| (x - t * k as f64 / m as f64).abs() <= GRID_TOL * t.max(1.0));
    ok.then(|| m.trailing_zeros())
}

const SEQUENTIAL_KEY: u64 = 1 << 63;

/// Free Brownian motion in the GUE model with X_0 = 0.
///
/// Dyadic uniform grids use Brownian-bridge refinement keyed by (level, index);
/// other grids draw increment k from key 2^63 + k.
pub fn simulate_free_bm(space: Space, grid: &[f64], seed: u64, path_id: u64) -> Result<GridPath> {
    if grid.is_empty() || grid[0] != 0.0 {
        return Err(Error::usage("simulation grid must start at 0"));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::usage("grid must be strictly increasing"));
    }
    let mut values = Vec::with_capacity(grid.len());
    match dyadic_level(grid) {
        Some(level) => {
            for_each_dyadic_value(space, grid[grid.len() - 1], level, seed, path_id, |_, x| {
                values.push(x.clone())
            });
        }
        None => {
            let mut x = AlgebraElement::zeros(space.dim());
            values.push(x.clone());
            for k in 0..grid.len() - 1 {
                let mut rng = substream(seed, path_id, SEQUENTIAL_KEY | k as u64);
                let dx = sample_gue_increment(space, grid[k + 1] - grid[k], &mut rng);
                x = &x + &dx;
                values.push(x.clone());
            }
        }
    }
    Ok(GridPath::new(grid.to_vec(), values)?.with_seed(seed))
}

/// Streams the values X_{kT/2^L}, k = 0..2^L, of the bridge construction in
/// time order while holding only O(L) matrices.
pub fn for_each_dyadic_value(
    space: Space,
    horizon: f64,
    level: u32,
    seed: u64,
    path_id: u64,
    mut visit: impl FnMut(usize, &AlgebraElement),
) {
    let x0 = AlgebraElement::zeros(space.dim());
    let mut rng = substream(seed, path_id, 0);
    let xt = sample_gue_increment(space, horizon, &mut rng);
    visit(0, &x0);
    bridge_rec(space, horizon, level, seed, path_id, 0, 0, &x0, &xt, &mut visit);
    visit(1usize << level, &xt);
}

/// Fills the open interval between dyadic nodes (depth, j) and (depth, j+1).
#[allow(clippy::too_many_arguments)]
fn bridge_rec(
    space: Space,
    horizon: f64,
    level: u32,
    seed: u64,
    path_id: u64,
    depth: u32,
    j: u64,
    left: &AlgebraElement,
    right: &AlgebraElement,
    visit: &mut impl FnMut(usize, &AlgebraElement),
) {
    if depth == level {
        return;
    }
    let h = horizon / (1u64 << depth) as f64;
    // midpoint node at level depth+1 has odd index 2j+1; key in [2^depth, 2^{depth+1})
    let key = (1u64 << depth) + j;
    let mut rng = substream(seed, path_id, key);
    let mut mid = sample_gue_increment(space, h / 4.0, &mut rng).into_mat();
    left.with_mat(|l| {
        right.with_mat(|r| {
            faer::zip!(mid.as_mut(), l, r).for_each(|faer::unzip!(m, l, r)| *m += (*l + *r) * 0.5);
        })
    });
    let mid = AlgebraElement::from_mat(mid);
    bridge_rec(space, horizon, level, seed, path_id, depth + 1, 2 * j, left, &mid, visit);
    let idx = ((2 * j + 1) << (level - depth - 1)) as usize;
    visit(idx, &mid);
    bridge_rec(space, horizon, level, seed, path_id, depth + 1, 2 * j + 1, &mid, right, visit);
}

/// max_{s<t} ‖X_t − X_s‖/(t−s)^γ over all grid pairs.
pub fn holder_norm(path: &GridPath, gamma: f64) -> Result<f64> {
    let all: Vec<usize> = (0..path.len()).collect();
    holder_norm_on(path, gamma, &all)
}

/// Hölder quotient restricted to pairs from a subset of grid indices.
pub fn holder_norm_on(path: &GridPath, gamma: f64, indices: &[usize]) -> Result<f64> {
    if path.len() < 2 {
        return Err(Error::usage("Hölder norm needs at least two grid points"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::usage(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    let mut best = 0.0f64;
    for (a, &i) in indices.iter().enumerate() {
        for &j in &indices[a + 1..] {
            let d = path.increment(i, j).op_norm();
            best = best.max(d / (path.time(j) - path.time(i)).powf(gamma));
        }
    }
    Ok(best)
}

/// About `count` evenly spread grid indices, always including both ends.
pub fn spread_indices(len: usize, count: usize) -> Vec<usize> {
    let last = len - 1;
    let count = count.clamp(2, len);
    let mut out: Vec<usize> = (0..count)
        .map(|k| ((k as f64) * last as f64 / (count - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

const MAGIC: &[u8; 4] = b"NCRP";
const FORMAT_VERSION: u32 = 1;

/// Writes a path on a uniform grid from 0 in the binary container:
/// "NCRP", u32 version, u64 N, u64 M, f64 T, u64 seed, then (M+1) row-major
/// N×N matrices of (re, im) f64 pairs, all little-endian.
pub fn write_path<W: Write>(path: &GridPath, mut w: W) -> Result<()> {
    if path.time(0) != 0.0 || !path.is_uniform() {
        return Err(Error::usage("binary container stores uniform grids starting at 0"));
    }
    let n = path.dim();
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&(path.steps() as u64).to_le_bytes())?;
    w.write_all(&path.horizon().to_le_bytes())?;
    w.write_all(&path.seed().unwrap_or(0).to_le_bytes())?;
    let mut buf = Vec::with_capacity(16 * n * n);
    for v in path.values() {
        buf.clear();
        for z in v.to_row_major() {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_path<R: Read>(mut r: R) -> Result<GridPath> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::usage("not an ncrough path file"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::usage(format!("unsupported path format version {version}")));
    }
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let m = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let horizon = f64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    if n == 0 || m == 0 || !(horizon > 0.0) {
        return Err(Error::usage("corrupt path header"));
    }
    let mut values = Vec::with_capacity(m + 1);
    let mut buf = vec![0u8; 16 * n * n];
    for _ in 0..=m {
        r.read_exact(&mut buf)?;
        let data: Vec<c64> = buf
            .chunks_exact(16)
            .map(|c| {
                let re = f64::from_le_bytes(c[..8].try_into().unwrap());
                let im = f64::from_le_bytes(c[8..].try_into().unwrap());
                c64::new(re, im)
            })
            .collect();
        values.push(AlgebraElement::from_row_major(n, &data)?);
    }
    Ok(GridPath::new(uniform_grid(horizon, m), values)?.with_seed(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gue_is_hermitian_and_zero_at_dt_zero() {
        let sp = Space::new(12).unwrap();
        let mut rng = substream(1, 0, 5);
        let h = sample_gue_increment(sp, 0.3, &mut rng);
        assert_eq!(h.self_adjoint_defect(), 0.0);
        let z = sample_gue_increment(sp, 0.0, &mut rng);
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let sp = Space::new(4).unwrap();
        let a = sample_gue_increment(sp, 1.0, &mut substream(9, 1, 2));
        let b = sample_gue_increment(sp, 1.0, &mut substream(9, 1, 2));
        let c = sample_gue_increment(sp, 1.0, &mut substream(9, 1, 3));
        let d = sample_gue_increment(sp, 1.0, &mut substream(9, 2, 2));
        assert_eq!(a.max_abs_diff(&b), 0.0);
        assert!(a.max_abs_diff(&c) > 0.0);
        assert!(a.max_abs_diff(&d) > 0.0);
    }

    #[test]
    fn refinement_keeps_coarse_values() {
        let sp = Space::new(6).unwrap();
        let coarse = simulate_free_bm(sp, &uniform_grid(1.0, 4), 3, 0).unwrap();
        let fine = simulate_free_bm(sp, &uniform_grid(1.0, 32), 3, 0).unwrap();
        for k in 0..=4 {
            assert!(coarse.value(k).max_abs_diff(fine.value(8 * k)) < 1e-15);
        }
        assert_eq!(fine.value(0).max_abs(), 0.0);
        assert!(fine.is_self_adjoint());
    }

    #[test]
    fn streaming_matches_stored_path() {
        let sp = Space::new(3).unwrap();
        let path = simulate_free_bm(sp, &uniform_grid(2.0, 8), 11, 4).unwrap();
        let mut seen = Vec::new();
        for_each_dyadic_value(sp, 2.0, 3, 11, 4, |k, x| seen.push((k, x.clone())));
        assert_eq!(seen.len(), 9);
        for (i, (k, x)) in seen.iter().enumerate() {
            assert_eq!(i, *k);
            assert!(x.max_abs_diff(path.value(i)) == 0.0);
        }
    }

    #[test]
    fn non_dyadic_grid_simulates() {
        let sp = Space::new(4).unwrap();
        let p = simulate_free_bm(sp, &[0.0, 0.1, 0.25, 1.0], 1, 0).unwrap();
        assert_eq!(p.len(), 4);
        assert!(simulate_free_bm(sp, &[0.1, 0.2], 1, 0).is_err());
    }

    #[test]
    fn holder_of_constant_and_linear() {
        let sp = Space::new(3).unwrap();
        let a = AlgebraElement::from_fn(3, |i, j| c64::new((i + 2 * j) as f64, 0.0)).symmetrized();
        let grid = uniform_grid(1.0, 8);
        let konst = GridPath::from_fn(grid.clone(), |_| a.clone()).unwrap();
        assert_eq!(holder_norm(&konst, 0.5).unwrap(), 0.0);
        let lin = GridPath::from_fn(grid, |t| a.scale_re(t)).unwrap();
        assert!((holder_norm(&lin, 1.0).unwrap() - a.op_norm()).abs() < 1e-12);
        let _ = sp;
    }

    #[test]
    fn binary_roundtrip() {
        let sp = Space::new(3).unwrap();
        let p = simulate_free_bm(sp, &uniform_grid(1.5, 4), 77, 0).unwrap();
        let mut buf = Vec::new();
        write_path(&p, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 8 * 4 + 5 * 9 * 16);
        let q = read_path(buf.as_slice()).unwrap();
        assert_eq!(q.seed(), Some(77));
        assert_eq!(q.times(), p.times());
        for k in 0..5 {
            assert_eq!(q.value(k).max_abs_diff(p.value(k)), 0.0);
        }
        assert!(read_path(&b"XXXX"[..]).is_err());
    }

    #[test]
    fn index_lookup() {
        let sp = Space::new(2).unwrap();
        let p = simulate_free_bm(sp, &uniform_grid(1.0, 10), 1, 0).unwrap();
        assert_eq!(p.index_of(0.3).unwrap(), 3);
        assert!(p.index_of(0.35).is_err());
    }
}
