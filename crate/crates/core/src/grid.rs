//! Finite design grids with measure weights, grid functions, and the
//! subdifferential of the weighted L1 norm.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};

/// Threshold defining the dominant set `{t : |w_t| >= 1/2}`.
pub const DOMINANT_LEVEL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKind {
    /// Unit mass at every grid point.
    Counting,
    /// Mass `(hi - lo) / n` at every point of a uniform grid.
    Lebesgue,
}

/// Ordered design points in `R^dim` carrying strictly positive masses.
///
/// Points are stored row-major: point `i` occupies `coords[i*dim..(i+1)*dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    coords: Vec<f64>,
    weights: Vec<f64>,
    dim: usize,
}

impl Grid {
    pub fn new(coords: Vec<f64>, weights: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return invalid("grid dimension must be positive");
        }
        if coords.len() != weights.len() * dim {
            return Err(Error::SizeMismatch {
                expected: weights.len() * dim,
                got: coords.len(),
            });
        }
        if weights.is_empty() {
            return invalid("grid must contain at least one point");
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("grid coordinates"));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return invalid(format!("grid weights must be positive and finite, found {w}"));
        }
        let grid = Grid {
            coords,
            weights,
            dim,
        };
        if dim == 1 {
            if grid.coords.windows(2).any(|p| p[1] <= p[0]) {
                return invalid("one-dimensional grid points must be strictly increasing");
            }
        } else {
            let mut order: Vec<usize> = (0..grid.len()).collect();
            order.sort_by(|&a, &b| {
                grid.point(a)
                    .partial_cmp(grid.point(b))
                    .expect("finite coordinates")
            });
            if order
                .windows(2)
                .any(|p| grid.point(p[0]) == grid.point(p[1]))
            {
                return invalid("grid points must be pairwise distinct");
            }
        }
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Sub-grid on the given indices, in the given order.
    pub fn restrict(&self, indices: &[usize]) -> Result<Grid> {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        let mut weights = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return invalid(format!("index {i} out of range for grid of size {}", self.len()));
            }
            coords.extend_from_slice(self.point(i));
            weights.push(self.weights[i]);
        }
        Grid::new(coords, weights, self.dim)
    }
}

/// Equispaced one-dimensional grid including both endpoints.
///
/// A single point sits at `lo`.
pub fn build_uniform_grid(n_points: usize, interval: [f64; 2], measure: MeasureKind) -> Result<Grid> {
    let [lo, hi] = interval;
    if n_points == 0 {
        return invalid("n_points must be positive");
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return invalid(format!("degenerate interval [{lo}, {hi}]"));
    }
    let coords: Vec<f64> = if n_points == 1 {
        vec![lo]
    } else {
        let h = (hi - lo) / (n_points - 1) as f64;
        (0..n_points).map(|i| lo + h * i as f64).collect()
    };
    let weight = match measure {
        MeasureKind::Counting => 1.0,
        MeasureKind::Lebesgue => (hi - lo) / n_points as f64,
    };
    Grid::new(coords, vec![weight; n_points], 1)
}

/// Tensor-product uniform grid on `[lo, hi]^dim` in row-major lexicographic order.
pub fn build_uniform_grid_nd(
    points_per_axis: usize,
    interval: [f64; 2],
    dim: usize,
    measure: MeasureKind,
) -> Result<Grid> {
    let axis = build_uniform_grid(points_per_axis, interval, MeasureKind::Counting)?;
    if dim == 0 {
        return invalid("grid dimension must be positive");
    }
    let total = points_per_axis.pow(dim as u32);
    let mut coords = Vec::with_capacity(total * dim);
    for flat in 0..total {
        let mut rem = flat;
        let mut idx = vec![0usize; dim];
        for k in (0..dim).rev() {
            idx[k] = rem % points_per_axis;
            rem /= points_per_axis;
        }
        coords.extend(idx.iter().map(|&i| axis.coords[i]));
    }
    let weight = match measure {
        MeasureKind::Counting => 1.0,
        MeasureKind::Lebesgue => ((interval[1] - interval[0]) / points_per_axis as f64).powi(dim as i32),
    };
    Grid::new(coords, vec![weight; total], dim)
}

/// A real value attached to every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct GridFunction(Vec<f64>);

impl GridFunction {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid function"));
        }
        Ok(GridFunction(values))
    }

    pub fn zeros(n: usize) -> Self {
        GridFunction(vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn support(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    fn check_grid(&self, grid: &Grid) -> Result<()> {
        check_len(grid.len(), self.len())
    }
}

impl TryFrom<Vec<f64>> for GridFunction {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        GridFunction::new(v)
    }
}

impl From<GridFunction> for Vec<f64> {
    fn from(g: GridFunction) -> Vec<f64> {
        g.0
    }
}

/// `sum_t mu_t |g_t|`.
pub fn weighted_l1_norm(g: &GridFunction, grid: &Grid) -> Result<f64> {
    g.check_grid(grid)?;
    Ok(g.0.iter().zip(grid.weights()).map(|(v, m)| m * v.abs()).sum())
}

/// `<f, g> = sum_t mu_t f_t g_t`.
pub fn pairing(f: &GridFunction, g: &GridFunction, grid: &Grid) -> Result<f64> {
    f.check_grid(grid)?;
    g.check_grid(grid)?;
    Ok(f.0
        .iter()
        .zip(&g.0)
        .zip(grid.weights())
        .map(|((a, b), m)| m * a * b)
        .sum())
}

/// Element of the subdifferential of the L1 norm at `lambda`: the sign on the
/// support, `fill` (or zero) elsewhere.
pub fn canonical_subgradient(lambda: &GridFunction, fill: Option<&GridFunction>) -> Result<GridFunction> {
    if let Some(fill) = fill {
        check_len(lambda.len(), fill.len())?;
        if let Some(v) = fill.values().iter().find(|v| v.abs() > 1.0) {
            return invalid(format!("subgradient fill value {v} outside [-1, 1]"));
        }
    }
    let values = lambda
        .values()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l != 0.0 {
                l.signum()
            } else {
                fill.map_or(0.0, |f| f.values()[i])
            }
        })
        .collect();
    Ok(GridFunction(values))
}

/// Indices with `|w_t| >= 1/2`.
pub fn dominant_set(w: &GridFunction) -> Result<Vec<usize>> {
    if let Some(v) = w.values().iter().find(|v| v.abs() > 1.0) {
        return invalid(format!("subgradient entry {v} outside [-1, 1]"));
    }
    Ok(w.values()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() >= DOMINANT_LEVEL)
        .map(|(i, _)| i)
        .collect())
}

/// Subgradient together with the cone parameter `b` (possibly infinite).
#[derive(Debug, Clone)]
pub struct ConeSpec {
    w: GridFunction,
    b: f64,
    dominant: Vec<usize>,
}

impl ConeSpec {
    pub fn new(w: GridFunction, b: f64) -> Result<Self> {
        if b.is_nan() || b < 0.0 {
            return invalid(format!("cone parameter b must be nonnegative, got {b}"));
        }
        let dominant = dominant_set(&w)?;
        Ok(ConeSpec { w, b, dominant })
    }

    pub fn w(&self) -> &GridFunction {
        &self.w
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn dominant_set(&self) -> &[usize] {
        &self.dominant
    }

    /// Whether `u` lies in the cone `{ sum_{off} mu|u| <= b <w,u> }`.
    pub fn contains(&self, u: &GridFunction, grid: &Grid, tol: f64) -> Result<bool> {
        let inner = pairing(&self.w, u, grid)?;
        let mut on = vec![false; grid.len()];
        for &i in &self.dominant {
            on[i] = true;
        }
        let off: f64 = u
            .values()
            .iter()
            .zip(grid.weights())
            .zip(&on)
            .filter(|(_, on)| !**on)
            .map(|((v, m), _)| m * v.abs())
            .sum();
        if self.b.is_infinite() {
            return Ok(true);
        }
        Ok(off <= self.b * inner + tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// `+-sd` with equal probability.
    ScaledRademacher,
}

/// The true linear model `Y = a* + <lambda*, X> + xi`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleSpec {
    pub slope: GridFunction,
    pub intercept: f64,
    pub noise_sd: f64,
    #[serde(default)]
    pub noise_kind: NoiseKind,
}

impl OracleSpec {
    pub fn new(slope: GridFunction, intercept: f64, noise_sd: f64, noise_kind: NoiseKind) -> Result<Self> {
        if !(noise_sd.is_finite() && noise_sd >= 0.0) {
            return invalid(format!("noise_sd must be finite and nonnegative, got {noise_sd}"));
        }
        if !intercept.is_finite() {
            return Err(Error::NonFinite("oracle intercept"));
        }
        Ok(OracleSpec {
            slope,
            intercept,
            noise_sd,
            noise_kind,
        })
    }
}
