//! Covariance kernels, Gram matrices with their Cholesky factors, and the
//! design pseudometric.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{check_len, invalid, Error, Result};
use crate::grid::Grid;
use crate::linalg;
use crate::quadrature::CompositeGauss;

fn default_rate() -> f64 {
    1.0
}

/// Covariance kernel family. Serialized with a `kind` discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `1 + s ^ t`: Brownian motion started from an independent standard normal.
    BrownianReleased,
    /// `s ^ t`.
    Brownian,
    /// `exp(-rate |s - t|)`.
    OrnsteinUhlenbeck {
        #[serde(default = "default_rate")]
        rate: f64,
    },
    /// Stationary kernel with spectral density `amplitude * (1 + |u|^2)^-p`.
    StationarySpectral { p: f64, amplitude: f64, dim: usize },
    /// Independent-looking blocks on contiguous index ranges. Between-block
    /// covariances come from a shared driver scaled by `cross_scale`.
    Block {
        partition: Vec<[usize; 2]>,
        inner: Vec<KernelSpec>,
        cross_scale: f64,
    },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::BrownianReleased | KernelSpec::Brownian => Ok(()),
            KernelSpec::OrnsteinUhlenbeck { rate } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    return invalid(format!("OU rate must be positive, got {rate}"));
                }
                Ok(())
            }
            KernelSpec::StationarySpectral { p, amplitude, dim } => {
                if *dim == 0 {
                    return invalid("spectral kernel dimension must be positive");
                }
                if !(p.is_finite() && *p > *dim as f64 / 2.0) {
                    return invalid(format!(
                        "spectral exponent p = {p} must exceed dim/2 = {} for an integrable density",
                        *dim as f64 / 2.0
                    ));
                }
                if !(amplitude.is_finite() && *amplitude > 0.0) {
                    return invalid(format!("spectral amplitude must be positive, got {amplitude}"));
                }
                Ok(())
            }
            KernelSpec::Block {
                partition,
                inner,
                cross_scale,
            } => {
                if !(0.0..=1.0).contains(cross_scale) {
                    return invalid(format!("cross_scale must lie in [0, 1], got {cross_scale}"));
                }
                if partition.len() != inner.len() {
                    return Err(Error::SizeMismatch {
                        expected: partition.len(),
                        got: inner.len(),
                    });
                }
                if partition.is_empty() {
                    return invalid("block kernel needs at least one block");
                }
                let mut next = 0;
                for [lo, hi] in partition {
                    if *lo != next || hi <= lo {
                        return invalid("block ranges must be contiguous, ordered and non-empty");
                    }
                    next = *hi;
                }
                for k in inner {
                    if matches!(k, KernelSpec::Block { .. }) {
                        return invalid("nested block kernels are not supported");
                    }
                    k.validate()?;
                }
                Ok(())
            }
        }
    }
}

/// Kernel value `k(s, t)`. Block kernels are defined on index sets and have
/// to go through [`gram_matrix`].
pub fn kernel_eval(spec: &KernelSpec, s: &[f64], t: &[f64]) -> Result<f64> {
    spec.validate()?;
    check_len(s.len(), t.len())?;
    match spec {
        KernelSpec::BrownianReleased | KernelSpec::Brownian => {
            if s.len() != 1 {
                return invalid("Brownian kernels are one-dimensional");
            }
            if s[0] < 0.0 || t[0] < 0.0 {
                return invalid("Brownian kernels need nonnegative times");
            }
            let base = s[0].min(t[0]);
            Ok(if matches!(spec, KernelSpec::BrownianReleased) {
                1.0 + base
            } else {
                base
            })
        }
        KernelSpec::OrnsteinUhlenbeck { rate } => Ok((-rate * distance(s, t)).exp()),
        KernelSpec::StationarySpectral { p, amplitude, dim } => {
            if s.len() != *dim {
                return Err(Error::SizeMismatch {
                    expected: *dim,
                    got: s.len(),
                });
            }
            stationary_kernel_from_spectral(*p, *amplitude, *dim, distance(s, t))
        }
        KernelSpec::Block { .. } => invalid("block kernels are evaluated on grid indices via gram_matrix"),
    }
}

fn distance(s: &[f64], t: &[f64]) -> f64 {
    s.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// `B * int_{R^dim} exp(i <tau, u>) (1 + |u|^2)^-p du` at lag `|tau| = tau`.
///
/// Evaluated through the subordination identity
/// `(1 + |u|^2)^-p = Gamma(p)^-1 int_0^inf s^(p-1) exp(-s (1 + |u|^2)) ds`,
/// which after the Gaussian Fourier transform leaves
/// `B pi^(dim/2) / Gamma(p) * int_0^inf s^(p - 1 - dim/2) exp(-s - tau^2 / 4s) ds`,
/// a positive log-concave integrand (in `x = log s`) with no oscillation.
pub fn stationary_kernel_from_spectral(p: f64, amplitude: f64, dim: usize, tau: f64) -> Result<f64> {
    let half_dim = dim as f64 / 2.0;
    if dim == 0 || !(p > half_dim) {
        return invalid(format!("spectral exponent p = {p} must exceed dim/2 = {half_dim}"));
    }
    if !tau.is_finite() {
        return Err(Error::NonFinite("lag"));
    }
    let a = p - half_dim;
    let c = tau * tau / 4.0;
    let log_integrand = move |x: f64| a * x - x.exp() - c * (-x).exp();
    // mode of the log-concave integrand: y^2 - a y - c = 0 with y = e^x
    let mode = ((a + (a * a + 4.0 * c).sqrt()) / 2.0).ln();
    let peak = log_integrand(mode);
    let drop = 60.0;
    let mut step = 1.0;
    let mut lo = mode - step;
    while log_integrand(lo) > peak - drop {
        step *= 1.5;
        lo = mode - step;
    }
    step = 1.0;
    let mut hi = mode + step;
    while log_integrand(hi) > peak - drop {
        step *= 1.5;
        hi = mode + step;
    }
    let rule = CompositeGauss::new(12);
    let f = move |x: f64| (log_integrand(x) - peak).exp();
    let scaled = rule.integrate_adaptive(&f, lo, hi, 1e-13, 0.0)?;
    let log_prefactor = amplitude.ln() + half_dim * std::f64::consts::PI.ln() - gamma(p).ln();
    Ok((log_prefactor + peak).exp() * scaled)
}

/// Gram matrix of a kernel on a grid with its (jittered) Cholesky factor.
#[derive(Debug, Clone)]
pub struct GramModel {
    grid: Grid,
    k: DMatrix<f64>,
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    jitter: f64,
    spec: Option<KernelSpec>,
    partition: Option<Vec<Range<usize>>>,
}

impl GramModel {
    /// Wraps an explicit covariance matrix.
    pub fn from_matrix(grid: Grid, k: DMatrix<f64>, mean: Option<Vec<f64>>) -> Result<Self> {
        let n = grid.len();
        if k.nrows() != n || k.ncols() != n {
            return Err(Error::SizeMismatch {
                expected: n,
                got: k.nrows(),
            });
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance matrix"));
        }
        let asym = linalg::max_abs_diff(&k, &k.transpose());
        let scale = k.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        if asym > 1e-12 * scale {
            return invalid(format!("covariance matrix is not symmetric (max asymmetry {asym:e})"));
        }
        let k = 0.5 * (&k + k.transpose());
        let mean = match mean {
            Some(m) => {
                check_len(n, m.len())?;
                DVector::from_vec(m)
            }
            None => DVector::zeros(n),
        };
        let (chol, jitter) = linalg::cholesky_jittered(&k)?;
        Ok(GramModel {
            grid,
            k,
            mean,
            chol,
            jitter,
            spec: None,
            partition: None,
        })
    }

    pub fn with_partition(mut self, partition: Vec<Range<usize>>) -> Result<Self> {
        let mut next = 0;
        for r in &partition {
            if r.start != next || r.end <= r.start {
                return invalid("partition blocks must be contiguous, ordered and non-empty");
            }
            next = r.end;
        }
        if next != self.len() {
            return invalid(format!("partition covers {next} of {} points", self.len()));
        }
        self.partition = Some(partition);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn spec(&self) -> Option<&KernelSpec> {
        self.spec.as_ref()
    }

    pub fn partition(&self) -> Option<&[Range<usize>]> {
        self.partition.as_deref()
    }

    pub fn is_centered(&self) -> bool {
        self.mean.iter().all(|m| *m == 0.0)
    }

    /// `K + m m^T`, the second-moment matrix of the design.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.k + &self.mean * self.mean.transpose()
    }

    /// `diag(mu) K diag(mu)`.
    pub fn weighted_k(&self) -> DMatrix<f64> {
        let w = self.grid.weights();
        DMatrix::from_fn(self.len(), self.len(), |i, j| w[i] * self.k[(i, j)] * w[j])
    }

    /// Max-norm of `L L^T - (K + jitter I)`.
    pub fn factorization_error(&self) -> f64 {
        let mut shifted = self.k.clone();
        for i in 0..self.len() {
            shifted[(i, i)] += self.jitter;
        }
        linalg::max_abs_diff(&(&self.chol * self.chol.transpose()), &shifted)
    }
}

/// Builds the Gram matrix `K_ij = k(t_i, t_j)` and factors it.
pub fn gram_matrix(spec: &KernelSpec, grid: &Grid) -> Result<GramModel> {
    gram_matrix_with_mean(spec, grid, None)
}

pub fn gram_matrix_with_mean(spec: &KernelSpec, grid: &Grid, mean: Option<Vec<f64>>) -> Result<GramModel> {
    spec.validate()?;
    let k = raw_gram(spec, grid)?;
    let mut model = GramModel::from_matrix(grid.clone(), k, mean)?;
    if let KernelSpec::Block { partition, .. } = spec {
        model = model.with_partition(partition.iter().map(|[a, b]| *a..*b).collect())?;
    }
    model.spec = Some(spec.clone());
    Ok(model)
}

fn raw_gram(spec: &KernelSpec, grid: &Grid) -> Result<DMatrix<f64>> {
    let n = grid.len();
    match spec {
        KernelSpec::StationarySpectral { p, amplitude, dim } => {
            if grid.dim() != *dim {
                return Err(Error::SizeMismatch {
                    expected: *dim,
                    got: grid.dim(),
                });
            }
            // evaluate once per distinct lag
            let mut lags = DMatrix::zeros(n, n);
            let mut scale = 0.0f64;
            for i in 0..n {
                for j in 0..i {
                    let d = distance(grid.point(i), grid.point(j));
                    lags[(i, j)] = d;
                    scale = scale.max(d);
                }
            }
            let quantum = scale.max(1e-300) * 1e-12;
            let mut cache: HashMap<i64, f64> = HashMap::new();
            let k0 = stationary_kernel_from_spectral(*p, *amplitude, *dim, 0.0)?;
            let mut k = DMatrix::from_element(n, n, k0);
            for i in 0..n {
                for j in 0..i {
                    let tau = lags[(i, j)];
                    let key = (tau / quantum).round() as i64;
                    let v = match cache.get(&key) {
                        Some(v) => *v,
                        None => {
                            let v = stationary_kernel_from_spectral(*p, *amplitude, *dim, tau)?;
                            cache.insert(key, v);
                            v
                        }
                    };
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            Ok(k)
        }
        KernelSpec::Block {
            partition,
            inner,
            cross_scale,
        } => {
            let covered = partition.last().map_or(0, |r| r[1]);
            if covered != n {
                return invalid(format!("block partition covers {covered} of {n} grid points"));
            }
            let mut k = DMatrix::zeros(n, n);
            let mut factors = Vec::with_capacity(partition.len());
            for ([lo, hi], spec) in partition.iter().zip(inner) {
                let idx: Vec<usize> = (*lo..*hi).collect();
                let sub = grid.restrict(&idx)?;
                let kb = raw_gram(spec, &sub)?;
                k.view_mut((*lo, *lo), (hi - lo, hi - lo)).copy_from(&kb);
                if *cross_scale > 0.0 {
                    factors.push(linalg::cholesky_jittered(&kb)?.0);
                }
            }
            if *cross_scale > 0.0 {
                // Block j is A_j (sqrt(1-c) z_j + sqrt(c) P_j z_0) where P_j keeps the
                // first m_j coordinates of a shared driver z_0, so the cross block is
                // c * A_i P_i P_j^T A_j^T and the whole matrix stays PSD.
                for (bi, [lo_i, hi_i]) in partition.iter().enumerate() {
                    for (bj, [lo_j, hi_j]) in partition.iter().enumerate().take(bi) {
                        let m = (hi_i - lo_i).min(hi_j - lo_j);
                        let ai = factors[bi].columns(0, m);
                        let aj = factors[bj].columns(0, m);
                        let cross = (ai * aj.transpose()) * *cross_scale;
                        k.view_mut((*lo_i, *lo_j), (hi_i - lo_i, hi_j - lo_j)).copy_from(&cross);
                        k.view_mut((*lo_j, *lo_i), (hi_j - lo_j, hi_i - lo_i))
                            .copy_from(&cross.transpose());
                    }
                }
            }
            Ok(k)
        }
        _ => {
            let mut k = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let v = kernel_eval(spec, grid.point(i), grid.point(j))?;
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            Ok(k)
        }
    }
}

/// `d_X(t_i, t_j) = sqrt(K_ii + K_jj - 2 K_ij)`.
pub fn pseudometric_dx(model: &GramModel, i: usize, j: usize) -> Result<f64> {
    let n = model.len();
    if i >= n || j >= n {
        return invalid(format!("index out of range for grid of size {n}"));
    }
    let k = model.k();
    let v = k[(i, i)] + k[(j, j)] - 2.0 * k[(i, j)];
    if v < -1e-12 {
        return Err(Error::NotPositiveDefinite {
            pivot: i.max(j),
            value: v,
            jitter: 0.0,
        });
    }
    Ok(v.max(0.0).sqrt())
}
