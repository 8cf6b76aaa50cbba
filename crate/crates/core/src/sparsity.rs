//! RKHS norms, subgradient constructions and the alignment coefficient.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::covariance::GramModel;
use crate::error::{check_len, invalid, Error, Result};
use crate::grid::{dominant_set, Grid, GridFunction};
use crate::linalg;
use crate::quadrature::CompositeGauss;

/// Relative residual above which `w` counts as outside the range of `K`.
pub const RANGE_TOL: f64 = 1e-6;

/// Default cone parameter.
pub const DEFAULT_B: f64 = 16.0;

/// `||w||_K = sqrt(w^T K^+ w)`. The measure weights cancel out of the
/// weighted form, so only the Cholesky factor of `K` is needed.
pub fn rkhs_norm(model: &GramModel, w: &GridFunction) -> Result<f64> {
    check_len(model.len(), w.len())?;
    rkhs_norm_factored(model.k(), model.chol(), w.values())
}

/// RKHS norm for an explicit covariance matrix.
pub fn rkhs_norm_matrix(k: &DMatrix<f64>, w: &[f64]) -> Result<f64> {
    check_len(k.nrows(), w.len())?;
    let (l, _) = linalg::cholesky_jittered(k)?;
    rkhs_norm_factored(k, &l, w)
}

fn rkhs_norm_factored(k: &DMatrix<f64>, l: &DMatrix<f64>, w: &[f64]) -> Result<f64> {
    let wv = DVector::from_column_slice(w);
    let wn = wv.norm();
    if wn == 0.0 {
        return Ok(0.0);
    }
    let half = linalg::solve_lower(l, &wv);
    let x = linalg::solve_lower_transpose(l, &half);
    let residual = (k * &x - &wv).norm() / wn;
    if !(residual <= RANGE_TOL) {
        return Err(Error::InfiniteRkhsNorm { residual });
    }
    Ok(half.norm())
}

/// `w_1^2 / (1 + t_1) + sum_j (w_j - w_{j-1})^2 / (t_j - t_{j-1})`: the
/// squared RKHS norm for the released Brownian kernel `1 + s ^ t`.
pub fn discrete_sobolev_norm_bm(grid: &Grid, w: &GridFunction) -> Result<f64> {
    check_len(grid.len(), w.len())?;
    if grid.dim() != 1 {
        return invalid("discrete Sobolev norm needs a one-dimensional grid");
    }
    let t = grid.coords();
    let v = w.values();
    if t[0] < 0.0 {
        return invalid("Brownian grids start at t >= 0");
    }
    let mut total = v[0] * v[0] / (1.0 + t[0]);
    for j in 1..t.len() {
        let dt = t[j] - t[j - 1];
        if !(dt > 0.0) {
            return invalid("grid points must be strictly increasing");
        }
        total += (v[j] - v[j - 1]).powi(2) / dt;
    }
    Ok(total)
}

/// Closed-form squared RKHS norm for the kernel `exp(-a |s - t|)` on an
/// interval: `(1 / 2a) [ int w'^2 + a^2 int w^2 + a (w(lo)^2 + w(hi)^2) ]`,
/// with forward differences and the trapezoid rule. At `a = 1/2` this is
/// `(w(lo)^2 + w(hi)^2) / 2 + int w^2 / 4 + int w'^2`.
pub fn ou_rkhs_norm_closed(grid: &Grid, w: &GridFunction, rate: f64) -> Result<f64> {
    check_len(grid.len(), w.len())?;
    if grid.dim() != 1 {
        return invalid("OU closed form needs a one-dimensional grid");
    }
    if grid.len() < 3 {
        return invalid("OU closed form needs at least 3 grid points");
    }
    if !(rate > 0.0 && rate.is_finite()) {
        return invalid("OU rate must be positive");
    }
    let t = grid.coords();
    let v = w.values();
    let mut deriv = 0.0;
    let mut sq = 0.0;
    for j in 1..t.len() {
        let dt = t[j] - t[j - 1];
        if !(dt > 0.0) {
            return invalid("grid points must be strictly increasing");
        }
        deriv += (v[j] - v[j - 1]).powi(2) / dt;
        sq += 0.5 * dt * (v[j] * v[j] + v[j - 1] * v[j - 1]);
    }
    let ends = v[0] * v[0] + v[v.len() - 1] * v[v.len() - 1];
    Ok((deriv + rate * rate * sq + rate * ends) / (2.0 * rate))
}

/// Squared Sobolev norm `int (1 + |xi|^2)^p |f^(xi)|^2 d xi` of the grid
/// function extended by zero, from a DFT of the 4x zero-padded values
/// (unitary Fourier convention). Needs a uniform tensor grid.
pub fn fourier_sobolev_norm(grid: &Grid, w: &GridFunction, p: f64) -> Result<f64> {
    check_len(grid.len(), w.len())?;
    if !p.is_finite() {
        return Err(Error::NonFinite("Sobolev exponent"));
    }
    let d = grid.dim();
    let (m, h) = tensor_shape(grid)?;
    let big = 4 * m;
    let total = big.pow(d as u32);
    let mut data = vec![Complex64::new(0.0, 0.0); total];
    for (i, v) in w.values().iter().enumerate() {
        data[padded_index(i, m, big, d)] = Complex64::new(*v, 0.0);
    }
    let fft = FftPlanner::new().plan_fft_forward(big);
    let mut line = vec![Complex64::new(0.0, 0.0); big];
    for axis in 0..d {
        let stride = big.pow((d - 1 - axis) as u32);
        for start in 0..total {
            // visit each line along `axis` once, from its first element
            if (start / stride) % big != 0 {
                continue;
            }
            for k in 0..big {
                line[k] = data[start + k * stride];
            }
            fft.process(&mut line);
            for k in 0..big {
                data[start + k * stride] = line[k];
            }
        }
    }
    let cell: f64 = h.iter().product();
    let mut sum = 0.0;
    for (idx, c) in data.iter().enumerate() {
        let mut xi2 = 0.0;
        let mut rest = idx;
        for axis in (0..d).rev() {
            let k = rest % big;
            rest /= big;
            let kk = if k < big / 2 { k as f64 } else { k as f64 - big as f64 };
            let xi = 2.0 * PI * kk / (big as f64 * h[axis]);
            xi2 += xi * xi;
        }
        sum += (1.0 + xi2).powf(p) * c.norm_sqr();
    }
    Ok(cell * sum / total as f64)
}

/// Points per axis and spacing of a uniform tensor grid (row-major order).
fn tensor_shape(grid: &Grid) -> Result<(usize, Vec<f64>)> {
    let d = grid.dim();
    let n = grid.len();
    let m = (n as f64).powf(1.0 / d as f64).round() as usize;
    if m.pow(d as u32) != n {
        return invalid("grid is not a full tensor grid");
    }
    if m < 2 {
        return Ok((m, vec![1.0; d]));
    }
    let mut h = vec![0.0; d];
    for (axis, ha) in h.iter_mut().enumerate() {
        let stride = m.pow((d - 1 - axis) as u32);
        *ha = grid.point(stride)[axis] - grid.point(0)[axis];
        if !(*ha > 0.0) {
            return invalid("grid is not uniform");
        }
    }
    for i in 0..n {
        let mut rest = i;
        for axis in (0..d).rev() {
            let k = rest % m;
            rest /= m;
            let expect = grid.point(0)[axis] + k as f64 * h[axis];
            if (grid.point(i)[axis] - expect).abs() > 1e-9 * (1.0 + expect.abs()) {
                return invalid("grid is not uniform");
            }
        }
    }
    Ok((m, h))
}

fn padded_index(i: usize, m: usize, big: usize, d: usize) -> usize {
    let mut rest = i;
    let mut out = 0;
    let mut scale = 1;
    for _ in 0..d {
        out += (rest % m) * scale;
        rest /= m;
        scale *= big;
    }
    out
}

/// How to build a smooth subgradient for a spike pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "snake_case")]
pub enum SpikeStyle {
    /// Piecewise linear between the signed spikes, decaying to zero over the
    /// minimum spike separation outside them (one-dimensional grids).
    Interpolating,
    /// Sum of `sign_j (phi_r * 1_{B(t_j, 2r)})`: equal to the sign within
    /// `r` of each spike and zero beyond `3r`.
    Mollified { r: f64 },
}

/// A subgradient of `||lambda||_1` that is smooth between spikes.
pub fn spike_subgradient(grid: &Grid, lambda: &GridFunction, style: SpikeStyle) -> Result<GridFunction> {
    check_len(grid.len(), lambda.len())?;
    let support = lambda.support();
    if support.is_empty() {
        return invalid("spike subgradient needs a nonzero lambda");
    }
    let signs: Vec<f64> = support.iter().map(|&i| lambda.values()[i].signum()).collect();
    let values = match style {
        SpikeStyle::Interpolating => interpolate_signs(grid, &support, &signs)?,
        SpikeStyle::Mollified { r } => mollify_signs(grid, &support, &signs, r)?,
    };
    GridFunction::new(values)
}

fn interpolate_signs(grid: &Grid, support: &[usize], signs: &[f64]) -> Result<Vec<f64>> {
    if grid.dim() != 1 {
        return invalid("interpolating subgradient needs a one-dimensional grid");
    }
    let t = grid.coords();
    let pos: Vec<f64> = support.iter().map(|&i| t[i]).collect();
    let decay = if pos.len() > 1 {
        pos.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    } else {
        (t[t.len() - 1] - t[0]) / 4.0
    };
    let mut out = vec![0.0; t.len()];
    let last = pos.len() - 1;
    for (i, &ti) in t.iter().enumerate() {
        out[i] = if ti <= pos[0] {
            ramp(signs[0], pos[0] - ti, decay)
        } else if ti >= pos[last] {
            ramp(signs[last], ti - pos[last], decay)
        } else {
            let k = pos.partition_point(|&p| p <= ti) - 1;
            let frac = (ti - pos[k]) / (pos[k + 1] - pos[k]);
            signs[k] + frac * (signs[k + 1] - signs[k])
        };
    }
    for (&i, &s) in support.iter().zip(signs) {
        out[i] = s;
    }
    Ok(out)
}

fn ramp(sign: f64, dist: f64, decay: f64) -> f64 {
    if decay > 0.0 {
        sign * (1.0 - dist / decay).max(0.0)
    } else if dist == 0.0 {
        sign
    } else {
        0.0
    }
}

/// The fixed bump `exp(1 - 1/(1 - x^2))` on `|x| < 1`.
fn bump(x2: f64) -> f64 {
    if x2 < 1.0 {
        (1.0 - 1.0 / (1.0 - x2)).exp()
    } else {
        0.0
    }
}

/// Profile `V(rho)` of `phi * 1_{B(0,2)}` at distance `rho` (unit radius),
/// tabulated on `[1, 3]`.
struct MollifierProfile {
    table: Vec<f64>,
}

impl MollifierProfile {
    const SIZE: usize = 401;

    fn new(dim: usize) -> Self {
        let rule = CompositeGauss::new(8);
        let table = if dim == 1 {
            // V(rho) = 1 - Phi(rho - 2) with Phi the CDF of the bump
            let f = |x: f64| bump(x * x);
            let total = rule.integrate(&f, -1.0, 1.0, 64);
            (0..Self::SIZE)
                .map(|k| {
                    let rho = 1.0 + 2.0 * k as f64 / (Self::SIZE - 1) as f64;
                    let upper = (rho - 2.0).clamp(-1.0, 1.0);
                    1.0 - rule.integrate(&f, -1.0, upper, 64) / total
                })
                .collect()
        } else {
            // coordinates (y1, r_perp) with r_perp^(dim-2) Jacobian
            let jac = |r: f64| r.powi(dim as i32 - 2);
            let slab = |y1: f64, cap: f64| {
                let top = (1.0 - y1 * y1).max(0.0).sqrt().min(cap.max(0.0));
                if top <= 0.0 {
                    0.0
                } else {
                    rule.integrate(&|r: f64| jac(r) * bump(y1 * y1 + r * r), 0.0, top, 8)
                }
            };
            let total = rule.integrate(&|y1: f64| slab(y1, f64::INFINITY), -1.0, 1.0, 64);
            (0..Self::SIZE)
                .map(|k| {
                    let rho = 1.0 + 2.0 * k as f64 / (Self::SIZE - 1) as f64;
                    let inside = |y1: f64| {
                        let rem = 4.0 - (rho - y1).powi(2);
                        if rem <= 0.0 {
                            0.0
                        } else {
                            slab(y1, rem.sqrt())
                        }
                    };
                    (rule.integrate(&inside, -1.0, 1.0, 64) / total).clamp(0.0, 1.0)
                })
                .collect()
        };
        MollifierProfile { table }
    }

    fn eval(&self, rho: f64) -> f64 {
        if rho <= 1.0 {
            return 1.0;
        }
        if rho >= 3.0 {
            return 0.0;
        }
        let x = (rho - 1.0) / 2.0 * (Self::SIZE - 1) as f64;
        let k = (x.floor() as usize).min(Self::SIZE - 2);
        let frac = x - k as f64;
        (self.table[k] * (1.0 - frac) + self.table[k + 1] * frac).clamp(0.0, 1.0)
    }
}

fn mollify_signs(grid: &Grid, support: &[usize], signs: &[f64], r: f64) -> Result<Vec<f64>> {
    if !(r > 0.0 && r.is_finite()) {
        return invalid("mollifier radius must be positive");
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    for (a, &i) in support.iter().enumerate() {
        for &j in &support[a + 1..] {
            if dist(grid.point(i), grid.point(j)) < 4.0 * r {
                return invalid(format!("spikes closer than 4r = {}", 4.0 * r));
            }
        }
    }
    let profile = MollifierProfile::new(grid.dim());
    let mut out = vec![0.0; grid.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let p = grid.point(i);
        let mut v = 0.0;
        for (&j, &s) in support.iter().zip(signs) {
            v += s * profile.eval(dist(p, grid.point(j)) / r);
        }
        *o = v.clamp(-1.0, 1.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignmentResult {
    pub value: f64,
    /// Maximizer `u`, scaled to unit `L2(Pi)` norm.
    pub maximizer: GridFunction,
    /// `None` encodes `b = infinity`.
    pub b_used: Option<f64>,
    /// Relative KKT residual of the inner program (0 for closed forms).
    pub certificate: f64,
}

/// Alignment coefficient `a^(b)(w) = sup { <w,u> : u in C_w^(b), ||f_u|| <= 1 }`.
///
/// With `z = W u` this is `1 / sqrt(min z^T K z)` subject to `w^T z = 1` and
/// `sum_{t not in T_w} |z_t| <= b`. `b = f64::INFINITY` gives the RKHS norm.
pub fn alignment_coefficient(model: &GramModel, w: &GridFunction, b: f64, tol: f64) -> Result<AlignmentResult> {
    check_len(model.len(), w.len())?;
    if !(b >= 0.0) {
        return invalid("cone parameter b must be nonnegative");
    }
    if !(tol > 0.0) {
        return invalid("tol must be positive");
    }
    let on = dominant_set(w)?;
    let q = if model.is_centered() {
        model.k().clone()
    } else {
        log::warn!("alignment on a non-centered design uses the second-moment matrix");
        model.second_moment()
    };
    let mu = model.grid().weights();
    let wv = DVector::from_column_slice(w.values());
    let finish = |z: DVector<f64>, value: f64, certificate: f64| -> Result<AlignmentResult> {
        let u: Vec<f64> = z.iter().zip(mu).map(|(zi, m)| zi / m * value).collect();
        Ok(AlignmentResult {
            value,
            maximizer: GridFunction::new(u)?,
            b_used: b.is_finite().then_some(b),
            certificate,
        })
    };

    let free_solution = |idx: &[usize]| -> Result<(DVector<f64>, f64)> {
        // min z^T Q z on coordinates idx with w^T z = 1
        let qs = linalg::principal_submatrix(&q, idx);
        let ws = DVector::from_iterator(idx.len(), idx.iter().map(|&i| w.values()[i]));
        let (l, _) = linalg::cholesky_jittered(&qs)?;
        let norm = rkhs_norm_factored(&qs, &l, ws.as_slice())?;
        let x = linalg::cholesky_solve(&l, &ws);
        let mut z = DVector::zeros(model.len());
        for (k, &i) in idx.iter().enumerate() {
            z[i] = x[k] / (norm * norm);
        }
        Ok((z, norm))
    };

    if b == 0.0 || on.len() == model.len() {
        if on.is_empty() {
            return Err(Error::Infeasible("dominant set is empty and b = 0".into()));
        }
        let (z, norm) = free_solution(&on)?;
        return finish(z, norm, 0.0);
    }
    let all: Vec<usize> = (0..model.len()).collect();
    let off: Vec<usize> = all.iter().copied().filter(|i| on.binary_search(i).is_err()).collect();
    let unconstrained = free_solution(&all);
    if b.is_infinite() {
        let (z, norm) = unconstrained?;
        return finish(z, norm, 0.0);
    }
    if let Ok((z, norm)) = &unconstrained {
        let off_mass: f64 = off.iter().map(|&i| z[i].abs()).sum();
        if off_mass <= b {
            return finish(z.clone(), *norm, 0.0);
        }
    }
    if on.is_empty() {
        let max_off = off.iter().map(|&i| w.values()[i].abs()).fold(0.0, f64::max);
        if b * max_off <= 1.0 {
            return Err(Error::Infeasible(format!(
                "empty dominant set and b * max|w| = {} <= 1",
                b * max_off
            )));
        }
    }
    let cone = Cone {
        w: &wv,
        on: &on,
        off: &off,
        b,
    };
    let (z, cert) = minimize_on_cone(&q, &cone, unconstrained.ok().map(|(z, _)| z), tol)?;
    let min = z.dot(&(&q * &z));
    if !(min > 0.0) {
        return Err(Error::InfiniteRkhsNorm { residual: min });
    }
    finish(z, 1.0 / min.sqrt(), cert)
}

struct Cone<'a> {
    w: &'a DVector<f64>,
    on: &'a [usize],
    off: &'a [usize],
    b: f64,
}

impl Cone<'_> {
    fn at(&self, y: &DVector<f64>, nu: f64, out: &mut DVector<f64>, buf: &mut Vec<f64>) -> f64 {
        for &i in self.on {
            out[i] = y[i] + nu * self.w[i];
        }
        buf.clear();
        buf.extend(self.off.iter().map(|&i| y[i] + nu * self.w[i]));
        linalg::project_l1_ball(buf, self.b);
        for (k, &i) in self.off.iter().enumerate() {
            out[i] = buf[k];
        }
        self.w.dot(out) - 1.0
    }

    /// Exact Euclidean projection onto `{w^T z = 1} ∩ {||z_off||_1 <= b}`:
    /// the multiplier of the hyperplane solves a monotone scalar equation.
    fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(y.len());
        let mut buf = Vec::with_capacity(self.off.len());
        let g0 = self.at(y, 0.0, &mut z, &mut buf);
        if g0 == 0.0 {
            return z;
        }
        let scale = self.w.norm_squared().max(1e-300);
        let dir = -g0.signum();
        let mut step = g0.abs() / scale;
        let (mut lo, mut glo, mut hi, mut ghi);
        let mut prev = (0.0, g0);
        loop {
            let nu = dir * step;
            let g = self.at(y, nu, &mut z, &mut buf);
            if g.signum() != g0.signum() || g == 0.0 {
                if dir > 0.0 {
                    (lo, glo, hi, ghi) = (prev.0, prev.1, nu, g);
                } else {
                    (lo, glo, hi, ghi) = (nu, g, prev.0, prev.1);
                }
                break;
            }
            prev = (nu, g);
            step *= 2.0;
            if step > 1e300 {
                return z;
            }
        }
        // Illinois regula falsi on the piecewise-linear monotone g
        let mut side = 0i8;
        let mut nu = hi;
        for _ in 0..200 {
            nu = if ghi != glo { hi - ghi * (hi - lo) / (ghi - glo) } else { 0.5 * (lo + hi) };
            if !(nu > lo && nu < hi) {
                nu = 0.5 * (lo + hi);
            }
            let g = self.at(y, nu, &mut z, &mut buf);
            if g == 0.0 || (hi - lo) <= 1e-16 * (1.0 + nu.abs()) {
                break;
            }
            if g > 0.0 {
                hi = nu;
                ghi = g;
                if side == 1 {
                    glo *= 0.5;
                }
                side = 1;
            } else {
                lo = nu;
                glo = g;
                if side == -1 {
                    ghi *= 0.5;
                }
                side = -1;
            }
        }
        self.at(y, nu, &mut z, &mut buf);
        // remove the last rounding of the hyperplane constraint on the free block
        let won: f64 = self.on.iter().map(|&i| self.w[i] * self.w[i]).sum();
        if won > 0.0 {
            let gap = 1.0 - self.w.dot(&z);
            for &i in self.on {
                z[i] += gap * self.w[i] / won;
            }
        }
        z
    }

    fn off_mass(&self, z: &DVector<f64>) -> f64 {
        self.off.iter().map(|&i| z[i].abs()).sum()
    }
}

/// Relative KKT residual of `min z^T Q z` on the cone, with the two
/// multipliers fitted by least squares.
fn cone_kkt(q: &DMatrix<f64>, cone: &Cone, z: &DVector<f64>) -> f64 {
    let g = 2.0 * (q * z);
    let zmax = z.amax();
    let nz = |i: usize| z[i].abs() > 1e-12 * zmax;
    let active = cone.off_mass(z) >= cone.b * (1.0 - 1e-9);
    // rows: on coords and nonzero off coords; unknowns kappa, nu
    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    for &i in cone.on {
        rows.push((cone.w[i], 0.0, g[i]));
    }
    for &i in cone.off {
        if nz(i) {
            rows.push((cone.w[i], if active { -z[i].signum() } else { 0.0 }, g[i]));
        }
    }
    let (mut a11, mut a12, mut a22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (x1, x2, y) in &rows {
        a11 += x1 * x1;
        a12 += x1 * x2;
        a22 += x2 * x2;
        r1 += x1 * y;
        r2 += x2 * y;
    }
    let det = a11 * a22 - a12 * a12;
    let (kappa, nu) = if a22 > 0.0 && det.abs() > 1e-14 * a11 * a22 {
        let k = (a22 * r1 - a12 * r2) / det;
        let n = (a11 * r2 - a12 * r1) / det;
        if n >= 0.0 {
            (k, n)
        } else {
            (if a11 > 0.0 { r1 / a11 } else { 0.0 }, 0.0)
        }
    } else {
        (if a11 > 0.0 { r1 / a11 } else { 0.0 }, 0.0)
    };
    let mut worst = 0.0f64;
    for &i in cone.on {
        worst = worst.max((g[i] - kappa * cone.w[i]).abs());
    }
    for &i in cone.off {
        let rest = g[i] - kappa * cone.w[i];
        let r = if nz(i) {
            (rest + nu * z[i].signum()).abs()
        } else {
            (rest.abs() - nu).max(0.0)
        };
        worst = worst.max(r);
    }
    let feas = (cone.w.dot(z) - 1.0).abs() + (cone.off_mass(z) - cone.b).max(0.0);
    let scale = g.amax() + kappa.abs() * cone.w.amax() + 1e-300;
    worst / scale + feas
}

/// Equality-constrained QP on a fixed sign pattern.
fn cone_polish(q: &DMatrix<f64>, cone: &Cone, z: &DVector<f64>) -> Option<DVector<f64>> {
    let zmax = z.amax();
    let mut free: Vec<usize> = cone.on.to_vec();
    let act: Vec<usize> = cone.off.iter().copied().filter(|&i| z[i].abs() > 1e-10 * zmax).collect();
    free.extend(&act);
    let active = cone.off_mass(z) >= cone.b * (1.0 - 1e-7);
    let m = free.len();
    let extra = if active { 2 } else { 1 };
    let mut a = DMatrix::zeros(m + extra, m + extra);
    let mut rhs = DVector::zeros(m + extra);
    for (r, &i) in free.iter().enumerate() {
        for (c, &j) in free.iter().enumerate() {
            a[(r, c)] = 2.0 * q[(i, j)];
        }
        a[(r, m)] = -cone.w[i];
        a[(m, r)] = cone.w[i];
    }
    rhs[m] = 1.0;
    if active {
        for (r, &i) in free.iter().enumerate().skip(cone.on.len()) {
            a[(r, m + 1)] = z[i].signum();
            a[(m + 1, r)] = z[i].signum();
        }
        rhs[m + 1] = cone.b;
    }
    let sol = a.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    if active && sol[m + 1] < 0.0 {
        return None;
    }
    let mut out = DVector::zeros(z.len());
    for (r, &i) in free.iter().enumerate() {
        out[i] = sol[r];
    }
    for &i in &act {
        if out[i].signum() != z[i].signum() {
            return None;
        }
    }
    if cone.off_mass(&out) > cone.b * (1.0 + 1e-12) {
        return None;
    }
    Some(out)
}

/// Accelerated projected gradient with restart, followed by an active-set
/// polish; returns the minimizer and its KKT certificate.
fn minimize_on_cone(
    q: &DMatrix<f64>,
    cone: &Cone,
    start: Option<DVector<f64>>,
    tol: f64,
) -> Result<(DVector<f64>, f64)> {
    let n = q.nrows();
    let f = |z: &DVector<f64>| z.dot(&(q * z));
    let init = start.unwrap_or_else(|| cone.w / cone.w.norm_squared());
    let mut x = cone.project(&init);
    let mut fx = f(&x);
    let lip0 = (2.0 * linalg::power_iteration(q, 30) * 1.05).max(1e-300);
    let mut lip = lip0;
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut best = (x.clone(), cone_kkt(q, cone, &x));
    let max_iters = 200 * n + 20_000;
    for iter in 1..=max_iters {
        let grad = 2.0 * (q * &y);
        let z = cone.project(&(&y - grad / lip));
        let fz = f(&z);
        if !(fz <= fx) {
            if t > 1.0 {
                t = 1.0;
                y.copy_from(&x);
            } else {
                lip *= 2.0;
                if lip > 1e12 * lip0 {
                    break;
                }
            }
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &z + ((t - 1.0) / t_next) * (&z - &x);
        x = z;
        fx = fz;
        t = t_next;
        if iter % 25 == 0 {
            if let Some(p) = cone_polish(q, cone, &x) {
                let fp = f(&p);
                if fp <= fx * (1.0 + 1e-12) {
                    let cert = cone_kkt(q, cone, &p);
                    if cert < best.1 {
                        best = (p.clone(), cert);
                    }
                    if cert <= tol {
                        return Ok(best);
                    }
                }
            }
            let cert = cone_kkt(q, cone, &x);
            if cert < best.1 {
                best = (x.clone(), cert);
            }
            if cert <= tol {
                return Ok(best);
            }
        }
    }
    if best.1 <= tol {
        Ok(best)
    } else {
        Err(Error::NotConverged {
            iterations: max_iters,
            residual: best.1,
        })
    }
}

/// Volume of the unit ball in `R^d`; exposed for mollifier normalization tests.
pub fn unit_ball_volume(d: usize) -> f64 {
    PI.powf(d as f64 / 2.0) / gamma(d as f64 / 2.0 + 1.0)
}
