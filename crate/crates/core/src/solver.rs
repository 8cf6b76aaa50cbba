//! Empirical and population continuous-LASSO problems.
//!
//! With `theta_t = mu_t lambda_t` and the intercept profiled out, both
//! problems become `theta^T Q theta - 2 c^T theta + r0 + eps ||theta||_1`.
//! Empirically `Q` and `c` are the centered second moments of the sample;
//! in the population `Q = K` and `c = K theta*`. The minimizer is found by
//! FISTA with a monotone restart. Every few iterations a feature-sign
//! active-set search tries to finish the job exactly.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::covariance::GramModel;
use crate::error::{check_len, invalid, Error, Result};
use crate::grid::{Grid, GridFunction, OracleSpec};
use crate::linalg;
use crate::sampler::RegressionSample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Target KKT residual, in `lambda` coordinates.
    pub tol: f64,
    /// Defaults to `50 N + 10^4`.
    pub max_iters: Option<usize>,
    /// Optional constraint `||lambda||_1 <= radius`.
    pub constraint_radius: Option<f64>,
    /// Attempt an active-set polish every this many iterations (0 = never).
    pub polish_every: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iters: None,
            constraint_radius: None,
            polish_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Empirical,
    Population,
}

#[derive(Debug, Clone, Serialize)]
pub struct LassoFit {
    pub slope: GridFunction,
    pub intercept: f64,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// A penalized problem reduced to its quadratic form.
#[derive(Debug, Clone)]
pub struct LassoProblem {
    mode: Mode,
    mu: Vec<f64>,
    q: DMatrix<f64>,
    c: DVector<f64>,
    r0: f64,
    // intercept of the profiled problem: a(theta) = a0 - v^T theta
    a0: f64,
    v: DVector<f64>,
    pub epsilon: f64,
    pub options: SolverOptions,
}

impl LassoProblem {
    pub fn empirical(sample: &RegressionSample, grid: &Grid, epsilon: f64, options: SolverOptions) -> Result<Self> {
        check_len(grid.len(), sample.x.ncols())?;
        check_len(sample.x.nrows(), sample.y.len())?;
        if sample.x.nrows() == 0 {
            return invalid("empty sample");
        }
        if sample.x.iter().chain(sample.y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample"));
        }
        let n = sample.x.nrows() as f64;
        let xbar = sample.x.row_mean().transpose();
        let ybar = sample.y.mean();
        let mut xc = sample.x.clone();
        for (j, mut col) in xc.column_iter_mut().enumerate() {
            col.add_scalar_mut(-xbar[j]);
        }
        let yc = sample.y.add_scalar(-ybar);
        let q = xc.tr_mul(&xc) / n;
        let c = xc.tr_mul(&yc) / n;
        let r0 = yc.norm_squared() / n;
        Self::build(Mode::Empirical, grid, q, c, r0, ybar, xbar, epsilon, options)
    }

    pub fn population(model: &GramModel, oracle: &OracleSpec, epsilon: f64, options: SolverOptions) -> Result<Self> {
        let grid = model.grid();
        check_len(grid.len(), oracle.slope.len())?;
        let theta_star = theta_of(&oracle.slope, grid);
        let q = model.k().clone();
        let c = &q * &theta_star;
        let r0 = theta_star.dot(&c) + oracle.noise_sd * oracle.noise_sd;
        let m = model.mean().clone();
        let a0 = oracle.intercept + theta_star.dot(&m);
        Self::build(Mode::Population, grid, q, c, r0, a0, m, epsilon, options)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        mode: Mode,
        grid: &Grid,
        q: DMatrix<f64>,
        c: DVector<f64>,
        r0: f64,
        a0: f64,
        v: DVector<f64>,
        epsilon: f64,
        options: SolverOptions,
    ) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return invalid(format!("epsilon must be finite and nonnegative, got {epsilon}"));
        }
        if !(options.tol > 0.0) {
            return invalid("tol must be positive");
        }
        if let Some(r) = options.constraint_radius {
            if !(r >= 0.0) {
                return invalid("constraint radius must be nonnegative");
            }
        }
        Ok(LassoProblem {
            mode,
            mu: grid.weights().to_vec(),
            q,
            c,
            r0,
            a0,
            v,
            epsilon,
            options,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Smallest `epsilon` at which `lambda = 0` is optimal: `2 max |c_t|`
    /// (the penalty is `eps ||theta||_1` in the reparameterized problem).
    pub fn null_threshold(&self) -> f64 {
        2.0 * self.c.amax()
    }

    fn max_iters(&self) -> usize {
        self.options.max_iters.unwrap_or(50 * self.len() + 10_000)
    }

    fn smooth(&self, theta: &DVector<f64>, q_theta: &DVector<f64>) -> f64 {
        theta.dot(q_theta) - 2.0 * self.c.dot(theta) + self.r0
    }

    fn value(&self, theta: &DVector<f64>, q_theta: &DVector<f64>) -> f64 {
        self.smooth(theta, q_theta) + self.epsilon * theta.lp_norm(1)
    }

    fn intercept_of(&self, theta: &DVector<f64>) -> f64 {
        self.a0 - self.v.dot(theta)
    }

    /// KKT residual at `theta` with the intercept at its profiled optimum.
    fn kkt_theta(&self, theta: &DVector<f64>, q_theta: &DVector<f64>) -> f64 {
        let grad = 2.0 * (q_theta - &self.c);
        match self.options.constraint_radius {
            Some(r) if theta.lp_norm(1) >= r * (1.0 - 1e-12) && r > 0.0 => {
                // extra multiplier for the active L1 ball: residual is convex in it
                let f = |nu: f64| kkt_core(&grad, theta, &self.mu, self.epsilon + nu);
                let (mut lo, mut hi) = (0.0, grad.amax() + self.epsilon + 1.0);
                for _ in 0..200 {
                    let m1 = lo + (hi - lo) / 3.0;
                    let m2 = hi - (hi - lo) / 3.0;
                    if f(m1) <= f(m2) {
                        hi = m2;
                    } else {
                        lo = m1;
                    }
                }
                f(0.5 * (lo + hi)).min(f(0.0))
            }
            _ => kkt_core(&grad, theta, &self.mu, self.epsilon),
        }
    }

    fn prox(&self, z: &mut DVector<f64>, step: f64) {
        let tau = self.epsilon * step;
        z.iter_mut().for_each(|v| *v = soft_threshold(*v, tau));
        if let Some(r) = self.options.constraint_radius {
            linalg::project_l1_ball(z.as_mut_slice(), r);
        }
    }

    fn to_fit(&self, theta: &DVector<f64>, objective: f64, kkt: f64, iterations: usize, converged: bool) -> Result<LassoFit> {
        let slope: Vec<f64> = theta.iter().zip(&self.mu).map(|(t, m)| t / m).collect();
        Ok(LassoFit {
            slope: GridFunction::new(slope).map_err(|_| Error::NonFinite("slope estimate"))?,
            intercept: self.intercept_of(theta),
            objective,
            kkt_residual: kkt,
            iterations,
            converged,
        })
    }

    /// Minimizes the problem, optionally from a warm start `lambda`.
    pub fn solve(&self, warm: Option<&GridFunction>) -> Result<LassoFit> {
        let n = self.len();
        let tol = self.options.tol;
        let mut x = match warm {
            Some(w) => {
                check_len(n, w.len())?;
                let mut t = theta_from(w.values(), &self.mu);
                if let Some(r) = self.options.constraint_radius {
                    linalg::project_l1_ball(t.as_mut_slice(), r);
                }
                t
            }
            None => DVector::zeros(n),
        };
        let mut qx = &self.q * &x;
        let mut fx = self.value(&x, &qx);
        if !fx.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        let mut kkt = self.kkt_theta(&x, &qx);
        if kkt <= tol {
            return self.to_fit(&x, fx, kkt, 0, true);
        }
        let lip0 = {
            let l = 2.0 * linalg::power_iteration(&self.q, 20) * 1.05;
            if l > 0.0 && l.is_finite() {
                l
            } else {
                1.0
            }
        };
        let mut lip = lip0;
        let mut y = x.clone();
        let mut qy = qx.clone();
        let mut t = 1.0f64;
        let max_iters = self.max_iters();
        let mut iter = 0;
        let mut cold_tried = false;
        // active-set steps, reported together with gradient iterations
        let mut extra = 0;
        while iter < max_iters {
            iter += 1;
            let mut z = &y - (2.0 / lip) * (&qy - &self.c);
            self.prox(&mut z, 1.0 / lip);
            let qz = &self.q * &z;
            let fz = self.value(&z, &qz);
            if !(fz <= fx) {
                if !fz.is_finite() && fx.is_finite() && lip > 1e12 * lip0 {
                    return Err(Error::NonFinite("objective"));
                }
                if t > 1.0 {
                    // momentum overshot: restart from the last accepted point
                    t = 1.0;
                    y.copy_from(&x);
                    qy.copy_from(&qx);
                } else {
                    lip *= 2.0;
                    if lip > 1e12 * lip0 {
                        break;
                    }
                }
                continue;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            y = &z + beta * (&z - &x);
            qy = &qz + beta * (&qz - &qx);
            x = z;
            qx = qz;
            fx = fz;
            t = t_next;
            kkt = self.kkt_theta(&x, &qx);
            if kkt <= tol {
                return self.to_fit(&x, fx, kkt, iter + extra, true);
            }
            if self.options.polish_every > 0 && iter % self.options.polish_every == 0 {
                let mut improved = self.polish(&x, fx);
                let done = improved.as_ref().is_some_and(|(xp, qxp, _)| self.kkt_theta(xp, qxp) <= tol);
                if !done && self.options.constraint_radius.is_none() {
                    let (xs, fs) = improved.as_ref().map_or((&x, fx), |(a, _, f)| (a, *f));
                    let mut found = self.feature_sign(xs, fs, &mut extra);
                    if found.is_none() && !cold_tried {
                        cold_tried = true;
                        found = self.feature_sign(&DVector::zeros(n), self.r0, &mut extra).filter(|r| r.2 <= fs);
                    }
                    if found.is_some() {
                        improved = found;
                    }
                }
                if let Some((xp, qxp, fp)) = improved {
                    x = xp;
                    qx = qxp;
                    fx = fp;
                    y.copy_from(&x);
                    qy.copy_from(&qx);
                    t = 1.0;
                    kkt = self.kkt_theta(&x, &qx);
                    if kkt <= tol {
                        return self.to_fit(&x, fx, kkt, iter + extra, true);
                    }
                }
            }
        }
        log::debug!("solver stopped after {iter} iterations, kkt residual {kkt:e}");
        self.to_fit(&x, fx, kkt, iter + extra, false)
    }

    /// Feature-sign active-set search from `x`: solve on the active set with
    /// fixed signs, line-search over sign changes, then admit the worst KKT
    /// violator. Every step lowers the objective. Returns `None` when no
    /// progress is possible (singular active block) or nothing improved.
    fn feature_sign(&self, x0: &DVector<f64>, f0: f64, steps_used: &mut usize) -> Option<(DVector<f64>, DVector<f64>, f64)> {
        let n = x0.len();
        let eps = self.epsilon;
        let mut x = x0.clone();
        let mut qx = &self.q * &x;
        let mut fx = self.value(&x, &qx);
        let mut active: Vec<usize> = (0..n).filter(|&i| x[i] != 0.0).collect();
        let mut signs: Vec<f64> = active.iter().map(|&i| x[i].signum()).collect();
        let budget = 4 * n + 50;
        let mut steps = 0;
        'outer: loop {
            // optimize on the active set
            while !active.is_empty() {
                steps += 1;
                if steps > budget {
                    break 'outer;
                }
                let qa = linalg::principal_submatrix(&self.q, &active);
                let l = match linalg::cholesky(&qa) {
                    Ok(l) => l,
                    Err(_) => break 'outer,
                };
                let rhs = DVector::from_iterator(
                    active.len(),
                    active.iter().zip(&signs).map(|(&i, s)| self.c[i] - 0.5 * eps * s),
                );
                let z = linalg::cholesky_solve(&l, &rhs);
                if z.iter().any(|v| !v.is_finite()) {
                    break 'outer;
                }
                let mut d = DVector::zeros(n);
                for (k, &i) in active.iter().enumerate() {
                    d[i] = z[k] - x[i];
                }
                let qd = DVector::from_fn(n, |r, _| active.iter().map(|&i| self.q[(r, i)] * d[i]).sum::<f64>());
                let (xqx, dqx, dqd) = (x.dot(&qx), d.dot(&qx), d.dot(&qd));
                let (cx, cd) = (self.c.dot(&x), self.c.dot(&d));
                let at = |a: f64| -> f64 {
                    let l1: f64 = (0..n).filter(|&i| x[i] != 0.0 || d[i] != 0.0).map(|i| (x[i] + a * d[i]).abs()).sum();
                    xqx + 2.0 * a * dqx + a * a * dqd - 2.0 * (cx + a * cd) + self.r0 + eps * l1
                };
                let mut cands: Vec<(f64, Option<usize>)> = vec![(1.0, None)];
                for (k, &i) in active.iter().enumerate() {
                    if x[i] != 0.0 && z[k].signum() != x[i].signum() {
                        let a = x[i] / (x[i] - z[k]);
                        if a > 0.0 && a < 1.0 {
                            cands.push((a, Some(i)));
                        }
                    }
                }
                let (alpha, block) = cands
                    .iter()
                    .map(|&(a, b)| (at(a), a, b))
                    .min_by(|p, q| p.0.total_cmp(&q.0))
                    .map(|(_, a, b)| (a, b))
                    .unwrap_or((1.0, None));
                let f_new = at(alpha);
                if !(f_new <= fx + 1e-15 * fx.abs().max(1.0)) {
                    break 'outer;
                }
                x.axpy(alpha, &d, 1.0);
                qx.axpy(alpha, &qd, 1.0);
                if let Some(i) = block {
                    x[i] = 0.0;
                }
                let before = active.len();
                let keep: Vec<(usize, f64)> = active
                    .iter()
                    .filter(|&&i| x[i] != 0.0 && (x[i].signum() == signs[active.iter().position(|&j| j == i).unwrap_or(0)]))
                    .map(|&i| (i, x[i].signum()))
                    .collect();
                for &i in &active {
                    if !keep.iter().any(|&(j, _)| j == i) {
                        x[i] = 0.0;
                    }
                }
                active = keep.iter().map(|p| p.0).collect();
                signs = keep.iter().map(|p| p.1).collect();
                qx = &self.q * &x;
                fx = self.value(&x, &qx);
                if block.is_none() && active.len() == before {
                    break;
                }
            }
            if self.kkt_theta(&x, &qx) <= self.options.tol {
                break;
            }
            // admit the worst violator
            let grad = 2.0 * (&qx - &self.c);
            let mut best = (0.0, None);
            for i in 0..n {
                if x[i] == 0.0 {
                    let v = self.mu[i] * (grad[i].abs() - eps);
                    if v > best.0 {
                        best = (v, Some(i));
                    }
                }
            }
            match best.1 {
                Some(i) if !active.contains(&i) => {
                    active.push(i);
                    signs.push(-grad[i].signum());
                }
                _ => break,
            }
            steps += 1;
            if steps > budget {
                break;
            }
        }
        *steps_used += steps;
        (fx < f0 || (fx <= f0 && self.kkt_theta(&x, &qx) <= self.options.tol)).then_some((x, qx, fx))
    }

    /// Newton step on the current support with fixed signs, cut back at the
    /// first sign change. Returns the new point only if it lowers the objective.
    fn polish(&self, x: &DVector<f64>, fx: f64) -> Option<(DVector<f64>, DVector<f64>, f64)> {
        if let Some(r) = self.options.constraint_radius {
            if x.lp_norm(1) >= r * (1.0 - 1e-12) {
                return None;
            }
        }
        let support: Vec<usize> = (0..x.len()).filter(|&i| x[i] != 0.0).collect();
        if support.is_empty() {
            return None;
        }
        let qs = linalg::principal_submatrix(&self.q, &support);
        let l = linalg::cholesky(&qs).ok()?;
        let rhs = DVector::from_iterator(
            support.len(),
            support.iter().map(|&i| self.c[i] - 0.5 * self.epsilon * x[i].signum()),
        );
        let sol = linalg::cholesky_solve(&l, &rhs);
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut alpha = 1.0f64;
        let mut blocking = None;
        for (k, &i) in support.iter().enumerate() {
            if sol[k].signum() != x[i].signum() || sol[k] == 0.0 {
                let a = x[i] / (x[i] - sol[k]);
                if a < alpha {
                    alpha = a;
                    blocking = Some(i);
                }
            }
        }
        if !(alpha > 0.0) {
            return None;
        }
        let mut xp = x.clone();
        for (k, &i) in support.iter().enumerate() {
            xp[i] = x[i] + alpha * (sol[k] - x[i]);
        }
        if let Some(i) = blocking {
            xp[i] = 0.0;
        }
        let qxp = &self.q * &xp;
        let fp = self.value(&xp, &qxp);
        (fp <= fx).then_some((xp, qxp, fp))
    }
}

/// Per-coordinate KKT violation in `lambda` coordinates, maximized.
fn kkt_core(grad_theta: &DVector<f64>, theta: &DVector<f64>, mu: &[f64], eps: f64) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..theta.len() {
        // d/d lambda_t = mu_t d/d theta_t; penalty slope eps mu_t
        let g = mu[t] * grad_theta[t];
        let pen = eps * mu[t];
        let r = if theta[t] != 0.0 {
            (g + pen * theta[t].signum()).abs()
        } else {
            (g.abs() - pen).max(0.0)
        };
        worst = worst.max(r);
    }
    worst
}

pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    x.signum() * (x.abs() - tau).max(0.0)
}

fn theta_from(lambda: &[f64], mu: &[f64]) -> DVector<f64> {
    DVector::from_iterator(lambda.len(), lambda.iter().zip(mu).map(|(l, m)| l * m))
}

/// `theta_t = mu_t lambda_t`.
pub fn theta_of(lambda: &GridFunction, grid: &Grid) -> DVector<f64> {
    theta_from(lambda.values(), grid.weights())
}

/// `(1/n) sum_i (Y_i - a - <lambda, X_i>)^2 + eps ||lambda||_1`.
pub fn objective_empirical(
    lambda: &GridFunction,
    a: f64,
    sample: &RegressionSample,
    grid: &Grid,
    epsilon: f64,
) -> Result<f64> {
    check_len(grid.len(), lambda.len())?;
    check_len(grid.len(), sample.x.ncols())?;
    let theta = theta_of(lambda, grid);
    let resid = (&sample.y - &sample.x * &theta).add_scalar(-a);
    Ok(resid.norm_squared() / sample.x.nrows() as f64 + epsilon * theta.lp_norm(1))
}

/// Population objective `F(lambda, a)` including the noise variance.
pub fn objective_population(
    lambda: &GridFunction,
    a: f64,
    model: &GramModel,
    oracle: &OracleSpec,
    epsilon: f64,
) -> Result<f64> {
    let excess = excess_risk(lambda, a, model, oracle)?;
    let l1 = theta_of(lambda, model.grid()).lp_norm(1);
    Ok(excess + oracle.noise_sd * oracle.noise_sd + epsilon * l1)
}

/// `||f_{lambda,a} - f*||^2_{L2(Pi)}`, exact from the Gram model.
pub fn excess_risk(lambda: &GridFunction, a: f64, model: &GramModel, oracle: &OracleSpec) -> Result<f64> {
    let grid = model.grid();
    check_len(grid.len(), lambda.len())?;
    check_len(grid.len(), oracle.slope.len())?;
    let d = theta_of(lambda, grid) - theta_of(&oracle.slope, grid);
    let var = d.dot(&(model.k() * &d)).max(0.0);
    let gap = a - oracle.intercept + d.dot(model.mean());
    Ok(var + gap * gap)
}

/// KKT residual of a fit, recomputed from scratch.
pub fn kkt_residual(fit: &LassoFit, problem: &LassoProblem) -> Result<f64> {
    check_len(problem.len(), fit.slope.len())?;
    let theta = theta_from(fit.slope.values(), &problem.mu);
    let qt = &problem.q * &theta;
    let da = 2.0 * (fit.intercept - problem.intercept_of(&theta));
    Ok(problem.kkt_theta(&theta, &qt) + da.abs())
}

pub fn fit_empirical(problem: &LassoProblem) -> Result<LassoFit> {
    problem.solve(None)
}

pub fn fit_population(model: &GramModel, oracle: &OracleSpec, epsilon: f64, options: SolverOptions) -> Result<LassoFit> {
    LassoProblem::population(model, oracle, epsilon, options)?.solve(None)
}

/// `q(eps) = ||f_{lambda_eps, a_eps} - f*||^2 + eps ||lambda_eps||_1`.
pub fn q_of_epsilon(model: &GramModel, oracle: &OracleSpec, epsilon: f64, options: SolverOptions) -> Result<f64> {
    let fit = fit_population(model, oracle, epsilon, options)?;
    let l1 = theta_of(&fit.slope, model.grid()).lp_norm(1);
    Ok(excess_risk(&fit.slope, fit.intercept, model, oracle)? + epsilon * l1)
}

/// Fits along a list of `eps` values, warm-starting each from the previous
/// solution. Sort the list in decreasing order for the best warm starts.
pub fn fit_path(problem: &LassoProblem, epsilons: &[f64]) -> Result<Vec<LassoFit>> {
    let mut p = problem.clone();
    let mut out: Vec<LassoFit> = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        if !(eps.is_finite() && eps >= 0.0) {
            return invalid(format!("epsilon must be finite and nonnegative, got {eps}"));
        }
        p.epsilon = eps;
        let fit = p.solve(out.last().map(|f| &f.slope))?;
        out.push(fit);
    }
    Ok(out)
}
