//! Gauss-Legendre rules and a composite integrator with panel doubling.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `P_n(x)` and `P_n'(x)` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Fixed Gauss rule applied on `panels` equal sub-intervals of `[a, b]`.
pub struct CompositeGauss {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl CompositeGauss {
    pub fn new(order: usize) -> Self {
        let (nodes, weights) = gauss_legendre(order);
        CompositeGauss { nodes, weights }
    }

    pub fn integrate(&self, f: &impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
        let h = (b - a) / panels as f64;
        let mut total = 0.0;
        for p in 0..panels {
            let lo = a + h * p as f64;
            let mid = lo + 0.5 * h;
            let s: f64 = self
                .nodes
                .iter()
                .zip(&self.weights)
                .map(|(x, w)| w * f(mid + 0.5 * h * x))
                .sum();
            total += 0.5 * h * s;
        }
        total
    }

    /// Doubles the number of panels until two successive estimates agree to
    /// `rel_tol` (relative) or `abs_tol`.
    pub fn integrate_adaptive(
        &self,
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        rel_tol: f64,
        abs_tol: f64,
    ) -> Result<f64> {
        let mut panels = 4;
        let mut prev = self.integrate(f, a, b, panels);
        for _ in 0..16 {
            panels *= 2;
            let next = self.integrate(f, a, b, panels);
            let diff = (next - prev).abs();
            if diff <= rel_tol * next.abs() || diff <= abs_tol {
                return Ok(next);
            }
            prev = next;
        }
        Err(Error::NotConverged {
            iterations: panels,
            residual: prev,
        })
    }
}
