//! Design paths and responses under the functional linear model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::GramModel;
use crate::error::{check_len, invalid, Error, Result};
use crate::exec::Execution;
use crate::grid::{Grid, NoiseKind, OracleSpec};

/// Distribution of the i.i.d. driver `z` in `X = m + L z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Driver {
    #[default]
    Gaussian,
    Rademacher,
}

const STREAM_DESIGN: u64 = 0x6465_7369;
const STREAM_NOISE: u64 = 0x6e6f_6973;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of identifiers into a child seed.
pub fn derive_seed(master: u64, ids: &[u64]) -> u64 {
    ids.iter().fold(splitmix(master), |acc, id| splitmix(acc ^ splitmix(*id)))
}

pub fn rng_for(master: u64, ids: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, ids))
}

/// `n` i.i.d. paths, one per row: `row_i = mean + L z_i`.
pub fn sample_design(model: &GramModel, n: usize, driver: Driver, seed: u64, exec: Execution) -> Result<DMatrix<f64>> {
    if n == 0 {
        return invalid("sample size must be positive");
    }
    let dim = model.len();
    // column i of z holds the driver of row i
    let mut z = DMatrix::<f64>::zeros(dim, n);
    exec.for_each_chunk(z.as_mut_slice(), dim, |i, col| {
        let mut rng = rng_for(seed, &[STREAM_DESIGN, i as u64]);
        match driver {
            Driver::Gaussian => col.iter_mut().for_each(|v| *v = rng.sample(StandardNormal)),
            Driver::Rademacher => col
                .iter_mut()
                .for_each(|v| *v = if rng.random::<bool>() { 1.0 } else { -1.0 }),
        }
    });
    let mut x = (model.chol() * z).transpose();
    let mean = model.mean();
    if mean.iter().any(|m| *m != 0.0) {
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col.add_scalar_mut(mean[j]);
        }
    }
    Ok(x)
}

/// `Y_i = a* + sum_t mu_t lambda*_t X_i(t) + xi_i`.
pub fn sample_response(x: &DMatrix<f64>, grid: &Grid, oracle: &OracleSpec, seed: u64) -> Result<DVector<f64>> {
    check_len(grid.len(), x.ncols())?;
    check_len(grid.len(), oracle.slope.len())?;
    let theta = DVector::from_iterator(
        grid.len(),
        oracle.slope.values().iter().zip(grid.weights()).map(|(l, w)| l * w),
    );
    let mut y = x * theta;
    for (i, yi) in y.iter_mut().enumerate() {
        *yi += oracle.intercept;
        if oracle.noise_sd > 0.0 {
            let mut rng = rng_for(seed, &[STREAM_NOISE, i as u64]);
            let xi = match oracle.noise_kind {
                NoiseKind::Gaussian => rng.sample::<f64, _>(StandardNormal),
                NoiseKind::ScaledRademacher => {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            *yi += oracle.noise_sd * xi;
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("response"));
    }
    Ok(y)
}

/// A simulated data set.
#[derive(Debug, Clone)]
pub struct RegressionSample {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub seed: u64,
    pub driver: Driver,
}

impl RegressionSample {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        check_len(x.nrows(), y.len())?;
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample"));
        }
        Ok(RegressionSample {
            x,
            y,
            seed: 0,
            driver: Driver::Gaussian,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }
}

/// Design and response from one master seed; the two use disjoint streams.
pub fn simulate(
    model: &GramModel,
    oracle: &OracleSpec,
    n: usize,
    driver: Driver,
    seed: u64,
    exec: Execution,
) -> Result<RegressionSample> {
    let x = sample_design(model, n, driver, derive_seed(seed, &[STREAM_DESIGN]), exec)?;
    let y = sample_response(&x, model.grid(), oracle, derive_seed(seed, &[STREAM_NOISE]))?;
    Ok(RegressionSample { x, y, seed, driver })
}

/// Biased (1/n) sample covariance of the columns.
pub fn empirical_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let means = x.row_mean();
    let mut c = x.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    c.tr_mul(&c) / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{gram_matrix, KernelSpec};
    use crate::grid::{build_uniform_grid, GridFunction, MeasureKind};

    fn bm(n: usize) -> GramModel {
        let grid = build_uniform_grid(n, [0.0, 1.0], MeasureKind::Lebesgue).unwrap();
        gram_matrix(&KernelSpec::BrownianReleased, &grid).unwrap()
    }

    #[test]
    fn seeds_differ_per_path() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(9, &[3, 4]), derive_seed(9, &[3, 4]));
    }

    #[test]
    fn empirical_covariance_converges() {
        let m = bm(8);
        let n = 10_000;
        let x = sample_design(&m, n, Driver::Gaussian, 11, Execution::Serial).unwrap();
        let c = empirical_covariance(&x);
        let err = (c - m.k()).norm();
        assert!(err <= 5.0 / (n as f64).sqrt() * m.k().norm(), "err {err}");
        for j in 0..8 {
            let mean = x.column(j).mean();
            assert!(mean.abs() <= 4.0 * (m.k()[(j, j)] / n as f64).sqrt());
        }
    }

    #[test]
    fn rademacher_single_point() {
        let grid = build_uniform_grid(1, [0.0, 1.0], MeasureKind::Counting).unwrap();
        let m = gram_matrix(&KernelSpec::OrnsteinUhlenbeck { rate: 1.0 }, &grid).unwrap();
        let x = sample_design(&m, 50, Driver::Rademacher, 3, Execution::Serial).unwrap();
        let l = m.chol()[(0, 0)];
        assert!(x.iter().all(|v| *v == l || *v == -l));
        assert!(x.iter().any(|v| *v > 0.0) && x.iter().any(|v| *v < 0.0));
    }

    #[test]
    fn serial_and_parallel_agree_bitwise() {
        let m = bm(16);
        let a = sample_design(&m, 64, Driver::Gaussian, 5, Execution::Serial).unwrap();
        let b = sample_design(&m, 64, Driver::Gaussian, 5, Execution::Parallel).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn noiseless_responses() {
        let m = bm(4);
        let x = sample_design(&m, 10, Driver::Gaussian, 2, Execution::Serial).unwrap();
        let oracle = OracleSpec::new(GridFunction::zeros(4), 1.5, 0.0, NoiseKind::Gaussian).unwrap();
        let y = sample_response(&x, m.grid(), &oracle, 0).unwrap();
        assert!(y.iter().all(|v| *v == 1.5));
        let slope = GridFunction::new(vec![0.0, 3.0, 0.0, 0.0]).unwrap();
        let oracle = OracleSpec::new(slope, 1.5, 0.0, NoiseKind::Gaussian).unwrap();
        let y = sample_response(&x, m.grid(), &oracle, 0).unwrap();
        for i in 0..10 {
            assert!((y[i] - 1.5 - 0.25 * 3.0 * x[(i, 1)]).abs() < 1e-14);
        }
    }

    #[test]
    fn response_variance_decomposition() {
        let m = bm(8);
        let slope = GridFunction::new(vec![1.0, -2.0, 0.0, 3.0, 0.0, 0.0, 1.0, 0.5]).unwrap();
        for kind in [NoiseKind::Gaussian, NoiseKind::ScaledRademacher] {
            let oracle = OracleSpec::new(slope.clone(), 0.0, 0.7, kind).unwrap();
            let s = simulate(&m, &oracle, 10_000, Driver::Gaussian, 17, Execution::Parallel).unwrap();
            let theta = DVector::from_iterator(8, slope.values().iter().map(|v| v / 8.0));
            let expect = (theta.transpose() * m.k() * &theta)[0] + 0.49;
            let var = s.y.variance();
            assert!((var - expect).abs() < 0.1 * expect, "{var} vs {expect}");
        }
    }

    #[test]
    fn simulate_is_deterministic() {
        let m = bm(8);
        let oracle = OracleSpec::new(GridFunction::zeros(8), 0.0, 1.0, NoiseKind::Gaussian).unwrap();
        let a = simulate(&m, &oracle, 20, Driver::Rademacher, 99, Execution::Serial).unwrap();
        let b = simulate(&m, &oracle, 20, Driver::Rademacher, 99, Execution::Parallel).unwrap();
        assert_eq!(a.x.as_slice(), b.x.as_slice());
        assert_eq!(a.y.as_slice(), b.y.as_slice());
    }
}
