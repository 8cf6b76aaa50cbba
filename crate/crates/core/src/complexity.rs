//! Chaining complexity, Kolmogorov widths, approximate dimension and
//! restricted isometry diagnostics.
//!
//! `gamma_2` is always replaced by its Dudley entropy bound, so every
//! derived quantity here is a conservative (upper) variant.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::covariance::GramModel;
use crate::error::{check_len, invalid, Result};
use crate::grid::{dominant_set, weighted_l1_norm, GridFunction};
use crate::linalg;
use crate::sparsity::rkhs_norm_matrix;

/// `(2 sqrt 2 - 1)^-1`, the constant in front of the Dudley integral.
pub const DUDLEY_CONST: f64 = 1.0 / (2.0 * std::f64::consts::SQRT_2 - 1.0);

fn dx(k: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    (k[(i, i)] + k[(j, j)] - 2.0 * k[(i, j)]).max(0.0).sqrt()
}

/// Farthest-first traversal under `d_X`. The first `k` centers cover every
/// point within the `k`-th insertion radius, so
/// `N(eps) <= #{k : r_k > eps}` with `r_1 = infinity`.
#[derive(Debug, Clone, Serialize)]
pub struct CoveringTable {
    /// Insertion radii `r_2 >= r_3 >= ...` of the traversal.
    pub radii: Vec<f64>,
    pub n_points: usize,
    pub diameter: f64,
}

impl CoveringTable {
    pub fn build(model: &GramModel) -> Self {
        let idx: Vec<usize> = (0..model.len()).collect();
        Self::build_on(model.k(), &idx)
    }

    pub fn build_on(k: &DMatrix<f64>, idx: &[usize]) -> Self {
        let m = idx.len();
        if m == 0 {
            return CoveringTable {
                radii: vec![],
                n_points: 0,
                diameter: 0.0,
            };
        }
        let mut dist: Vec<f64> = idx.iter().map(|&j| dx(k, idx[0], j)).collect();
        let mut radii = Vec::with_capacity(m.saturating_sub(1));
        for _ in 1..m {
            let (far, r) = dist
                .iter()
                .enumerate()
                .fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
            radii.push(r);
            for (i, di) in dist.iter_mut().enumerate() {
                *di = di.min(dx(k, idx[far], idx[i]));
            }
        }
        // traversal radii are non-increasing up to rounding
        for i in 1..radii.len() {
            radii[i] = radii[i].min(radii[i - 1]);
        }
        let mut diameter = 0.0f64;
        for a in 0..m {
            for b in 0..a {
                diameter = diameter.max(dx(k, idx[a], idx[b]));
            }
        }
        CoveringTable {
            radii,
            n_points: m,
            diameter,
        }
    }

    /// Upper bound on the covering number at radius `eps` (closed balls).
    pub fn count(&self, eps: f64) -> usize {
        if self.n_points == 0 {
            return 0;
        }
        1 + self.radii.iter().filter(|&&r| r > eps).count()
    }

    pub fn table(&self, eps_list: &[f64]) -> Vec<(f64, usize)> {
        eps_list.iter().map(|&e| (e, self.count(e))).collect()
    }
}

/// Covering numbers from the greedy net.
pub fn covering_numbers(model: &GramModel, eps_list: &[f64]) -> Vec<(f64, usize)> {
    CoveringTable::build(model).table(eps_list)
}

/// Exact minimal covering number with centers on the grid, by enumeration.
pub fn covering_number_exact(model: &GramModel, eps: f64) -> Result<usize> {
    let n = model.len();
    if n > 12 {
        return invalid("exact covering numbers are limited to 12 points");
    }
    if n == 0 {
        return Ok(0);
    }
    let k = model.k();
    let balls: Vec<u32> = (0..n)
        .map(|c| (0..n).filter(|&j| dx(k, c, j) <= eps).fold(0u32, |m, j| m | (1 << j)))
        .collect();
    let full = (1u32 << n) - 1;
    let mut best = n;
    for subset in 1u32..=full {
        let size = subset.count_ones() as usize;
        if size >= best {
            continue;
        }
        let cover = (0..n).filter(|c| subset & (1 << c) != 0).fold(0u32, |m, c| m | balls[c]);
        if cover == full {
            best = size;
        }
    }
    Ok(best)
}

/// `(2 sqrt 2 - 1)^-1 int_0^delta sqrt(log N(eps / 4)) d eps`, integrated
/// exactly over the step function given by the covering table.
pub fn gamma2_dudley(table: &CoveringTable, delta: f64) -> f64 {
    if !(delta > 0.0) {
        return 0.0;
    }
    // N(eps/4) = k on (4 r_{k+1}, 4 r_k], with r_1 = inf and r_{n+1} = 0
    let mut total = 0.0;
    for k in 2..=table.n_points {
        let upper = 4.0 * table.radii[k - 2];
        let lower = if k - 1 < table.radii.len() {
            4.0 * table.radii[k - 1]
        } else {
            0.0
        };
        let len = (upper.min(delta) - lower).max(0.0);
        if len > 0.0 {
            total += len * (k as f64).ln().sqrt();
        }
    }
    DUDLEY_CONST * total
}

#[derive(Debug, Clone, Serialize)]
pub struct ComplexityEstimates {
    pub s_t: f64,
    pub gamma2_table: Vec<(f64, f64)>,
    pub covering_table: Vec<(f64, usize)>,
    pub l_const: f64,
    pub diameter: f64,
}

/// `S(T) = min_t sqrt(K_tt) + L * gamma2(diameter)`.
pub fn s_complexity(model: &GramModel, l_const: f64) -> f64 {
    s_from_table(model, &CoveringTable::build(model), l_const)
}

fn s_from_table(model: &GramModel, table: &CoveringTable, l_const: f64) -> f64 {
    let k = model.k();
    let min_sd = (0..model.len()).map(|i| k[(i, i)].max(0.0).sqrt()).fold(f64::INFINITY, f64::min);
    let min_sd = if min_sd.is_finite() { min_sd } else { 0.0 };
    min_sd + l_const * gamma2_dudley(table, table.diameter)
}

/// All complexity tables on `points` log-spaced scales below the diameter.
pub fn complexity_estimates(model: &GramModel, l_const: f64, points: usize) -> ComplexityEstimates {
    let table = CoveringTable::build(model);
    let diam = table.diameter;
    let scales: Vec<f64> = if diam > 0.0 && points > 0 {
        (0..points)
            .map(|i| diam * 10f64.powf(-3.0 + 3.0 * i as f64 / (points.max(2) - 1) as f64))
            .collect()
    } else {
        vec![0.0]
    };
    ComplexityEstimates {
        s_t: s_from_table(model, &table, l_const),
        gamma2_table: scales.iter().map(|&d| (d, gamma2_dudley(&table, d))).collect(),
        covering_table: table.table(&scales),
        l_const,
        diameter: diam,
    }
}

/// Upper bounds on the Kolmogorov widths `rho_0..=rho_{d_max}` of
/// `{X(t) : t in restrict}`.
///
/// Candidates: top principal components of the restricted covariance, the
/// pivots of a greedy pivoted Cholesky, a random subspace search when
/// `|restrict| <= 4`, and, given a partition, unions of per-block candidates
/// with a minimax allocation of dimensions.
pub fn width_profile(
    model: &GramModel,
    restrict: &[usize],
    d_max: usize,
    partition: Option<&[Range<usize>]>,
) -> Result<Vec<f64>> {
    if restrict.is_empty() {
        return invalid("width of an empty set");
    }
    for &i in restrict {
        if i >= model.len() {
            return invalid(format!("index {i} outside grid"));
        }
    }
    let mut profile = plain_profile(model.k(), restrict, d_max);
    if let Some(parts) = partition {
        let pieces: Vec<Vec<usize>> = parts
            .iter()
            .map(|r| restrict.iter().copied().filter(|i| r.contains(i)).collect::<Vec<_>>())
            .filter(|p| !p.is_empty())
            .collect();
        if pieces.len() > 1 {
            let per_block: Vec<Vec<f64>> = pieces.iter().map(|p| plain_profile(model.k(), p, d_max)).collect();
            let mut alloc = vec![0usize; pieces.len()];
            for (d, slot) in profile.iter_mut().enumerate() {
                if d > 0 {
                    let (worst, _) = alloc
                        .iter()
                        .enumerate()
                        .map(|(j, &a)| (j, per_block[j][a]))
                        .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
                    alloc[worst] += 1;
                }
                let union = alloc
                    .iter()
                    .enumerate()
                    .map(|(j, &a)| per_block[j][a])
                    .fold(0.0, f64::max);
                *slot = slot.min(union);
            }
        }
    }
    Ok(profile)
}

pub fn kolmogorov_width(model: &GramModel, restrict: &[usize], d: usize) -> Result<f64> {
    Ok(width_profile(model, restrict, d, model.partition())?[d])
}

fn plain_profile(k: &DMatrix<f64>, restrict: &[usize], d_max: usize) -> Vec<f64> {
    let m = restrict.len();
    let kr = linalg::principal_submatrix(k, restrict);
    let mut out = vec![0.0; d_max + 1];
    let (vals, vecs) = linalg::sorted_eigen(&kr);
    // PCA: residual variance is the tail sum over discarded components
    let mut tail = vec![0.0; m];
    for d in (0..=m).rev() {
        if d <= d_max {
            out[d] = tail.iter().fold(0.0f64, |a, &b| a.max(b)).sqrt();
        }
        if d > 0 {
            let lam = vals[d - 1].max(0.0);
            for (t, v) in tail.iter_mut().enumerate() {
                *v += lam * vecs[(t, d - 1)].powi(2);
            }
        }
    }
    // d = 0 is exact
    out[0] = (0..m).map(|t| kr[(t, t)].max(0.0)).fold(0.0, f64::max).sqrt();
    // pivoted Cholesky
    let mut resid: Vec<f64> = (0..m).map(|t| kr[(t, t)].max(0.0)).collect();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for slot in out.iter_mut().take(d_max.min(m) + 1).skip(1) {
        let (p, rp) = resid
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, &r)| if r > acc.1 { (i, r) } else { acc });
        if rp <= 0.0 {
            *slot = 0.0;
            continue;
        }
        let mut col = kr.column(p).clone_owned();
        for c in &cols {
            col -= c * c[p];
        }
        col /= rp.sqrt();
        for (t, r) in resid.iter_mut().enumerate() {
            *r = (*r - col[t] * col[t]).max(0.0);
        }
        resid[p] = 0.0;
        cols.push(col);
        let worst = resid.iter().fold(0.0f64, |a, &b| a.max(b)).sqrt();
        *slot = slot.min(worst);
    }
    if m <= 4 {
        let factor = DMatrix::from_fn(m, m, |t, k| vecs[(t, k)] * vals[k].max(0.0).sqrt());
        for (d, slot) in out.iter_mut().enumerate().take(m).skip(1) {
            *slot = slot.min(subspace_search(&factor, d));
        }
    }
    out
}

/// Random search plus local refinement over `d`-dimensional subspaces of
/// `R^m`; rows of `a` are the vectors to approximate.
fn subspace_search(a: &DMatrix<f64>, d: usize) -> f64 {
    let m = a.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ ((m as u64) << 8) ^ d as u64);
    let cost = |basis: &DMatrix<f64>| -> f64 {
        let q = basis.clone().qr().q();
        (0..m)
            .map(|t| {
                let row = a.row(t).transpose();
                let proj = &q * (q.transpose() * &row);
                (row - proj).norm()
            })
            .fold(0.0, f64::max)
    };
    let random = |rng: &mut ChaCha8Rng| DMatrix::from_fn(a.ncols(), d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut best = random(&mut rng);
    let mut best_cost = cost(&best);
    for _ in 0..400 {
        let cand = random(&mut rng);
        let c = cost(&cand);
        if c < best_cost {
            best = cand;
            best_cost = c;
        }
    }
    let mut step = 0.3;
    for _ in 0..4000 {
        let cand = &best + random(&mut rng) * step;
        let c = cost(&cand);
        if c < best_cost {
            best = cand;
            best_cost = c;
        } else {
            step = (step * 0.995).max(1e-7);
        }
    }
    best_cost
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
pub struct ApproxDimension {
    pub value: usize,
    /// True when the scan hit `|T_w|` without the inequality holding earlier.
    pub capped: bool,
}

/// `d(w, lambda) = min { d : d sigma_Y^2 / n >= ||lambda||_1 gamma2(rho_d(w)) / sqrt(n) }`.
pub fn approximate_dimension(
    w: &GridFunction,
    lambda: &GridFunction,
    sigma_y: f64,
    n: usize,
    model: &GramModel,
) -> Result<ApproxDimension> {
    let table = CoveringTable::build(model);
    let set = dominant_set(w)?;
    dimension_scan(w, lambda, sigma_y, n, model, &table, &set, model.partition())
}

#[allow(clippy::too_many_arguments)]
fn dimension_scan(
    w: &GridFunction,
    lambda: &GridFunction,
    sigma_y: f64,
    n: usize,
    model: &GramModel,
    table: &CoveringTable,
    set: &[usize],
    partition: Option<&[Range<usize>]>,
) -> Result<ApproxDimension> {
    check_len(model.len(), w.len())?;
    check_len(model.len(), lambda.len())?;
    if !(sigma_y > 0.0) || n == 0 {
        return invalid("approximate dimension needs sigma_Y > 0 and n >= 1");
    }
    let l1 = weighted_l1_norm(lambda, model.grid())?;
    if l1 == 0.0 || set.is_empty() {
        return Ok(ApproxDimension {
            value: 0,
            capped: false,
        });
    }
    let nf = n as f64;
    let widths = width_profile(model, set, set.len(), partition)?;
    for (d, rho) in widths.iter().enumerate() {
        if d as f64 * sigma_y * sigma_y / nf >= l1 * gamma2_dudley(table, *rho) / nf.sqrt() {
            return Ok(ApproxDimension {
                value: d,
                capped: false,
            });
        }
    }
    Ok(ApproxDimension {
        value: set.len(),
        capped: true,
    })
}

/// Local dimensions `d_j(w, lambda)` on each block of `partition`, using
/// `rho_m` of `T_w ∩ T_j` and the full `||lambda||_1`. Blocks that do not
/// meet the support of `lambda` get 0.
pub fn local_dimensions(
    w: &GridFunction,
    lambda: &GridFunction,
    sigma_y: f64,
    n: usize,
    model: &GramModel,
    partition: &[Range<usize>],
) -> Result<Vec<usize>> {
    let table = CoveringTable::build(model);
    let set = dominant_set(w)?;
    let support = lambda.support();
    partition
        .iter()
        .map(|r| {
            if !support.iter().any(|i| r.contains(i)) {
                return Ok(0);
            }
            let local: Vec<usize> = set.iter().copied().filter(|i| r.contains(i)).collect();
            Ok(dimension_scan(w, lambda, sigma_y, n, model, &table, &local, None)?.value)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RipEstimate {
    pub d: usize,
    pub delta: f64,
    /// False when only `search_budget` random block subsets were checked.
    pub exact: bool,
    pub subsets_checked: usize,
}

/// Restricted isometry constant `delta_d` of a block partition.
///
/// After whitening each block, the supremum over unit-variance directions
/// inside the blocks of `J` equals the spectral deviation of the whitened
/// cross-covariance on `J`, so each subset is evaluated exactly. Subsets are
/// enumerated when there are at most `search_budget` of them and sampled
/// otherwise.
pub fn rip_constant(
    model: &GramModel,
    partition: &[Range<usize>],
    d: usize,
    search_budget: usize,
    seed: u64,
) -> Result<RipEstimate> {
    let nb = partition.len();
    if d == 0 || d > nb {
        return invalid(format!("RIP order {d} must lie in 1..={nb}"));
    }
    let (white, offsets) = whitened(model, partition)?;
    if d == 1 {
        return Ok(RipEstimate {
            d,
            delta: 0.0,
            exact: true,
            subsets_checked: nb,
        });
    }
    let deviation = |blocks: &[usize]| -> f64 {
        let idx: Vec<usize> = blocks.iter().flat_map(|&b| offsets[b].clone()).collect();
        if idx.is_empty() {
            return 0.0;
        }
        let sub = linalg::principal_submatrix(&white, &idx);
        let (vals, _) = linalg::sorted_eigen(&sub);
        (vals[0] - 1.0).max(1.0 - vals[vals.len() - 1]).max(0.0)
    };
    let total = binomial(nb, d);
    let mut worst = 0.0f64;
    if total <= search_budget as f64 {
        let mut combo: Vec<usize> = (0..d).collect();
        let mut count = 0;
        loop {
            worst = worst.max(deviation(&combo));
            count += 1;
            if !next_combination(&mut combo, nb) {
                break;
            }
        }
        Ok(RipEstimate {
            d,
            delta: worst,
            exact: true,
            subsets_checked: count,
        })
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..search_budget {
            let mut pool: Vec<usize> = (0..nb).collect();
            for i in 0..d {
                let j = rng.random_range(i..nb);
                pool.swap(i, j);
            }
            let mut combo = pool[..d].to_vec();
            combo.sort_unstable();
            worst = worst.max(deviation(&combo));
        }
        Ok(RipEstimate {
            d,
            delta: worst,
            exact: false,
            subsets_checked: search_budget,
        })
    }
}

/// Block-whitened covariance with identity diagonal blocks, and the index
/// range of each block inside it.
fn whitened(model: &GramModel, partition: &[Range<usize>]) -> Result<(DMatrix<f64>, Vec<Range<usize>>)> {
    let k = model.k();
    let mut maps: Vec<(Vec<usize>, DMatrix<f64>)> = Vec::new();
    let mut offsets = Vec::new();
    let mut next = 0;
    for r in partition {
        if r.end > model.len() || r.start >= r.end {
            return invalid("partition block outside grid or empty");
        }
        let idx: Vec<usize> = r.clone().collect();
        let kb = linalg::principal_submatrix(k, &idx);
        let (vals, vecs) = linalg::sorted_eigen(&kb);
        let cut = vals[0].max(0.0) * 1e-10;
        let keep: Vec<usize> = (0..idx.len()).filter(|&i| vals[i] > cut && vals[i] > 0.0).collect();
        let a = DMatrix::from_fn(keep.len(), idx.len(), |r, c| vecs[(c, keep[r])] / vals[keep[r]].sqrt());
        offsets.push(next..next + keep.len());
        next += keep.len();
        maps.push((idx, a));
    }
    let mut white = DMatrix::zeros(next, next);
    for (bi, (ii, ai)) in maps.iter().enumerate() {
        for (bj, (ij, aj)) in maps.iter().enumerate() {
            let block = if bi == bj {
                DMatrix::identity(ai.nrows(), ai.nrows())
            } else {
                ai * linalg::submatrix(k, ii, ij) * aj.transpose()
            };
            white
                .view_mut((offsets[bi].start, offsets[bj].start), (ai.nrows(), aj.nrows()))
                .copy_from(&block);
        }
    }
    Ok((white, offsets))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    for i in (0..k).rev() {
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// `(1 + delta_2d) / ((1 - delta_2d)^2 - gamma delta_3d)`, infinite when the
/// denominator is not positive.
pub fn beta_bound_formula(delta_2d: f64, delta_3d: f64, gamma: f64) -> Result<f64> {
    for (name, v) in [("delta_2d", delta_2d), ("delta_3d", delta_3d)] {
        if !(0.0..1.0).contains(&v) {
            return invalid(format!("{name} = {v} outside [0, 1)"));
        }
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return invalid("gamma must be finite and nonnegative");
    }
    let den = (1.0 - delta_2d).powi(2) - gamma * delta_3d;
    Ok(if den > 0.0 { (1.0 + delta_2d) / den } else { f64::INFINITY })
}

#[derive(Debug, Clone, Serialize)]
pub struct PartitionDiagnostics {
    pub partition: Vec<[usize; 2]>,
    pub j_lambda: Vec<usize>,
    pub n_lambda: usize,
    pub delta_d: Vec<RipEstimate>,
    /// `None` encodes an infinite bound (also when a delta reaches 1).
    pub beta_bound: Option<f64>,
    pub gamma: f64,
}

/// Blocks meeting the support of `lambda`, RIP constants up to order
/// `3 N(lambda)` (capped at the number of blocks), and the resulting beta bound
/// with `gamma = b max_j ||k_j||_inf^(1/2) max_{j in J} ||w_j||_{K_j}`.
pub fn partition_diagnostics(
    model: &GramModel,
    partition: &[Range<usize>],
    lambda: &GridFunction,
    w: &GridFunction,
    b: f64,
    search_budget: usize,
    seed: u64,
) -> Result<PartitionDiagnostics> {
    check_len(model.len(), lambda.len())?;
    check_len(model.len(), w.len())?;
    let support = lambda.support();
    let j_lambda: Vec<usize> = partition
        .iter()
        .enumerate()
        .filter(|(_, r)| support.iter().any(|i| r.contains(i)))
        .map(|(j, _)| j)
        .collect();
    let nb = partition.len();
    let d = j_lambda.len().max(1);
    let orders: Vec<usize> = (1..=(3 * d).min(nb)).collect();
    let delta_d = orders
        .iter()
        .map(|&o| rip_constant(model, partition, o, search_budget, seed))
        .collect::<Result<Vec<_>>>()?;
    let k = model.k();
    let kmax = (0..model.len()).map(|i| k[(i, i)]).fold(0.0, f64::max);
    let mut wmax = 0.0f64;
    for &j in &j_lambda {
        let idx: Vec<usize> = partition[j].clone().collect();
        let kj = linalg::principal_submatrix(k, &idx);
        let wj: Vec<f64> = idx.iter().map(|&i| w.values()[i]).collect();
        wmax = wmax.max(rkhs_norm_matrix(&kj, &wj)?);
    }
    let gamma = b * kmax.sqrt() * wmax;
    let delta_at = |o: usize| delta_d[o.min(nb) - 1].delta;
    let (d2, d3) = (delta_at(2 * d), delta_at(3 * d));
    let beta_bound = if d2 < 1.0 && d3 < 1.0 {
        let v = beta_bound_formula(d2, d3, gamma)?;
        v.is_finite().then_some(v)
    } else {
        None
    };
    Ok(PartitionDiagnostics {
        partition: partition.iter().map(|r| [r.start, r.end]).collect(),
        n_lambda: j_lambda.len(),
        j_lambda,
        delta_d,
        beta_bound,
        gamma,
    })
}
