//! KL and Jensen-Shannon divergences, the reciprocal-JSD domain similarity,
//! the pairwise similarity matrix and multi-kernel MMD².

use crate::domains::{normalize_domain, DomainDistribution, DomainFeatures, DomainPool};
use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Matrix};

/// Floor below which a JSD is treated as zero when taking its reciprocal.
pub const EPS_SIM: f64 = 1e-12;

/// Multi-kernel Gaussian MMD configuration.
///
/// Bandwidths form the ladder `base * step^(u - kernel_count/2)` for
/// `u = 0..kernel_count`. A `bandwidth_base` of 0 selects the median pairwise
/// squared distance of the pooled samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdConfig {
    pub kernel_count: usize,
    pub bandwidth_base: f64,
    pub bandwidth_step: f64,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            kernel_count: 5,
            bandwidth_base: 0.0,
            bandwidth_step: 2.0,
        }
    }
}

impl MmdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_count == 0 {
            return Err(Error::config("kernel_count", "must be at least 1"));
        }
        if !(self.bandwidth_step > 1.0) {
            return Err(Error::config("bandwidth_step", "must exceed 1"));
        }
        if !(self.bandwidth_base >= 0.0) || !self.bandwidth_base.is_finite() {
            return Err(Error::config("bandwidth_base", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Concrete bandwidths for the given pooled samples.
    pub fn bandwidths(&self, xs: &Matrix, ys: &Matrix) -> Vec<f64> {
        let base = if self.bandwidth_base > 0.0 {
            self.bandwidth_base
        } else {
            median_pairwise_sq_dist(xs, ys)
        };
        let base = if base > 0.0 { base } else { 1.0 };
        let half = (self.kernel_count / 2) as i32;
        (0..self.kernel_count as i32)
            .map(|u| base * self.bandwidth_step.powi(u - half))
            .collect()
    }
}

fn median_pairwise_sq_dist(xs: &Matrix, ys: &Matrix) -> f64 {
    let pooled: Vec<&[f64]> = xs.row_iter().chain(ys.row_iter()).collect();
    let mut d = Vec::with_capacity(pooled.len() * (pooled.len().saturating_sub(1)) / 2);
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if d.len() % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// `KL(p‖q)` in nats with the convention `0·log(0/x) = 0`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

pub fn jsd(p: &DomainDistribution, q: &DomainDistribution) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            found: q.dim(),
        });
    }
    Ok(jsd_slices(p.probs(), q.probs()))
}

pub(crate) fn jsd_slices(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let v = 0.5 * kl(p, &m) + 0.5 * kl(q, &m);
    // rounding can leave a tiny negative value for identical inputs
    v.max(0.0)
}

/// Reciprocal JSD on already-normalised domains, capped at `1/EPS_SIM`.
pub fn adsm_from_distributions(p: &DomainDistribution, q: &DomainDistribution) -> Result<f64> {
    let d = jsd(p, q)?;
    Ok(1.0 / d.max(EPS_SIM))
}

/// Similarity of two domains: reciprocal JSD of their normalised forms.
pub fn adsm(h_i: &DomainFeatures, h_j: &DomainFeatures) -> Result<f64> {
    if h_i.dim() != h_j.dim() {
        return Err(Error::DimensionMismatch {
            expected: h_i.dim(),
            found: h_j.dim(),
        });
    }
    adsm_from_distributions(&normalize_domain(h_i)?, &normalize_domain(h_j)?)
}

/// Symmetric, non-negative, zero-diagonal domain similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Matrix);

impl SimilarityMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        let (r, c) = m.shape();
        if r != c {
            return Err(Error::NonSquare { rows: r, cols: c });
        }
        for i in 0..r {
            if m[(i, i)] != 0.0 {
                return Err(Error::InvalidInput(format!("diagonal entry {i} is not zero")));
            }
            for j in 0..r {
                let v = m[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "entry ({i},{j}) = {v} is not a finite non-negative value"
                    )));
                }
                if v != m[(j, i)] {
                    return Err(Error::NotSymmetric((v - m[(j, i)]).abs()));
                }
            }
        }
        Ok(SimilarityMatrix(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    /// Reorders rows and columns: entry `(a, b)` of the result is entry
    /// `(order[a], order[b])` of `self`.
    pub fn permuted(&self, order: &[usize]) -> SimilarityMatrix {
        let n = order.len();
        let mut m = Matrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                m[(a, b)] = self.0[(order[a], order[b])];
            }
        }
        SimilarityMatrix(m)
    }
}

pub fn similarity_matrix(pool: &DomainPool) -> Result<SimilarityMatrix> {
    let m = pool.len();
    if m < 2 {
        return Err(Error::PoolTooSmall(m));
    }
    let dists = pool
        .domains()
        .iter()
        .map(normalize_domain)
        .collect::<Result<Vec<_>>>()?;
    let mut w = Matrix::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let s = adsm_from_distributions(&dists[i], &dists[j])?;
            w[(i, j)] = s;
            w[(j, i)] = s;
        }
    }
    SimilarityMatrix::new(w)
}

fn check_mmd_inputs(xs: &Matrix, ys: &Matrix) -> Result<()> {
    for m in [xs, ys] {
        if m.rows() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: m.rows(),
            });
        }
    }
    if xs.cols() != ys.cols() {
        return Err(Error::DimensionMismatch {
            expected: xs.cols(),
            found: ys.cols(),
        });
    }
    Ok(())
}

fn kernel_sum(d2: f64, bandwidths: &[f64]) -> f64 {
    bandwidths.iter().map(|b| (-d2 / b).exp()).sum()
}

/// Unbiased multi-kernel Gaussian MMD² between two sample sets (rows).
///
/// The estimator can be slightly negative; callers clamp when reporting.
pub fn mmd2(xs: &Matrix, ys: &Matrix, cfg: &MmdConfig) -> Result<f64> {
    check_mmd_inputs(xs, ys)?;
    cfg.validate()?;
    let bw = cfg.bandwidths(xs, ys);
    Ok(mmd2_with_bandwidths(xs, ys, &bw))
}

pub(crate) fn mmd2_with_bandwidths(xs: &Matrix, ys: &Matrix, bw: &[f64]) -> f64 {
    let n = xs.rows() as f64;
    let m = ys.rows() as f64;
    let mut kxx = 0.0;
    for i in 0..xs.rows() {
        for j in (i + 1)..xs.rows() {
            kxx += kernel_sum(sq_dist(xs.row(i), xs.row(j)), bw);
        }
    }
    let mut kyy = 0.0;
    for i in 0..ys.rows() {
        for j in (i + 1)..ys.rows() {
            kyy += kernel_sum(sq_dist(ys.row(i), ys.row(j)), bw);
        }
    }
    let mut kxy = 0.0;
    for x in xs.row_iter() {
        for y in ys.row_iter() {
            kxy += kernel_sum(sq_dist(x, y), bw);
        }
    }
    2.0 * kxx / (n * (n - 1.0)) + 2.0 * kyy / (m * (m - 1.0)) - 2.0 * kxy / (n * m)
}

/// MMD² together with its gradients with respect to every sample.
///
/// Bandwidths are resolved once from the inputs and then held fixed, so the
/// gradient is exact for a fixed `bandwidth_base` and treats the median
/// heuristic as a constant otherwise.
pub fn mmd2_with_grad(xs: &Matrix, ys: &Matrix, cfg: &MmdConfig) -> Result<(f64, Matrix, Matrix)> {
    check_mmd_inputs(xs, ys)?;
    cfg.validate()?;
    let bw = cfg.bandwidths(xs, ys);
    let n = xs.rows();
    let m = ys.rows();
    let cxx = 2.0 / (n as f64 * (n as f64 - 1.0));
    let cyy = 2.0 / (m as f64 * (m as f64 - 1.0));
    let cxy = -2.0 / (n as f64 * m as f64);
    let d = xs.cols();
    let mut gx = Matrix::zeros(n, d);
    let mut gy = Matrix::zeros(m, d);
    let mut value = 0.0;

    // d/da k(a,b) = -2 (a-b) Σ_u exp(-|a-b|²/b_u)/b_u
    let pair = |a: &[f64], b: &[f64]| -> (f64, f64) {
        let d2 = sq_dist(a, b);
        let mut k = 0.0;
        let mut dk = 0.0;
        for bu in &bw {
            let e = (-d2 / bu).exp();
            k += e;
            dk += e / bu;
        }
        (k, -2.0 * dk)
    };

    for i in 0..n {
        for j in (i + 1)..n {
            let (k, s) = pair(xs.row(i), xs.row(j));
            value += cxx * k;
            for t in 0..d {
                let diff = xs[(i, t)] - xs[(j, t)];
                gx[(i, t)] += cxx * s * diff;
                gx[(j, t)] -= cxx * s * diff;
            }
        }
    }
    for i in 0..m {
        for j in (i + 1)..m {
            let (k, s) = pair(ys.row(i), ys.row(j));
            value += cyy * k;
            for t in 0..d {
                let diff = ys[(i, t)] - ys[(j, t)];
                gy[(i, t)] += cyy * s * diff;
                gy[(j, t)] -= cyy * s * diff;
            }
        }
    }
    for i in 0..n {
        for j in 0..m {
            let (k, s) = pair(xs.row(i), ys.row(j));
            value += cxy * k;
            for t in 0..d {
                let diff = xs[(i, t)] - ys[(j, t)];
                gx[(i, t)] += cxy * s * diff;
                gy[(j, t)] -= cxy * s * diff;
            }
        }
    }
    Ok((value, gx, gy))
}
