//! Spectral clustering of domains over the similarity matrix, the
//! Calinski-Harabasz score on the spectral embedding, and automatic choice of
//! the cluster count.

use crate::divergence::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::numerics::{kmeans, norm2, parallel_map, sq_dist, sym_eigen, Matrix, Rng, DEFAULT_KMEANS_RESTARTS};

/// Added to every degree before `D^{-1/2}` so isolated domains stay finite.
pub const EPS_DEGREE: f64 = 1e-12;

/// Smallest cluster count considered by [`auto_cluster`].
pub const MIN_AUTO_K: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    pub labels: Vec<usize>,
    /// Row-normalised spectral coordinates, one row per domain.
    pub embedding: Matrix,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

/// Ng-Jordan-Weiss spectral clustering into `k` groups.
pub fn spectral_cluster(w: &SimilarityMatrix, k: usize, rng: &mut Rng) -> Result<ClusterAssignment> {
    let m = w.len();
    if k < 2 || k + 1 > m {
        return Err(Error::InvalidK { k, m });
    }
    let embedding = spectral_embedding(w, k)?;
    let fit = kmeans(&embedding, k, rng, DEFAULT_KMEANS_RESTARTS)?;
    Ok(ClusterAssignment {
        k,
        labels: canonical_labels(&fit.labels),
        embedding,
    })
}

/// Top-`k` eigenvectors of `D^{-1/2} W D^{-1/2}` with unit-length rows.
pub fn spectral_embedding(w: &SimilarityMatrix, k: usize) -> Result<Matrix> {
    let a = w.matrix();
    let m = a.rows();
    let inv_sqrt: Vec<f64> = (0..m)
        .map(|i| 1.0 / (a.row(i).iter().sum::<f64>() + EPS_DEGREE).sqrt())
        .collect();
    let mut l = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            l[(i, j)] = inv_sqrt[i] * a[(i, j)] * inv_sqrt[j];
        }
    }
    // D^{-1/2} W D^{-1/2} is symmetric but rounding can break exact symmetry
    for i in 0..m {
        for j in (i + 1)..m {
            let v = 0.5 * (l[(i, j)] + l[(j, i)]);
            l[(i, j)] = v;
            l[(j, i)] = v;
        }
    }
    let (_, vectors) = sym_eigen(&l)?;
    let mut emb = Matrix::zeros(m, k);
    for i in 0..m {
        for c in 0..k {
            emb[(i, c)] = vectors[(i, c)];
        }
        let n = norm2(emb.row(i));
        if !(n > 1e-300) {
            return Err(Error::DisconnectedDegenerate(i));
        }
        emb.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok(emb)
}

/// Relabels so clusters are numbered by first appearance.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map: Vec<(usize, usize)> = Vec::new();
    labels
        .iter()
        .map(|&l| match map.iter().find(|(from, _)| *from == l) {
            Some((_, to)) => *to,
            None => {
                let to = map.len();
                map.push((l, to));
                to
            }
        })
        .collect()
}

/// Calinski-Harabasz ratio on the assignment's embedding rows.
///
/// Returns `f64::INFINITY` when the within-cluster scatter is exactly zero.
pub fn ch_score(assignment: &ClusterAssignment) -> Result<f64> {
    ch_from_points(&assignment.embedding, &assignment.labels, assignment.k)
}

pub fn ch_from_points(points: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    let n = points.rows();
    if k < 2 || k >= n {
        return Err(Error::DegenerateK { k, n });
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} points",
            labels.len()
        )));
    }
    let d = points.cols();
    let mut global = vec![0.0; d];
    for p in points.row_iter() {
        for (g, v) in global.iter_mut().zip(p) {
            *g += v;
        }
    }
    global.iter_mut().for_each(|g| *g /= n as f64);

    let mut centroids = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::InvalidInput(format!("label {l} out of range for k={k}")));
        }
        counts[l] += 1;
        for (c, v) in centroids.row_mut(l).iter_mut().zip(points.row(i)) {
            *c += v;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            return Err(Error::InvalidInput(format!("cluster {c} is empty")));
        }
        let inv = 1.0 / counts[c] as f64;
        centroids.row_mut(c).iter_mut().for_each(|v| *v *= inv);
    }
    let between: f64 = (0..k)
        .map(|c| counts[c] as f64 * sq_dist(centroids.row(c), &global))
        .sum();
    let within: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(points.row(i), centroids.row(l)))
        .sum();
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Every candidate evaluated by [`auto_cluster`], plus the winner.
#[derive(Debug, Clone)]
pub struct ClusterSearch {
    pub best: ClusterAssignment,
    /// `(k, CH(k))` in increasing `k`.
    pub scores: Vec<(usize, f64)>,
}

/// Spectral clustering for every `k` in `3..=M-1`, keeping the highest CH
/// score; ties go to the smaller `k`.
pub fn auto_cluster(w: &SimilarityMatrix, rng: &Rng) -> Result<ClusterSearch> {
    let m = w.len();
    if m < MIN_AUTO_K + 1 {
        return Err(Error::PoolTooSmall(m));
    }
    auto_cluster_range(w, MIN_AUTO_K, m - 1, rng)
}

/// [`auto_cluster`] over an explicit inclusive range of `k`.
pub fn auto_cluster_range(w: &SimilarityMatrix, k_min: usize, k_max: usize, rng: &Rng) -> Result<ClusterSearch> {
    let m = w.len();
    if k_min < 2 || k_min > k_max {
        return Err(Error::InvalidK { k: k_min, m });
    }
    if k_max + 1 > m {
        return Err(Error::InvalidK { k: k_max, m });
    }
    let ks: Vec<usize> = (k_min..=k_max).collect();
    let runs = parallel_map(&ks, |&k| {
        let mut sub = rng.substream(&format!("spectral-k{k}"));
        let a = spectral_cluster(w, k, &mut sub)?;
        let score = ch_score(&a)?;
        Ok::<_, Error>((a, score))
    });
    let mut scores = Vec::with_capacity(ks.len());
    let mut best: Option<(ClusterAssignment, f64)> = None;
    for (k, run) in ks.iter().zip(runs) {
        let (a, score) = run?;
        scores.push((*k, score));
        if best.as_ref().map_or(true, |(_, s)| score > *s) {
            best = Some((a, score));
        }
    }
    Ok(ClusterSearch {
        best: best.expect("non-empty k range").0,
        scores,
    })
}

/// Adjusted Rand index between two labellings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labellings differ in length");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1) / 2) as f64;
    let sum_cells: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let sum_a: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-15 {
        // both labellings trivial (all one cluster or all singletons)
        return if sum_cells == expected { 1.0 } else { 0.0 };
    }
    (sum_cells - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_matrix(blocks: &[usize], inside: f64, across: f64) -> SimilarityMatrix {
        let labels: Vec<usize> = blocks
            .iter()
            .enumerate()
            .flat_map(|(b, &n)| std::iter::repeat(b).take(n))
            .collect();
        let m = labels.len();
        let mut w = Matrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    w[(i, j)] = if labels[i] == labels[j] { inside } else { across };
                }
            }
        }
        SimilarityMatrix::new(w).unwrap()
    }

    #[test]
    fn planted_blocks_recovered() {
        let w = block_matrix(&[3, 3], 50.0, 1.0);
        let a = spectral_cluster(&w, 2, &mut Rng::new(1)).unwrap();
        assert_eq!(adjusted_rand_index(&a.labels, &[0, 0, 0, 1, 1, 1]), 1.0);
    }

    #[test]
    fn uniform_matrix_gives_valid_assignment() {
        let w = block_matrix(&[5], 1.0, 1.0);
        let a = spectral_cluster(&w, 2, &mut Rng::new(4)).unwrap();
        assert_eq!(a.labels.len(), 5);
        assert!(a.sizes().iter().all(|&s| s > 0));
        assert!(a.labels.iter().all(|&l| l < 2));
    }

    #[test]
    fn invalid_k_rejected() {
        let w = block_matrix(&[2, 2], 5.0, 1.0);
        assert!(matches!(spectral_cluster(&w, 1, &mut Rng::new(0)), Err(Error::InvalidK { .. })));
        assert!(matches!(spectral_cluster(&w, 4, &mut Rng::new(0)), Err(Error::InvalidK { .. })));
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let w = SimilarityMatrix::new(Matrix::zeros(4, 4)).unwrap();
        // every spectral row vanishes except where the eigenbasis has support;
        // the guard must trip rather than divide by zero
        let res = spectral_embedding(&w, 2);
        match res {
            Err(Error::DisconnectedDegenerate(_)) => {}
            Ok(e) => assert!(e.is_finite()),
            Err(other) => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_degree_row_stays_finite() {
        let mut w = block_matrix(&[3, 3], 10.0, 1.0).matrix().clone();
        for j in 0..6 {
            w[(5, j)] = 0.0;
            w[(j, 5)] = 0.0;
        }
        let w = SimilarityMatrix::new(w).unwrap();
        let a = spectral_cluster(&w, 3, &mut Rng::new(2)).unwrap();
        assert!(a.embedding.is_finite());
    }

    #[test]
    fn ch_two_tight_clusters() {
        let pts = Matrix::from_rows(&[[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [5.0, 5.0], [5.1, 5.0], [5.0, 5.1]]).unwrap();
        let ch = ch_from_points(&pts, &[0, 0, 0, 1, 1, 1], 2).unwrap();
        // direct scatter computation: centroids (1/30,1/30) and (5+1/30, 5+1/30),
        // global centroid (2.5+1/30, 2.5+1/30)
        let between = 6.0 * (2.5f64 * 2.5 * 2.0);
        let per_cluster = 2.0 * ((1.0 / 30.0f64).powi(2) * 2.0)
            + (0.1 - 1.0 / 30.0f64).powi(2) * 2.0
            + 0.0;
        let within = 2.0 * per_cluster;
        let expected = (between / 1.0) / (within / 4.0);
        assert!((ch - expected).abs() < 1e-9 * expected, "{ch} vs {expected}");
        assert!(ch > 100.0);
    }

    #[test]
    fn ch_zero_within_is_infinite() {
        let pts = Matrix::from_rows(&[[0.0], [0.0], [1.0], [1.0]]).unwrap();
        assert_eq!(ch_from_points(&pts, &[0, 0, 1, 1], 2).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ch_four_point_hand_value() {
        // clusters {0}, {1}, {2,3} on a line: 0, 2, 5, 7
        let pts = Matrix::from_rows(&[[0.0], [2.0], [5.0], [7.0]]).unwrap();
        let ch = ch_from_points(&pts, &[0, 1, 2, 2], 3).unwrap();
        // global mean 3.5; centroid of {5,7} is 6
        let between = 1.0 * 3.5f64.powi(2) + 1.0 * 1.5f64.powi(2) + 2.0 * 2.5f64.powi(2);
        let within = 1.0 + 1.0;
        let expected = (between / 2.0) / (within / 1.0);
        assert!((ch - expected).abs() < 1e-12);
    }

    #[test]
    fn ch_degenerate_k() {
        let pts = Matrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        assert!(matches!(ch_from_points(&pts, &[0, 1, 2], 3), Err(Error::DegenerateK { .. })));
    }

    #[test]
    fn ch_drops_when_clusters_merge() {
        let pts = Matrix::from_rows(&[
            [0.0, 0.0], [0.2, 0.1], [0.1, 0.2],
            [4.0, 0.0], [4.2, 0.1], [4.1, 0.2],
            [0.0, 4.0], [0.2, 4.1], [0.1, 4.2],
        ])
        .unwrap();
        let three = ch_from_points(&pts, &[0, 0, 0, 1, 1, 1, 2, 2, 2], 3).unwrap();
        let merged = ch_from_points(&pts, &[0, 0, 0, 1, 1, 1, 1, 1, 1], 2).unwrap();
        assert!(merged < three);
    }

    #[test]
    fn auto_cluster_single_candidate() {
        let w = block_matrix(&[2, 2], 5.0, 1.0);
        let res = auto_cluster(&w, &Rng::new(3)).unwrap();
        assert_eq!(res.scores.len(), 1);
        assert_eq!(res.best.k, 3);
    }

    #[test]
    fn auto_cluster_finds_planted_count() {
        let w = block_matrix(&[3, 4, 3], 40.0, 1.0);
        let res = auto_cluster(&w, &Rng::new(3)).unwrap();
        assert_eq!(res.best.k, 3);
        let truth = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2];
        assert_eq!(adjusted_rand_index(&res.best.labels, &truth), 1.0);
        let w4 = block_matrix(&[3, 3, 3, 3], 40.0, 1.0);
        assert_eq!(auto_cluster(&w4, &Rng::new(3)).unwrap().best.k, 4);
    }

    #[test]
    fn auto_cluster_too_small() {
        let w = block_matrix(&[3], 1.0, 1.0);
        assert!(matches!(auto_cluster(&w, &Rng::new(0)), Err(Error::PoolTooSmall(3))));
    }

    #[test]
    fn auto_cluster_deterministic() {
        let w = block_matrix(&[3, 2, 4], 20.0, 2.0);
        let a = auto_cluster(&w, &Rng::new(17)).unwrap();
        let b = auto_cluster(&w, &Rng::new(17)).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn permuting_domains_permutes_labels() {
        let mut rng = Rng::new(5);
        let truth = [0, 0, 0, 1, 1, 1, 2, 2, 2];
        let mut w = Matrix::zeros(9, 9);
        for i in 0..9 {
            for j in (i + 1)..9 {
                let base = if truth[i] == truth[j] { 30.0 } else { 1.0 };
                let v = base * (1.0 + 0.2 * rng.uniform());
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
        let w = SimilarityMatrix::new(w).unwrap();
        let a = spectral_cluster(&w, 3, &mut Rng::new(1)).unwrap();
        let mut order: Vec<usize> = (0..9).collect();
        rng.shuffle(&mut order);
        let b = spectral_cluster(&w.permuted(&order), 3, &mut Rng::new(1)).unwrap();
        let a_perm: Vec<usize> = order.iter().map(|&o| a.labels[o]).collect();
        assert_eq!(adjusted_rand_index(&a_perm, &b.labels), 1.0);
    }

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
        assert_eq!(canonical_labels(&[2, 2, 0, 1, 0]), vec![0, 0, 1, 2, 1]);
    }
}
