//! Principal domain selection: intra-domain dispersion, discrepancy between
//! domain collections, the coverage score built from them, and exhaustive
//! enumeration of one-domain-per-cluster combinations.

use std::fmt;
use std::str::FromStr;

use crate::clustering::ClusterAssignment;
use crate::divergence::{jsd_slices, mmd2, MmdConfig, EPS_SIM};
use crate::domains::{normalize_domain, DomainDistribution, DomainFeatures, DomainPool};
use crate::error::{Error, Result};
use crate::numerics::{norm2, parallel_map, Matrix};

pub const DEFAULT_COMBINATION_CAP: u128 = 1_000_000;
const ZERO_NORM: f64 = 1e-15;

/// Distance used between concatenated domain collections.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DadMetric {
    #[default]
    Jsd,
    Mmd(MmdConfig),
}

impl fmt::Display for DadMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DadMetric::Jsd => f.write_str("jsd"),
            DadMetric::Mmd(_) => f.write_str("mmd"),
        }
    }
}

impl FromStr for DadMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "jsd" => Ok(DadMetric::Jsd),
            "mmd" => Ok(DadMetric::Mmd(MmdConfig::default())),
            other => Err(Error::config("metric", format!("unknown metric `{other}`"))),
        }
    }
}

/// Mean distance of L2-normalised samples to their mean.
pub fn idd(dom: &DomainFeatures) -> Result<f64> {
    let feats = dom.features();
    let (v, d) = feats.shape();
    let mut unit = Matrix::zeros(v, d);
    for (i, row) in feats.row_iter().enumerate() {
        let n = norm2(row);
        if n < ZERO_NORM {
            return Err(Error::ZeroVector {
                domain: dom.attack_id().to_string(),
                index: i,
            });
        }
        for (u, x) in unit.row_mut(i).iter_mut().zip(row) {
            *u = x / n;
        }
    }
    let mut mean = vec![0.0; d];
    for row in unit.row_iter() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= v as f64);
    let total: f64 = unit
        .row_iter()
        .map(|row| {
            row.iter()
                .zip(&mean)
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / v as f64)
}

/// Discrepancy between the concatenation of `a` and the concatenation of `b`.
///
/// Under JSD the value is floored at [`EPS_SIM`] so it can divide.
pub fn dad(a: &[&DomainFeatures], b: &[&DomainFeatures], metric: &DadMetric) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyDomain("dad operand".into()));
    }
    let dim = a[0].dim();
    if let Some(bad) = a.iter().chain(b).find(|d| d.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.dim(),
        });
    }
    let left = DomainFeatures::concat("left", a)?;
    let right = DomainFeatures::concat("right", b)?;
    match metric {
        DadMetric::Jsd => {
            let p = normalize_domain(&left)?;
            let q = normalize_domain(&right)?;
            Ok(jsd_slices(p.probs(), q.probs()).max(EPS_SIM))
        }
        DadMetric::Mmd(cfg) => mmd2(left.features(), right.features(), cfg).map(|v| v.max(EPS_SIM)),
    }
}

/// Coverage score: summed dispersion of `selected` over their discrepancy
/// from the whole pool.
pub fn cefs(selected: &[&DomainFeatures], pool: &DomainPool, metric: &DadMetric) -> Result<f64> {
    let numerator = selected.iter().map(|d| idd(d)).sum::<Result<f64>>()?;
    let all: Vec<&DomainFeatures> = pool.domains().iter().collect();
    Ok(numerator / dad(selected, &all, metric)?)
}

/// Chosen principal domains plus the full audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct PadSelection {
    /// One attack id per cluster, in cluster order.
    pub chosen: Vec<String>,
    /// Pool indices of `chosen`.
    pub chosen_indices: Vec<usize>,
    pub cefs: f64,
    /// Every enumerated combination and its score, in enumeration order.
    pub all_scores: Vec<(Vec<String>, f64)>,
}

impl PadSelection {
    /// `combination;cefs` lines with the combination joined by `+`.
    pub fn audit_csv(&self) -> String {
        let mut out = String::from("combination;cefs\n");
        for (combo, score) in &self.all_scores {
            out.push_str(&format!("{};{score:?}\n", combo.join("+")));
        }
        out
    }

    /// Audit entries sorted by descending score (ties by attack ids).
    pub fn ranked(&self) -> Vec<&(Vec<String>, f64)> {
        let mut r: Vec<_> = self.all_scores.iter().collect();
        r.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        r
    }
}

/// Precomputed per-domain quantities for fast combination scoring.
struct ScoringCache<'a> {
    pool: &'a DomainPool,
    idd: Vec<f64>,
    dists: Vec<DomainDistribution>,
    whole: DomainDistribution,
}

impl<'a> ScoringCache<'a> {
    fn new(pool: &'a DomainPool, metric: &DadMetric) -> Result<Self> {
        let idd = pool.domains().iter().map(idd).collect::<Result<Vec<_>>>()?;
        let dists = match metric {
            DadMetric::Jsd => pool
                .domains()
                .iter()
                .map(normalize_domain)
                .collect::<Result<Vec<_>>>()?,
            DadMetric::Mmd(_) => Vec::new(),
        };
        let whole = match metric {
            DadMetric::Jsd => {
                let parts: Vec<(&DomainDistribution, usize)> = dists
                    .iter()
                    .zip(pool.domains())
                    .map(|(p, d)| (p, d.len()))
                    .collect();
                DomainDistribution::mixture(&parts)?
            }
            DadMetric::Mmd(_) => DomainDistribution::new(vec![1.0])?,
        };
        Ok(ScoringCache {
            pool,
            idd,
            dists,
            whole,
        })
    }

    fn score(&self, combo: &[usize], metric: &DadMetric) -> Result<f64> {
        let numerator: f64 = combo.iter().map(|&i| self.idd[i]).sum();
        let denominator = match metric {
            DadMetric::Jsd => {
                let parts: Vec<(&DomainDistribution, usize)> = combo
                    .iter()
                    .map(|&i| (&self.dists[i], self.pool.domains()[i].len()))
                    .collect();
                let sel = DomainDistribution::mixture(&parts)?;
                jsd_slices(sel.probs(), self.whole.probs()).max(EPS_SIM)
            }
            DadMetric::Mmd(_) => {
                let sel: Vec<&DomainFeatures> =
                    combo.iter().map(|&i| &self.pool.domains()[i]).collect();
                let all: Vec<&DomainFeatures> = self.pool.domains().iter().collect();
                dad(&sel, &all, metric)?
            }
        };
        Ok(numerator / denominator)
    }
}

/// Every one-per-cluster combination as pool indices, cluster 0 varying slowest.
pub fn cross_cluster_combinations(assignment: &ClusterAssignment, cap: u128) -> Result<Vec<Vec<usize>>> {
    let members: Vec<Vec<usize>> = (0..assignment.k).map(|c| assignment.members(c)).collect();
    let count: u128 = members.iter().map(|m| m.len() as u128).product();
    if count > cap {
        return Err(Error::CombinatorialBlowup { count, cap });
    }
    if members.iter().any(|m| m.is_empty()) {
        return Err(Error::InvalidInput("assignment has an empty cluster".into()));
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut cursor = vec![0usize; members.len()];
    loop {
        out.push(cursor.iter().zip(&members).map(|(&c, m)| m[c]).collect());
        let mut level = members.len();
        loop {
            if level == 0 {
                return Ok(out);
            }
            level -= 1;
            cursor[level] += 1;
            if cursor[level] < members[level].len() {
                break;
            }
            cursor[level] = 0;
        }
    }
}

/// Exhaustive argmax of the coverage score over cross-cluster combinations.
pub fn select_pads(
    pool: &DomainPool,
    assignment: &ClusterAssignment,
    metric: &DadMetric,
    cap: u128,
) -> Result<PadSelection> {
    if assignment.labels.len() != pool.len() {
        return Err(Error::ShapeMismatch(format!(
            "assignment covers {} domains, pool has {}",
            assignment.labels.len(),
            pool.len()
        )));
    }
    let combos = cross_cluster_combinations(assignment, cap)?;
    let cache = ScoringCache::new(pool, metric)?;
    let scores = parallel_map(&combos, |c| cache.score(c, metric))
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let ids = |c: &[usize]| -> Vec<String> {
        c.iter().map(|&i| pool.domains()[i].attack_id().to_string()).collect()
    };
    let all_scores: Vec<(Vec<String>, f64)> =
        combos.iter().zip(&scores).map(|(c, s)| (ids(c), *s)).collect();
    let mut best = 0;
    for i in 1..combos.len() {
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best] && all_scores[i].0 < all_scores[best].0);
        if better {
            best = i;
        }
    }
    Ok(PadSelection {
        chosen: all_scores[best].0.clone(),
        chosen_indices: combos[best].clone(),
        cefs: scores[best],
        all_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn blob(id: &str, center: &[f64], spread: f64, n: usize, rng: &mut Rng) -> DomainFeatures {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| center.iter().map(|c| c + spread * rng.normal()).collect())
            .collect();
        DomainFeatures::from_rows(id, &rows).unwrap()
    }

    fn assignment(labels: Vec<usize>) -> ClusterAssignment {
        let k = labels.iter().max().unwrap() + 1;
        let n = labels.len();
        ClusterAssignment {
            k,
            labels,
            embedding: Matrix::zeros(n, k),
        }
    }

    #[test]
    fn idd_identical_samples_zero() {
        let d = DomainFeatures::from_rows("a", &[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert!(idd(&d).unwrap().abs() < 1e-15);
    }

    #[test]
    fn idd_two_axis_samples() {
        let d = DomainFeatures::from_rows("a", &[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!((idd(&d).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn idd_scale_invariant() {
        let mut rng = Rng::new(4);
        let d = blob("a", &[1.0, -2.0, 0.5], 1.0, 20, &mut rng);
        let scaled = DomainFeatures::new("a", d.features().scale(10.0)).unwrap();
        assert!((idd(&d).unwrap() - idd(&scaled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn idd_zero_vector() {
        let d = DomainFeatures::from_rows("z", &[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(idd(&d), Err(Error::ZeroVector { index: 1, .. })));
    }

    #[test]
    fn dad_identity_and_distance() {
        let mut rng = Rng::new(6);
        let a = blob("a", &[0.0, 1.0, 0.0], 0.5, 30, &mut rng);
        let far = blob("f", &[4.0, -3.0, 2.0], 0.5, 30, &mut rng);
        assert_eq!(dad(&[&a], &[&a], &DadMetric::Jsd).unwrap(), EPS_SIM);
        let d = dad(&[&a], &[&a, &far], &DadMetric::Jsd).unwrap();
        let cat = DomainFeatures::concat("c", &[&a, &far]).unwrap();
        let oracle = crate::divergence::jsd(&normalize_domain(&a).unwrap(), &normalize_domain(&cat).unwrap()).unwrap();
        assert!(d > 1e-3);
        assert!((d - oracle).abs() < 1e-15);
        let mmd = DadMetric::Mmd(MmdConfig::default());
        assert!(dad(&[&a], &[&a], &mmd).unwrap() <= 1e-9);
    }

    #[test]
    fn dad_rejects_mixed_dims() {
        let a = DomainFeatures::from_rows("a", &[[1.0, 2.0]]).unwrap();
        let b = DomainFeatures::from_rows("b", &[[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(dad(&[&a], &[&b], &DadMetric::Jsd), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn cefs_full_pool_saturates() {
        let mut rng = Rng::new(7);
        let doms: Vec<_> = (0..3).map(|i| blob(&format!("d{i}"), &[i as f64, 1.0], 0.3, 12, &mut rng)).collect();
        let pool = DomainPool::new(doms.clone()).unwrap();
        let all: Vec<&DomainFeatures> = doms.iter().collect();
        let full = cefs(&all, &pool, &DadMetric::Jsd).unwrap();
        let numerator: f64 = doms.iter().map(|d| idd(d).unwrap()).sum();
        assert!((full - numerator / EPS_SIM).abs() <= 1e-6 * full);
        for d in &doms {
            assert!(cefs(&[d], &pool, &DadMetric::Jsd).unwrap() < full);
        }
    }

    #[test]
    fn cefs_zero_dispersion_is_zero() {
        let flat = DomainFeatures::from_rows("flat", &[[1.0, 1.0], [2.0, 2.0]]).unwrap();
        let other = DomainFeatures::from_rows("o", &[[0.0, 3.0], [1.0, -1.0]]).unwrap();
        let pool = DomainPool::new(vec![flat.clone(), other]).unwrap();
        assert_eq!(cefs(&[&flat], &pool, &DadMetric::Jsd).unwrap(), 0.0);
    }

    #[test]
    fn cefs_matches_composed_oracles() {
        let mut rng = Rng::new(8);
        let doms: Vec<_> = (0..9)
            .map(|i| blob(&format!("d{i}"), &[(i % 3) as f64, (i / 3) as f64, 0.5], 0.4, 15, &mut rng))
            .collect();
        let pool = DomainPool::new(doms.clone()).unwrap();
        let sel = [&doms[0], &doms[4], &doms[8]];
        let got = cefs(&sel, &pool, &DadMetric::Jsd).unwrap();
        let num: f64 = sel.iter().map(|d| idd(d).unwrap()).sum();
        let cat_sel = DomainFeatures::concat("s", &sel).unwrap();
        let all: Vec<&DomainFeatures> = doms.iter().collect();
        let cat_all = DomainFeatures::concat("a", &all).unwrap();
        let den = crate::divergence::jsd(&normalize_domain(&cat_sel).unwrap(), &normalize_domain(&cat_all).unwrap()).unwrap();
        assert!((got - num / den).abs() < 1e-9 * got);
    }

    #[test]
    fn five_three_two_clusters_enumerate_thirty() {
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1, 2, 2];
        let combos = cross_cluster_combinations(&assignment(labels), DEFAULT_COMBINATION_CAP).unwrap();
        assert_eq!(combos.len(), 30);
        let mut unique = combos.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), 30);
    }

    #[test]
    fn singleton_clusters_single_combination() {
        let mut rng = Rng::new(9);
        let doms: Vec<_> = (0..3).map(|i| blob(&format!("d{i}"), &[i as f64 + 1.0, 0.5], 0.3, 8, &mut rng)).collect();
        let pool = DomainPool::new(doms).unwrap();
        let sel = select_pads(&pool, &assignment(vec![0, 1, 2]), &DadMetric::Jsd, DEFAULT_COMBINATION_CAP).unwrap();
        assert_eq!(sel.all_scores.len(), 1);
        assert_eq!(sel.chosen, vec!["d0", "d1", "d2"]);
    }

    #[test]
    fn cap_enforced() {
        let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
        match cross_cluster_combinations(&assignment(labels), 100) {
            Err(Error::CombinatorialBlowup { count, cap }) => {
                assert_eq!(count, 625);
                assert_eq!(cap, 100);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn argmax_matches_brute_force() {
        let mut rng = Rng::new(10);
        let doms: Vec<_> = (0..9)
            .map(|i| blob(&format!("a{i}"), &[(i / 3) as f64 * 2.0, 1.0, -1.0], 0.2 + 0.1 * i as f64, 10, &mut rng))
            .collect();
        let pool = DomainPool::new(doms.clone()).unwrap();
        let labels: Vec<usize> = (0..9).map(|i| i / 3).collect();
        let sel = select_pads(&pool, &assignment(labels), &DadMetric::Jsd, DEFAULT_COMBINATION_CAP).unwrap();
        let mut best = (f64::NEG_INFINITY, vec![]);
        for a in 0..3 {
            for b in 3..6 {
                for c in 6..9 {
                    let s = cefs(&[&doms[a], &doms[b], &doms[c]], &pool, &DadMetric::Jsd).unwrap();
                    if s > best.0 {
                        best = (s, vec![a, b, c]);
                    }
                }
            }
        }
        assert_eq!(sel.chosen_indices, best.1);
        assert!((sel.cefs - best.0).abs() < 1e-9 * best.0);
        assert!(sel.all_scores.iter().all(|(_, s)| *s <= sel.cefs));
        assert_eq!(sel.all_scores.len(), 27);
        assert!(sel.audit_csv().starts_with("combination;cefs\n"));
    }

    #[test]
    fn ties_break_lexicographically() {
        let rows = [[1.0, 0.0], [0.0, 1.0]];
        let doms = vec![
            DomainFeatures::from_rows("b", &rows).unwrap(),
            DomainFeatures::from_rows("a", &rows).unwrap(),
            DomainFeatures::from_rows("c", &[[2.0, 1.0], [1.0, 2.0]]).unwrap(),
        ];
        let pool = DomainPool::new(doms).unwrap();
        let sel = select_pads(&pool, &assignment(vec![0, 0, 1]), &DadMetric::Jsd, DEFAULT_COMBINATION_CAP).unwrap();
        assert_eq!(sel.all_scores[0].1, sel.all_scores[1].1);
        assert_eq!(sel.chosen, vec!["a", "c"]);
    }
}
