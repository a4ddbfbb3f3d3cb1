//! Clustering agreement, mode coverage and Gaussian Fréchet distance.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{oracle_mode_assign, MixtureSpec};
use crate::error::{Error, Result};
use crate::objectives::kl_divergence;
use crate::tensor::Tensor;

/// Largest number of distinct labels per side accepted by the table.
pub const MAX_LABELS: usize = 1024;

/// Counts of (true class, predicted cluster) pairs over compacted label ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ContingencyTable {
    counts: Vec<Vec<u64>>,
    true_ids: Vec<usize>,
    pred_ids: Vec<usize>,
    total: u64,
}

fn compact(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let index: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    (ids, labels.iter().map(|l| index[l]).collect())
}

impl ContingencyTable {
    pub fn new(true_labels: &[usize], pred_labels: &[usize]) -> Result<Self> {
        if true_labels.is_empty() {
            return Err(Error::invalid("metrics need at least one sample"));
        }
        if true_labels.len() != pred_labels.len() {
            return Err(Error::ShapeMismatch {
                op: "contingency",
                left: vec![true_labels.len()],
                right: vec![pred_labels.len()],
            });
        }
        let (true_ids, t) = compact(true_labels);
        let (pred_ids, p) = compact(pred_labels);
        if true_ids.len() > MAX_LABELS || pred_ids.len() > MAX_LABELS {
            return Err(Error::invalid(format!(
                "more than {MAX_LABELS} distinct labels"
            )));
        }
        let mut counts = vec![vec![0u64; pred_ids.len()]; true_ids.len()];
        for (&a, &b) in t.iter().zip(&p) {
            counts[a][b] += 1;
        }
        Ok(ContingencyTable {
            counts,
            true_ids,
            pred_ids,
            total: true_labels.len() as u64,
        })
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let rows = counts.len();
        let cols = counts.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || counts.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid(
                "contingency counts must be a non-empty rectangle",
            ));
        }
        let total = counts.iter().flatten().sum();
        if total == 0 {
            return Err(Error::invalid("contingency table is empty"));
        }
        Ok(ContingencyTable {
            counts,
            true_ids: (0..rows).collect(),
            pred_ids: (0..cols).collect(),
            total,
        })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        (0..self.pred_ids.len())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    /// Injective matching of predicted clusters to true classes maximising
    /// the matched count. Returns `(pred label, true label)` pairs.
    pub fn best_matching(&self) -> Vec<(usize, usize)> {
        let (nt, np) = (self.true_ids.len(), self.pred_ids.len());
        let n = nt.max(np);
        // Square cost over clusters x classes, zero-padded.
        let mut cost = vec![vec![0.0; n]; n];
        for (j, row) in cost.iter_mut().enumerate().take(np) {
            for (i, c) in row.iter_mut().enumerate().take(nt) {
                *c = -(self.counts[i][j] as f64);
            }
        }
        min_cost_assignment(&cost)
            .into_iter()
            .enumerate()
            .filter(|&(j, i)| j < np && i < nt)
            .map(|(j, i)| (self.pred_ids[j], self.true_ids[i]))
            .collect()
    }

    pub fn matched_count(&self) -> u64 {
        let pred_index: BTreeMap<usize, usize> = self
            .pred_ids
            .iter()
            .enumerate()
            .map(|(i, &l)| (l, i))
            .collect();
        let true_index: BTreeMap<usize, usize> = self
            .true_ids
            .iter()
            .enumerate()
            .map(|(i, &l)| (l, i))
            .collect();
        self.best_matching()
            .into_iter()
            .map(|(p, t)| self.counts[true_index[&t]][pred_index[&p]])
            .sum()
    }
}

/// Minimum-cost perfect assignment on a square matrix by shortest
/// augmenting paths with potentials. Returns the column of each row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Fraction of samples matched under the best injective relabeling.
pub fn clustering_accuracy(true_labels: &[usize], pred_labels: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(true_labels, pred_labels)?;
    Ok(t.matched_count() as f64 / t.total() as f64)
}

fn entropy(counts: &[u64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

impl ContingencyTable {
    pub fn nmi(&self) -> f64 {
        let n = self.total as f64;
        let (rs, cs) = (self.row_sums(), self.col_sums());
        let (ht, hp) = (entropy(&rs, n), entropy(&cs, n));
        if ht == 0.0 && hp == 0.0 {
            return 1.0;
        }
        if ht == 0.0 || hp == 0.0 {
            return 0.0;
        }
        let mut mi = 0.0;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0 {
                    let c = c as f64;
                    mi += c / n * (c * n / (rs[i] as f64 * cs[j] as f64)).ln();
                }
            }
        }
        (mi / (ht * hp).sqrt()).clamp(0.0, 1.0)
    }

    pub fn ari(&self) -> f64 {
        let pairs = |c: u64| (c * c.saturating_sub(1) / 2) as f64;
        let index: f64 = self.counts.iter().flatten().map(|&c| pairs(c)).sum();
        let a: f64 = self.row_sums().into_iter().map(pairs).sum();
        let b: f64 = self.col_sums().into_iter().map(pairs).sum();
        let total = pairs(self.total);
        if total == 0.0 {
            return 0.0;
        }
        let expected = a * b / total;
        let max = 0.5 * (a + b);
        if max == expected {
            // Only reachable when both partitions are all singletons or both a single cluster.
            return 1.0;
        }
        (index - expected) / (max - expected)
    }
}

pub fn nmi(true_labels: &[usize], pred_labels: &[usize]) -> Result<f64> {
    Ok(ContingencyTable::new(true_labels, pred_labels)?.nmi())
}

pub fn ari(true_labels: &[usize], pred_labels: &[usize]) -> Result<f64> {
    Ok(ContingencyTable::new(true_labels, pred_labels)?.ari())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub modes_covered: usize,
    pub histogram_kl: f64,
    /// Empirical mode frequencies of the generated samples.
    pub histogram: Vec<f64>,
    pub threshold: f64,
}

/// Default hit threshold `max(1, 0.2 · n / K)`.
pub fn default_min_count(n: usize, modes: usize) -> f64 {
    (0.2 * n as f64 / modes as f64).max(1.0)
}

/// Assigns generated samples to true modes and counts those with enough
/// hits; `histogram_kl` is `KL(histogram || target_prior)`.
pub fn mode_coverage(
    generated: &Tensor,
    spec: &MixtureSpec,
    min_count: Option<f64>,
    target_prior: &[f64],
) -> Result<Coverage> {
    let k = spec.components();
    if target_prior.len() != k {
        return Err(Error::invalid(format!(
            "target prior has {} entries for {k} modes",
            target_prior.len()
        )));
    }
    let n = generated.rows();
    if n == 0 {
        return Err(Error::invalid("no generated samples"));
    }
    let threshold = min_count.unwrap_or_else(|| default_min_count(n, k));
    if threshold < 1.0 {
        return Err(Error::invalid("min_count must be at least 1"));
    }
    let mut hits = vec![0usize; k];
    for l in oracle_mode_assign(generated, spec)? {
        hits[l] += 1;
    }
    let histogram: Vec<f64> = hits.iter().map(|&h| h as f64 / n as f64).collect();
    Ok(Coverage {
        modes_covered: hits.iter().filter(|&&h| h as f64 >= threshold).count(),
        histogram_kl: kl_divergence(&histogram, target_prior)?,
        histogram,
        threshold,
    })
}

/// Eigenvalue floor used when taking matrix square roots.
pub const EIGEN_FLOOR: f64 = 1e-10;

fn mean_cov(x: &Tensor) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in x.iter_rows() {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for r in x.iter_rows() {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / (n as f64 - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `Tr((A B)^{1/2})` for symmetric PSD `A`, `B` via `(A^{1/2} B A^{1/2})^{1/2}`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = sqrt_psd(a);
    let inner = &s * b * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum()
}

/// `Tr((A B)^{1/2}) = sqrt(tr(AB) + 2 sqrt(det(AB)))` for 2×2 PSD inputs.
pub fn trace_sqrt_product_2x2(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let p = a * b;
    let tr = p[(0, 0)] + p[(1, 1)];
    let det = (p[(0, 0)] * p[(1, 1)] - p[(0, 1)] * p[(1, 0)]).max(0.0);
    (tr + 2.0 * det.sqrt()).max(0.0).sqrt()
}

/// Fréchet distance between Gaussian fits of two sample sets.
pub fn frechet_gaussian(real: &Tensor, generated: &Tensor) -> Result<f64> {
    let d = real.cols();
    if generated.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "frechet_gaussian",
            left: real.shape().to_vec(),
            right: generated.shape().to_vec(),
        });
    }
    if real.rows() < d + 1 || generated.rows() < d + 1 {
        return Err(Error::invalid(format!(
            "need at least {} samples per set",
            d + 1
        )));
    }
    let (mr, cr) = mean_cov(real);
    let (mg, cg) = mean_cov(generated);
    let dmu: f64 = mr.iter().zip(&mg).map(|(a, b)| (a - b) * (a - b)).sum();
    let cross = if d == 2 {
        trace_sqrt_product_2x2(&cr, &cg)
    } else {
        trace_sqrt_product(&cr, &cg)
    };
    Ok((dmu + cr.trace() + cg.trace() - 2.0 * cross).max(0.0))
}

/// One evaluation snapshot. Disabled metrics are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: u64,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub modes_covered: Option<usize>,
    pub histogram_kl: Option<f64>,
    pub gaussian_frechet: Option<f64>,
}

impl MetricsReport {
    pub fn validate(&self, total_modes: usize) -> Result<()> {
        let in_unit = |v: Option<f64>| v.is_none_or(|x| (0.0..=1.0 + 1e-12).contains(&x));
        if !in_unit(self.acc) || !in_unit(self.nmi) {
            return Err(Error::Invariant(format!("metric out of range: {self:?}")));
        }
        if self.modes_covered.is_some_and(|m| m > total_modes) {
            return Err(Error::Invariant("more modes covered than exist".into()));
        }
        if self.histogram_kl.is_some_and(|k| k < 0.0)
            || self.gaussian_frechet.is_some_and(|f| f < 0.0)
        {
            return Err(Error::Invariant("negative divergence".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_grid, make_ring, sample_mixture};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn acc_examples() {
        let t = [0, 0, 1, 1, 2, 2];
        let p = [2, 2, 0, 0, 1, 1];
        assert_eq!(clustering_accuracy(&t, &p).unwrap(), 1.0);
        let p = [7; 6];
        assert_abs_diff_eq!(
            clustering_accuracy(&t, &p).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-15
        );
        assert!(clustering_accuracy(&[], &[]).is_err());
        assert!(clustering_accuracy(&[1], &[1, 2]).is_err());
    }

    fn brute_force_best(counts: &[Vec<u64>]) -> u64 {
        // Pad to a square and try every permutation.
        let n = counts.len().max(counts[0].len());
        let get = |i: usize, j: usize| counts.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = 0;
        permute(&mut perm, 0, &mut |p| {
            best = best.max((0..n).map(|i| get(i, p[i])).sum());
        });
        best
    }

    fn permute(p: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            visit(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, visit);
            p.swap(k, i);
        }
    }

    #[test]
    fn acc_matches_permutation_search_6x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let counts: Vec<Vec<u64>> = (0..6)
                .map(|_| (0..6).map(|_| rng.random_range(0..20)).collect())
                .collect();
            let t = ContingencyTable::from_counts(counts.clone()).unwrap();
            assert_eq!(t.matched_count(), brute_force_best(&counts));
        }
    }

    #[test]
    fn rectangular_tables() {
        let counts = vec![vec![5, 0, 1], vec![0, 7, 2]];
        let t = ContingencyTable::from_counts(counts.clone()).unwrap();
        assert_eq!(t.matched_count(), 12);
        let tr: Vec<Vec<u64>> = (0..3)
            .map(|j| counts.iter().map(|r| r[j]).collect())
            .collect();
        assert_eq!(
            ContingencyTable::from_counts(tr).unwrap().matched_count(),
            12
        );
    }

    #[test]
    fn perfect_and_degenerate_agreement() {
        let t = [0, 1, 1, 2, 2, 2];
        assert_abs_diff_eq!(nmi(&t, &t).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ari(&t, &t).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(nmi(&t, &[4; 6]).unwrap(), 0.0);
        assert_abs_diff_eq!(ari(&t, &[4; 6]).unwrap(), 0.0, epsilon = 1e-12);
        assert_eq!(nmi(&[1; 4], &[7; 4]).unwrap(), 1.0);
        assert_eq!(ari(&[1; 4], &[7; 4]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 1, 2], &[2, 0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn ari_hand_case() {
        // Pairs: same-true {01, 23}, same-pred {12, 13, 23}; agreement on 23.
        // index = 1, a = 2, b = 3, total = 6 -> expected 1, max 2.5.
        let v = ari(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn coverage_examples() {
        let spec = make_ring(8, 2.0, 0.05).unwrap();
        let s = sample_mixture(&spec, 100_000, 3).unwrap();
        let c = mode_coverage(&s.x, &spec, None, spec.weights()).unwrap();
        assert_eq!(c.modes_covered, 8);
        assert!(c.histogram_kl < 0.01);

        let collapsed = Tensor::from_rows(&vec![spec.means()[3].clone(); 500]).unwrap();
        let c = mode_coverage(&collapsed, &spec, None, spec.weights()).unwrap();
        assert_eq!(c.modes_covered, 1);
    }

    #[test]
    fn grid_histogram_kl_is_small() {
        let spec = make_grid(5, 2.0, 0.05).unwrap();
        let s = sample_mixture(&spec, 50_000, 11).unwrap();
        let c = mode_coverage(&s.x, &spec, None, spec.weights()).unwrap();
        // 2n·KL ~ chi-square with K-1 dof: mean 24/(2n), sd sqrt(48)/(2n).
        let n = 50_000.0;
        assert!(
            c.histogram_kl < (24.0 + 3.0 * 48f64.sqrt()) / (2.0 * n),
            "{}",
            c.histogram_kl
        );
        assert_eq!(c.modes_covered, 25);
    }

    #[test]
    fn frechet_examples() {
        let spec = make_ring(4, 1.0, 0.3).unwrap();
        let s = sample_mixture(&spec, 1000, 2).unwrap();
        assert!(frechet_gaussian(&s.x, &s.x).unwrap() < 1e-8);

        let a = Tensor::from_rows(&[[0.0, 0.0]; 10]).unwrap();
        let b = Tensor::from_rows(&[[3.0, 4.0]; 10]).unwrap();
        assert_abs_diff_eq!(frechet_gaussian(&a, &b).unwrap(), 25.0, epsilon = 1e-9);
        assert!(frechet_gaussian(&a, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn closed_form_and_eigen_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let m = |rng: &mut ChaCha8Rng| {
                let l = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
                &l * l.transpose() + DMatrix::identity(2, 2) * 0.01
            };
            let (a, b) = (m(&mut rng), m(&mut rng));
            assert_abs_diff_eq!(
                trace_sqrt_product(&a, &b),
                trace_sqrt_product_2x2(&a, &b),
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn report_validation() {
        let r = MetricsReport {
            acc: Some(1.2),
            ..Default::default()
        };
        assert!(r.validate(3).is_err());
        let r = MetricsReport {
            modes_covered: Some(4),
            ..Default::default()
        };
        assert!(r.validate(3).is_err());
    }
}
