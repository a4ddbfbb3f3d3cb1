//! Synthetic Gaussian mixtures with known mode labels.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Isotropic Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    means: Vec<Vec<f64>>,
    stds: Vec<f64>,
    weights: Vec<f64>,
}

fn check_simplex(w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(format!(
            "weights must be non-negative: {w:?}"
        )));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("weights sum to {s}, not 1")));
    }
    Ok(())
}

impl MixtureSpec {
    pub fn new(means: Vec<Vec<f64>>, stds: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let k = means.len();
        if k < 2 {
            return Err(Error::invalid("a mixture needs at least 2 components"));
        }
        if stds.len() != k || weights.len() != k {
            return Err(Error::invalid(format!(
                "{k} means but {} stds and {} weights",
                stds.len(),
                weights.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0
            || means
                .iter()
                .any(|m| m.len() != dim || m.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::invalid(
                "means must be finite and share one positive dimension",
            ));
        }
        if stds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("stds must be positive"));
        }
        check_simplex(&weights)?;
        for i in 0..k {
            for j in i + 1..k {
                if means[i] == means[j] {
                    return Err(Error::invalid(format!(
                        "components {i} and {j} share a mean"
                    )));
                }
            }
        }
        Ok(MixtureSpec {
            means,
            stds,
            weights,
        })
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        MixtureSpec::new(self.means.clone(), self.stds.clone(), weights)
    }

    pub fn with_std(&self, std: f64) -> Result<Self> {
        MixtureSpec::new(
            self.means.clone(),
            vec![std; self.components()],
            self.weights.clone(),
        )
    }

    /// Log density of component `k` at `x`, without its weight.
    pub fn component_log_density(&self, k: usize, x: &[f64]) -> f64 {
        let s2 = self.stds[k] * self.stds[k];
        let d2: f64 = x
            .iter()
            .zip(&self.means[k])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        -0.5 * x.len() as f64 * (2.0 * PI * s2).ln() - d2 / (2.0 * s2)
    }
}

fn uniform(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

fn ring_points(k: usize, radius: f64) -> Vec<[f64; 2]> {
    (0..k)
        .map(|i| {
            let t = 2.0 * PI * i as f64 / k as f64;
            [radius * t.cos(), radius * t.sin()]
        })
        .collect()
}

/// `k` equispaced means on a circle.
pub fn make_ring(k: usize, radius: f64, std: f64) -> Result<MixtureSpec> {
    if k < 2 || !(radius > 0.0) {
        return Err(Error::invalid("ring needs k >= 2 and radius > 0"));
    }
    let means = ring_points(k, radius)
        .into_iter()
        .map(|p| p.to_vec())
        .collect();
    MixtureSpec::new(means, vec![std; k], uniform(k))
}

/// `m × m` lattice centred on the origin.
pub fn make_grid(m: usize, spacing: f64, std: f64) -> Result<MixtureSpec> {
    if m < 2 || !(spacing > 0.0) {
        return Err(Error::invalid("grid needs m >= 2 and spacing > 0"));
    }
    let off = (m as f64 - 1.0) / 2.0;
    let mut means = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            means.push(vec![(i as f64 - off) * spacing, (j as f64 - off) * spacing]);
        }
    }
    MixtureSpec::new(means, vec![std; m * m], uniform(m * m))
}

pub fn make_skewed(base: &MixtureSpec, weights: &[f64]) -> Result<MixtureSpec> {
    base.with_weights(weights.to_vec())
}

/// Product of `factors` independent rings of `levels` points, each in its
/// own coordinate plane. Component `i` has level `(i / levels^f) % levels`
/// in factor `f`.
pub fn make_factored(factors: usize, levels: usize, radius: f64, std: f64) -> Result<MixtureSpec> {
    if factors == 0 || levels < 2 || !(radius > 0.0) {
        return Err(Error::invalid(
            "factored needs factors >= 1, levels >= 2, radius > 0",
        ));
    }
    let total = levels
        .checked_pow(factors as u32)
        .filter(|t| *t <= 1 << 20)
        .ok_or_else(|| Error::invalid("too many product modes"))?;
    let ring = ring_points(levels, radius);
    let means = (0..total)
        .map(|i| {
            let mut rest = i;
            let mut mean = Vec::with_capacity(2 * factors);
            for _ in 0..factors {
                mean.extend_from_slice(&ring[rest % levels]);
                rest /= levels;
            }
            mean
        })
        .collect();
    MixtureSpec::new(means, vec![std; total], uniform(total))
}

/// Data rows with their generating component.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Samples> {
        Ok(Samples {
            x: self.x.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

pub fn sample_mixture(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Samples> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_mixture_with(spec, n, &mut rng)
}

pub fn sample_mixture_with(spec: &MixtureSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Samples> {
    if n == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let pick = WeightedIndex::new(spec.weights()).map_err(|e| Error::invalid(e.to_string()))?;
    let dim = spec.dim();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = pick.sample(rng);
        let s = spec.stds[k];
        for &m in &spec.means[k] {
            let e: f64 = StandardNormal.sample(rng);
            data.push(m + s * e);
        }
        labels.push(k);
    }
    Ok(Samples {
        x: Tensor::new(vec![n, dim], data)?,
        labels,
    })
}

/// Maximum-likelihood component per row. Exact ties go to the heavier
/// component, then the lower index.
pub fn oracle_mode_assign(x: &Tensor, spec: &MixtureSpec) -> Result<Vec<usize>> {
    if x.shape().len() != 2 || x.cols() != spec.dim() {
        return Err(Error::ShapeMismatch {
            op: "oracle_mode_assign",
            left: x.shape().to_vec(),
            right: vec![spec.dim()],
        });
    }
    Ok(x.iter_rows()
        .map(|row| {
            let mut best = 0;
            let mut best_ll = spec.component_log_density(0, row);
            for k in 1..spec.components() {
                let ll = spec.component_log_density(k, row);
                if ll > best_ll || (ll == best_ll && spec.weights[k] > spec.weights[best]) {
                    best = k;
                    best_ll = ll;
                }
            }
            best
        })
        .collect())
}

/// Labeled real samples available for supervision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSubset {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub fraction: f64,
}

pub const MAX_LABELED_FRACTION: f64 = 0.05;

/// Draws `round(fraction · n)` labeled indices. When that count reaches the
/// number of non-empty modes, each mode contributes one example first.
pub fn draw_supervised_subset(labels: &[usize], fraction: f64, seed: u64) -> Result<LabeledSubset> {
    if !(fraction > 0.0 && fraction <= MAX_LABELED_FRACTION) {
        return Err(Error::invalid(format!(
            "labeled fraction {fraction} outside (0, {MAX_LABELED_FRACTION}]"
        )));
    }
    let n = labels.len();
    let count = ((fraction * n as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_mode: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_mode.entry(l).or_default().push(i);
    }
    let mut chosen = Vec::with_capacity(count);
    let mut taken = vec![false; n];
    if count >= by_mode.len() {
        for members in by_mode.values() {
            let i = *members.choose(&mut rng).expect("non-empty mode");
            chosen.push(i);
            taken[i] = true;
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    rest.shuffle(&mut rng);
    chosen.extend(rest.into_iter().take(count - chosen.len()));
    chosen.sort_unstable();

    let sub_labels: Vec<usize> = chosen.iter().map(|&i| labels[i]).collect();
    let mut distinct = sub_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid("labeled subset covers fewer than 2 modes"));
    }
    Ok(LabeledSubset {
        indices: chosen,
        labels: sub_labels,
        fraction,
    })
}

/// Train split plus a per-mode balanced test set.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: Samples,
    pub test: Samples,
}

pub const TRAIN_FRACTION: f64 = 0.8;

/// Samples `n` points, keeps 80% for training and resamples the held-out
/// 20% with replacement to equal per-mode counts.
pub fn make_splits(spec: &MixtureSpec, n: usize, seed: u64) -> Result<DatasetSplits> {
    if n < 10 {
        return Err(Error::invalid("need at least 10 samples to split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = sample_mixture_with(spec, n, &mut rng)?;
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let train = all.select(&(0..n_train).collect::<Vec<_>>())?;
    let held = all.select(&(n_train..n).collect::<Vec<_>>())?;
    let test = balanced_resample(&held, spec.components(), held.len(), &mut rng)?;
    Ok(DatasetSplits { train, test })
}

/// Resamples with replacement to `total / K` rows for each mode present.
pub fn balanced_resample(
    samples: &Samples,
    modes: usize,
    total: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Samples> {
    let mut by_mode = vec![Vec::new(); modes];
    for (i, &l) in samples.labels.iter().enumerate() {
        by_mode[l].push(i);
    }
    let present = by_mode.iter().filter(|m| !m.is_empty()).count();
    if present == 0 {
        return Err(Error::invalid("nothing to resample"));
    }
    let per_mode = (total / present).max(1);
    let mut idx = Vec::with_capacity(per_mode * present);
    for members in by_mode.iter().filter(|m| !m.is_empty()) {
        idx.extend((0..per_mode).map(|_| *members.choose(rng).expect("non-empty")));
    }
    samples.select(&idx)
}

pub fn write_samples_csv<W: Write>(mut w: W, samples: &Samples) -> Result<()> {
    let d = samples.x.cols();
    let header: Vec<String> = (0..d)
        .map(|j| format!("x_{j}"))
        .chain(["label".into()])
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (row, l) in samples.x.iter_rows().zip(&samples.labels) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{l}", cells.join(","))?;
    }
    Ok(())
}

pub fn read_samples_csv<R: BufRead>(r: R) -> Result<Samples> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::invalid("empty CSV"))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let d = cols.len().saturating_sub(1);
    let expected: Vec<String> = (0..d)
        .map(|j| format!("x_{j}"))
        .chain(["label".into()])
        .collect();
    if d == 0 || cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::invalid(format!("unexpected CSV header '{header}'")));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.trim().split(',').collect();
        if cells.len() != d + 1 {
            return Err(Error::invalid(format!(
                "CSV line {} has {} fields",
                ln + 2,
                cells.len()
            )));
        }
        for c in &cells[..d] {
            data.push(
                c.parse::<f64>()
                    .map_err(|e| Error::invalid(format!("line {}: {e}", ln + 2)))?,
            );
        }
        labels.push(
            cells[d]
                .parse::<usize>()
                .map_err(|e| Error::invalid(format!("line {}: {e}", ln + 2)))?,
        );
    }
    if labels.is_empty() {
        return Err(Error::invalid("CSV has no rows"));
    }
    Ok(Samples {
        x: Tensor::new(vec![labels.len(), d], data)?,
        labels,
    })
}

pub fn save_samples_csv(path: &Path, samples: &Samples) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_samples_csv(f, samples)
}

pub fn load_samples_csv(path: &Path) -> Result<Samples> {
    read_samples_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// String-valued dataset parameters from a config section.
pub type DatasetParams = BTreeMap<String, String>;

fn param<T: std::str::FromStr>(params: &DatasetParams, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match params.get(key) {
        None => Ok(default),
        Some(v) => v
            .trim()
            .parse()
            .map_err(|e| Error::Config(format!("dataset.{key} = '{v}': {e}"))),
    }
}

fn float_list(params: &DatasetParams, key: &str) -> Result<Option<Vec<f64>>> {
    params
        .get(key)
        .map(|v| {
            v.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("dataset.{key} = '{v}': {e}")))
                })
                .collect()
        })
        .transpose()
}

/// Named constructor of a mixture from config parameters.
pub trait DatasetBuilder: Send + Sync {
    fn name(&self) -> &'static str;
    /// Parameter keys accepted by `build`.
    fn keys(&self) -> Vec<&'static str>;
    fn build(&self, params: &DatasetParams) -> Result<MixtureSpec>;
}

struct Ring;
struct Grid;
struct Skewed;
struct Factored;

impl DatasetBuilder for Ring {
    fn name(&self) -> &'static str {
        "ring"
    }

    fn keys(&self) -> Vec<&'static str> {
        vec!["k", "radius", "std"]
    }

    fn build(&self, p: &DatasetParams) -> Result<MixtureSpec> {
        make_ring(
            param(p, "k", 8)?,
            param(p, "radius", 2.0)?,
            param(p, "std", 0.05)?,
        )
    }
}

impl DatasetBuilder for Grid {
    fn name(&self) -> &'static str {
        "grid"
    }

    fn keys(&self) -> Vec<&'static str> {
        vec!["m", "spacing", "std"]
    }

    fn build(&self, p: &DatasetParams) -> Result<MixtureSpec> {
        make_grid(
            param(p, "m", 5)?,
            param(p, "spacing", 2.0)?,
            param(p, "std", 0.05)?,
        )
    }
}

impl DatasetBuilder for Skewed {
    fn name(&self) -> &'static str {
        "skewed"
    }

    fn keys(&self) -> Vec<&'static str> {
        let mut keys = vec!["base", "weights"];
        for b in [&Ring as &dyn DatasetBuilder, &Grid, &Factored] {
            keys.extend(
                b.keys()
                    .into_iter()
                    .filter(|k| !keys.contains(k))
                    .collect::<Vec<_>>(),
            );
        }
        keys
    }

    fn build(&self, p: &DatasetParams) -> Result<MixtureSpec> {
        let base_name: String = param(p, "base", "ring".to_string())?;
        if base_name == "skewed" {
            return Err(Error::Config("dataset.base cannot itself be skewed".into()));
        }
        let base = dataset_builder(&base_name)?.build(p)?;
        let weights = float_list(p, "weights")?
            .ok_or_else(|| Error::Config("skewed dataset needs dataset.weights".into()))?;
        make_skewed(&base, &weights)
    }
}

impl DatasetBuilder for Factored {
    fn name(&self) -> &'static str {
        "factored"
    }

    fn keys(&self) -> Vec<&'static str> {
        vec!["factors", "levels", "radius", "std"]
    }

    fn build(&self, p: &DatasetParams) -> Result<MixtureSpec> {
        make_factored(
            param(p, "factors", 3)?,
            param(p, "levels", 5)?,
            param(p, "radius", 2.0)?,
            param(p, "std", 0.05)?,
        )
    }
}

pub fn dataset_builders() -> Vec<Box<dyn DatasetBuilder>> {
    vec![
        Box::new(Ring),
        Box::new(Grid),
        Box::new(Skewed),
        Box::new(Factored),
    ]
}

pub fn dataset_builder(name: &str) -> Result<Box<dyn DatasetBuilder>> {
    let all = dataset_builders();
    let known = all.iter().map(|b| b.name()).collect::<Vec<_>>().join(", ");
    all.into_iter()
        .find(|b| b.name() == name)
        .ok_or(Error::UnknownName {
            kind: "dataset",
            name: name.to_string(),
            known,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn constructors() {
        let ring = make_ring(8, 2.0, 0.05).unwrap();
        assert_abs_diff_eq!(
            dist(&ring.means()[0], &ring.means()[1]),
            4.0 * (PI / 8.0).sin(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            dist(&ring.means()[0], &ring.means()[1]),
            1.5307,
            epsilon = 1e-4
        );
        assert_eq!(make_grid(5, 2.0, 0.05).unwrap().components(), 25);
        let f = make_factored(3, 5, 2.0, 0.05).unwrap();
        assert_eq!(f.components(), 125);
        assert_eq!(f.dim(), 6);
        assert!(make_skewed(&ring, &[0.5; 8]).is_err());
        assert!(make_skewed(&make_ring(2, 2.0, 0.05).unwrap(), &[0.9, 0.1]).is_ok());
    }

    #[test]
    fn binomial_label_count() {
        let spec = make_skewed(&make_ring(2, 2.0, 0.05).unwrap(), &[0.9, 0.1]).unwrap();
        let s = sample_mixture(&spec, 100_000, 3).unwrap();
        let c0 = s.labels.iter().filter(|&&l| l == 0).count() as f64;
        let sigma = (100_000.0f64 * 0.9 * 0.1).sqrt();
        assert!((c0 - 90_000.0).abs() < 3.0 * sigma, "{c0}");
    }

    #[test]
    fn tiny_std_sits_on_means() {
        let spec = make_ring(4, 2.0, 1e-300).unwrap();
        let s = sample_mixture(&spec, 50, 1).unwrap();
        for (row, &l) in s.x.iter_rows().zip(&s.labels) {
            assert!(dist(row, &spec.means()[l]) < 1e-250);
        }
    }

    #[test]
    fn component_means_clt() {
        let spec = make_grid(3, 2.0, 0.3).unwrap();
        let s = sample_mixture(&spec, 20_000, 9).unwrap();
        for k in 0..spec.components() {
            let rows: Vec<&[f64]> =
                s.x.iter_rows()
                    .zip(&s.labels)
                    .filter(|(_, &l)| l == k)
                    .map(|(r, _)| r)
                    .collect();
            let n = rows.len() as f64;
            for d in 0..2 {
                let m = rows.iter().map(|r| r[d]).sum::<f64>() / n;
                assert!((m - spec.means()[k][d]).abs() < 5.0 * 0.3 / n.sqrt());
            }
        }
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let spec = make_ring(8, 2.0, 0.05).unwrap();
        assert_eq!(
            sample_mixture(&spec, 100, 5).unwrap(),
            sample_mixture(&spec, 100, 5).unwrap()
        );
        assert_ne!(
            sample_mixture(&spec, 100, 5).unwrap(),
            sample_mixture(&spec, 100, 6).unwrap()
        );
    }

    #[test]
    fn supervised_subset_sizes() {
        let spec = make_ring(10, 4.0, 0.05).unwrap();
        let s = sample_mixture(&spec, 50_000, 2).unwrap();
        let sub = draw_supervised_subset(&s.labels, 0.01, 0).unwrap();
        assert_eq!(sub.indices.len(), 500);
        let mut seen = sub.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 10);
        assert!(draw_supervised_subset(&s.labels, 0.0, 0).is_err());
        assert!(draw_supervised_subset(&s.labels, 0.06, 0).is_err());
    }

    #[test]
    fn skewed_subset_has_minority() {
        let spec = make_skewed(&make_ring(2, 2.0, 0.05).unwrap(), &[0.9, 0.1]).unwrap();
        for seed in 0..20 {
            let s = sample_mixture(&spec, 8000, seed).unwrap();
            let sub = draw_supervised_subset(&s.labels, 0.01, seed).unwrap();
            assert!(sub.labels.contains(&0) && sub.labels.contains(&1));
        }
    }

    #[test]
    fn oracle_examples() {
        let spec = make_ring(4, 2.0, 0.05).unwrap();
        let at_means = Tensor::from_rows(spec.means()).unwrap();
        assert_eq!(
            oracle_mode_assign(&at_means, &spec).unwrap(),
            vec![0, 1, 2, 3]
        );
        let pair = MixtureSpec::new(
            vec![vec![1.0, 3.0], vec![-1.0, 3.0]],
            vec![0.5; 2],
            vec![0.5; 2],
        )
        .unwrap();
        let mid = Tensor::from_rows(&[[0.0, 3.0]]).unwrap();
        assert_eq!(oracle_mode_assign(&mid, &pair).unwrap(), vec![0]);
    }

    #[test]
    fn oracle_matches_brute_force_density() {
        let spec = make_grid(3, 1.0, 0.4).unwrap();
        let s = sample_mixture(&spec, 2000, 4).unwrap();
        let got = oracle_mode_assign(&s.x, &spec).unwrap();
        for (row, g) in s.x.iter_rows().zip(got) {
            let dens: Vec<f64> = (0..spec.components())
                .map(|k| {
                    let d2: f64 = row
                        .iter()
                        .zip(&spec.means()[k])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum();
                    (-d2 / (2.0 * 0.16)).exp()
                })
                .collect();
            let best = dens.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(dens.iter().position(|&d| d == best).unwrap(), g);
        }
    }

    #[test]
    fn well_separated_labels_match_oracle() {
        let spec = make_ring(8, 2.0, 0.05).unwrap();
        let s = sample_mixture(&spec, 20_000, 8).unwrap();
        let got = oracle_mode_assign(&s.x, &spec).unwrap();
        let agree = got.iter().zip(&s.labels).filter(|(a, b)| a == b).count();
        assert!(agree as f64 >= 0.999 * 20_000.0);
    }

    #[test]
    fn splits_are_balanced() {
        let spec = make_skewed(&make_ring(2, 2.0, 0.05).unwrap(), &[0.9, 0.1]).unwrap();
        let sp = make_splits(&spec, 10_000, 1).unwrap();
        assert_eq!(sp.train.len(), 8000);
        let ones = sp.test.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(ones * 2, sp.test.len());
    }

    #[test]
    fn csv_round_trip() {
        let spec = make_ring(3, 1.0, 0.1).unwrap();
        let s = sample_mixture(&spec, 20, 0).unwrap();
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &s).unwrap();
        assert!(buf.starts_with(b"x_0,x_1,label\n"));
        let back = read_samples_csv(buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert!(read_samples_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn registry_lookup() {
        let mut p = DatasetParams::new();
        p.insert("k".into(), "2".into());
        p.insert("weights".into(), "0.9, 0.1".into());
        let spec = dataset_builder("skewed").unwrap().build(&p).unwrap();
        assert_eq!(spec.weights(), &[0.9, 0.1]);
        let err = dataset_builder("spiral").err().unwrap();
        assert!(
            err.to_string().contains("ring, grid, skewed, factored"),
            "{err}"
        );
    }
}
