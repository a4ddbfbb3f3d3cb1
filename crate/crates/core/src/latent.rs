//! Learnable multimodal latent distribution.
//!
//! A uniform draw `nu1` is pushed through the cumulative softmax of the
//! logits `alpha` to pick a mode, the mode is embedded as a center in latent
//! space and compact-support jitter `nu2` is added:
//!
//! ```text
//! a_i = sum_{j <= i} softmax(alpha)_j
//! f_0 = hs(a_0 - nu1),  f_i = hs(a_i - nu1) - hs(a_{i-1} - nu1)
//! z   = sum_i f_i * c_i + nu2
//! ```
//!
//! With the exact unit step `hs`, `argmax f` is multinoulli with
//! probabilities `softmax(alpha)`. The hard sigmoid
//! `hs(t) = clamp(slope * t + 0.5, 0, 1)` keeps a gradient path to `alpha`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{hard_sigmoid, softmax_in_place, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SLOPE: f64 = 10.0;

/// Logits parameterizing the latent mode priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaVector {
    logits: Vec<f64>,
    pub trainable: bool,
}

impl AlphaVector {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::invalid(format!(
                "alpha needs at least 2 modes, got {}",
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("alpha contains non-finite logits"));
        }
        Ok(AlphaVector {
            logits,
            trainable: true,
        })
    }

    pub fn uniform(modes: usize) -> Result<Self> {
        AlphaVector::new(vec![0.0; modes])
    }

    /// Logits `ln p_i` for a strictly positive simplex.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::invalid("prior probabilities must be positive"));
        }
        AlphaVector::new(probs.iter().map(|p| p.ln()).collect())
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn modes(&self) -> usize {
        self.logits.len()
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::row_vector(&self.logits).expect("non-empty logits")
    }

    pub fn set_logits(&mut self, logits: &[f64]) -> Result<()> {
        let next = AlphaVector::new(logits.to_vec())?;
        if next.modes() != self.modes() {
            return Err(Error::invalid("alpha length cannot change"));
        }
        self.logits = next.logits;
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        self.as_tensor().checksum()
    }
}

/// `softmax(alpha)`.
pub fn prior_probs(alpha: &AlphaVector) -> Vec<f64> {
    let mut p = alpha.logits.clone();
    softmax_in_place(&mut p);
    p
}

/// Cumulative softmax of `alpha`: strictly increasing, ending at 1.
pub fn breakpoints(alpha: &AlphaVector) -> Vec<f64> {
    let mut acc = 0.0;
    prior_probs(alpha)
        .into_iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

fn check_slope(slope: f64) -> Result<()> {
    if slope.is_nan() || slope <= 0.0 {
        return Err(Error::invalid(format!("slope must be > 0, got {slope}")));
    }
    Ok(())
}

fn check_nu1(nu1: f64) -> Result<()> {
    if !(nu1 > 0.0 && nu1 < 1.0) {
        return Err(Error::invalid(format!("nu1 must lie in (0, 1), got {nu1}")));
    }
    Ok(())
}

fn indicator_from_breakpoints(a: &[f64], nu1: f64, slope: f64) -> Vec<f64> {
    let mut prev = 0.0;
    a.iter()
        .map(|&ai| {
            let h = hard_sigmoid(ai - nu1, slope);
            let f = h - prev;
            prev = h;
            f
        })
        .collect()
}

/// Soft indicator row `f` for one draw. `slope = f64::INFINITY` selects the
/// exact unit step.
pub fn soft_indicator(alpha: &AlphaVector, nu1: f64, slope: f64) -> Result<Vec<f64>> {
    check_slope(slope)?;
    check_nu1(nu1)?;
    Ok(indicator_from_breakpoints(&breakpoints(alpha), nu1, slope))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mode index `argmax f`.
pub fn sample_mode(alpha: &AlphaVector, nu1: f64, slope: f64) -> Result<usize> {
    Ok(argmax(&soft_indicator(alpha, nu1, slope)?))
}

/// Placement of the discrete modes in latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeLayout {
    centers: Vec<Vec<f64>>,
    epsilon: f64,
}

impl ModeLayout {
    /// Validates that the jitter boxes around distinct centers are disjoint.
    pub fn new(centers: Vec<Vec<f64>>, epsilon: f64) -> Result<Self> {
        if centers.len() < 2 {
            return Err(Error::invalid("layout needs at least 2 modes"));
        }
        let dim = centers[0].len();
        if dim == 0 || centers.iter().any(|c| c.len() != dim) {
            return Err(Error::invalid(
                "all centers must share a positive dimension",
            ));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid(format!(
                "epsilon must be >= 0, got {epsilon}"
            )));
        }
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                let d = centers[i]
                    .iter()
                    .zip(&centers[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if !(d > 2.0 * epsilon) {
                    return Err(Error::invalid(format!(
                        "modes {i} and {j} overlap: inf-distance {d} <= 2*epsilon = {}",
                        2.0 * epsilon
                    )));
                }
            }
        }
        Ok(ModeLayout { centers, epsilon })
    }

    /// Centers `scale * e_i` in `R^modes`.
    pub fn one_hot(modes: usize, scale: f64, epsilon: f64) -> Result<Self> {
        let centers = (0..modes)
            .map(|i| {
                let mut c = vec![0.0; modes];
                c[i] = scale;
                c
            })
            .collect();
        ModeLayout::new(centers, epsilon)
    }

    pub fn modes(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Centers as a `[modes, dim]` matrix.
    pub fn centers_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.centers).expect("validated layout")
    }

    /// Index of the mode whose jitter box contains `z`, if any.
    pub fn containing_mode(&self, z: &[f64]) -> Option<usize> {
        self.centers.iter().position(|c| {
            c.iter()
                .zip(z)
                .all(|(a, b)| (a - b).abs() <= self.epsilon + 1e-12)
        })
    }
}

/// Parameter-free noise behind a latent batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise {
    pub nu1: Vec<f64>,
    pub nu2: Tensor,
}

fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

fn jitter<R: Rng>(rng: &mut R, n: usize, layout: &ModeLayout) -> Tensor {
    let eps = layout.epsilon();
    let data = (0..n * layout.dim())
        .map(|_| eps * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    Tensor::new(vec![n, layout.dim()], data).expect("n > 0")
}

impl LatentNoise {
    /// i.i.d. `nu1 ~ U(0,1)` and `nu2 ~ U(-eps, eps)^dim`.
    pub fn draw<R: Rng>(rng: &mut R, n: usize, layout: &ModeLayout) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("latent batch size must be positive"));
        }
        let nu1 = (0..n).map(|_| open_unit(rng)).collect();
        Ok(LatentNoise {
            nu1,
            nu2: jitter(rng, n, layout),
        })
    }

    /// Jittered-stratified `nu1`: one uniform draw in each of `n` equal
    /// cells of `(0, 1)`. Marginally uniform, with `O(1/n)` error on mode
    /// masses.
    pub fn stratified<R: Rng>(rng: &mut R, n: usize, layout: &ModeLayout) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("latent batch size must be positive"));
        }
        let nu1 = (0..n)
            .map(|k| (k as f64 + open_unit(rng)) / n as f64)
            .map(|u| u.min(1.0 - f64::EPSILON))
            .collect();
        Ok(LatentNoise {
            nu1,
            nu2: jitter(rng, n, layout),
        })
    }

    pub fn len(&self) -> usize {
        self.nu1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu1.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(LatentNoise {
            nu1: idx.iter().map(|&i| self.nu1[i]).collect(),
            nu2: self.nu2.select_rows(idx)?,
        })
    }
}

/// A sampled latent batch with its intermediate quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub nu1: Vec<f64>,
    /// `[n, modes]` soft indicator rows.
    pub f: Tensor,
    pub y: Vec<usize>,
    pub nu2: Tensor,
    /// `[n, dim]`.
    pub z: Tensor,
}

/// Builds `f`, `y` and the mixed embedding `z = f · C + nu2` from noise.
pub fn latent_from_noise(
    alpha: &AlphaVector,
    layout: &ModeLayout,
    noise: &LatentNoise,
    slope: f64,
) -> Result<LatentBatch> {
    check_slope(slope)?;
    if alpha.modes() != layout.modes() {
        return Err(Error::invalid(format!(
            "alpha has {} modes but layout has {}",
            alpha.modes(),
            layout.modes()
        )));
    }
    let a = breakpoints(alpha);
    let (m, dim) = (layout.modes(), layout.dim());
    let n = noise.len();
    let mut f = Vec::with_capacity(n * m);
    let mut y = Vec::with_capacity(n);
    let mut z = noise.nu2.data().to_vec();
    for (k, &u) in noise.nu1.iter().enumerate() {
        check_nu1(u)?;
        let row = indicator_from_breakpoints(&a, u, slope);
        y.push(argmax(&row));
        let zr = &mut z[k * dim..(k + 1) * dim];
        for (fi, c) in row.iter().zip(layout.centers()) {
            if *fi != 0.0 {
                zr.iter_mut().zip(c).for_each(|(zv, cv)| *zv += fi * cv);
            }
        }
        f.extend(row);
    }
    Ok(LatentBatch {
        nu1: noise.nu1.clone(),
        f: Tensor::new(vec![n, m], f)?,
        y,
        nu2: noise.nu2.clone(),
        z: Tensor::new(vec![n, dim], z)?,
    })
}

/// Draws a reproducible latent batch of size `n`.
pub fn sample_latent(
    alpha: &AlphaVector,
    layout: &ModeLayout,
    n: usize,
    slope: f64,
    seed: u64,
) -> Result<LatentBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = LatentNoise::draw(&mut rng, n, layout)?;
    latent_from_noise(alpha, layout, &noise, slope)
}

/// Hard embedding `z = c_y + nu2`, used at evaluation and sampling time.
pub fn embed_hard(layout: &ModeLayout, y: &[usize], nu2: &Tensor) -> Result<Tensor> {
    if nu2.rows() != y.len() || nu2.cols() != layout.dim() {
        return Err(Error::ShapeMismatch {
            op: "embed_hard",
            left: vec![y.len(), layout.dim()],
            right: nu2.shape().to_vec(),
        });
    }
    let dim = layout.dim();
    let mut z = nu2.data().to_vec();
    for (k, &yk) in y.iter().enumerate() {
        let c = layout
            .centers()
            .get(yk)
            .ok_or_else(|| Error::invalid(format!("mode {yk} out of range")))?;
        z[k * dim..(k + 1) * dim]
            .iter_mut()
            .zip(c)
            .for_each(|(a, b)| *a += b);
    }
    Tensor::new(vec![y.len(), dim], z)
}

/// Recorded soft-indicator and latent nodes.
#[derive(Clone, Copy, Debug)]
pub struct LatentGraph {
    pub f: Var,
    pub z: Var,
}

/// Records `f(alpha, nu1)` for a batch on the tape; `alpha` is a `[1, M]` node.
pub fn soft_indicator_graph(tape: &mut Tape, alpha: Var, nu1: &[f64], slope: f64) -> Result<Var> {
    check_slope(slope)?;
    let m = tape.value(alpha).cols();
    let n = nu1.len();
    if n == 0 {
        return Err(Error::invalid("empty nu1 batch"));
    }
    // Cumulative sum as a product with an upper-triangular ones matrix.
    let mut upper = Tensor::zeros(&[m, m]);
    for j in 0..m {
        for i in j..m {
            upper.data_mut()[j * m + i] = 1.0;
        }
    }
    // First differences along the mode axis.
    let mut diff = Tensor::eye(m);
    for i in 1..m {
        diff.data_mut()[(i - 1) * m + i] = -1.0;
    }
    let mut thresholds = Vec::with_capacity(n * m);
    for &u in nu1 {
        check_nu1(u)?;
        thresholds.extend(std::iter::repeat_n(u, m));
    }

    let probs = tape.softmax(alpha)?;
    let upper = tape.constant(upper);
    let a = tape.matmul(probs, upper)?;
    let ones = tape.constant(Tensor::ones(&[n, 1]));
    let a_rep = tape.matmul(ones, a)?;
    let thresholds = tape.constant(Tensor::new(vec![n, m], thresholds)?);
    let shifted = tape.sub(a_rep, thresholds)?;
    let h = tape.hard_sigmoid(shifted, slope)?;
    let diff = tape.constant(diff);
    tape.matmul(h, diff)
}

/// Records `f` and `z = f · C + nu2` on the tape.
pub fn latent_graph(
    tape: &mut Tape,
    alpha: Var,
    layout: &ModeLayout,
    noise: &LatentNoise,
    slope: f64,
) -> Result<LatentGraph> {
    if tape.value(alpha).cols() != layout.modes() {
        return Err(Error::invalid("alpha and layout disagree on mode count"));
    }
    let f = soft_indicator_graph(tape, alpha, &noise.nu1, slope)?;
    let centers = tape.constant(layout.centers_tensor());
    let mixed = tape.matmul(f, centers)?;
    let nu2 = tape.constant(noise.nu2.clone());
    let z = tape.add(mixed, nu2)?;
    Ok(LatentGraph { f, z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn alpha(v: &[f64]) -> AlphaVector {
        AlphaVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn breakpoint_examples() {
        let a = breakpoints(&alpha(&[0.0, 0.0, 0.0]));
        for (x, want) in a.iter().zip([1.0 / 3.0, 2.0 / 3.0, 1.0]) {
            assert_abs_diff_eq!(*x, want, epsilon = 1e-15);
        }
        let a = breakpoints(&alpha(&[2f64.ln(), 0.0]));
        assert_abs_diff_eq!(a[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn prior_probs_examples() {
        assert_eq!(prior_probs(&alpha(&[0.0, 0.0])), vec![0.5, 0.5]);
        let p = prior_probs(&alpha(&[3f64.ln(), 0.0]));
        assert_abs_diff_eq!(p[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.25, epsilon = 1e-15);
        let shifted = prior_probs(&alpha(&[3f64.ln() + 7.5, 7.5]));
        for (x, y) in p.iter().zip(&shifted) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn exact_step_indicator() {
        let a = alpha(&[0.0, 0.0]);
        assert_eq!(
            soft_indicator(&a, 0.25, f64::INFINITY).unwrap(),
            vec![1.0, 0.0]
        );
        assert_eq!(
            soft_indicator(&a, 0.75, f64::INFINITY).unwrap(),
            vec![0.0, 1.0]
        );
        assert_eq!(sample_mode(&a, 0.25, DEFAULT_SLOPE).unwrap(), 0);
    }

    #[test]
    fn midpoint_tie_goes_low() {
        let a = alpha(&[0.0, 0.0]);
        let f = soft_indicator(&a, 0.5, 10.0).unwrap();
        assert_eq!(f, vec![0.5, 0.5]);
        assert_eq!(sample_mode(&a, 0.5, 10.0).unwrap(), 0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = alpha(&[0.0, 0.0]);
        assert!(soft_indicator(&a, 0.5, 0.0).is_err());
        assert!(soft_indicator(&a, 0.5, -1.0).is_err());
        assert!(soft_indicator(&a, 0.0, 10.0).is_err());
        assert!(soft_indicator(&a, 1.0, 10.0).is_err());
        assert!(AlphaVector::new(vec![1.0]).is_err());
        assert!(AlphaVector::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn overlapping_layout_rejected() {
        assert!(ModeLayout::new(vec![vec![0.0, 0.0], vec![0.5, 0.0]], 0.3).is_err());
        assert!(ModeLayout::new(vec![vec![0.0, 0.0], vec![0.7, 0.0]], 0.3).is_ok());
        assert!(ModeLayout::one_hot(4, 2.0, 0.3).is_ok());
        assert!(ModeLayout::one_hot(4, 2.0, 1.0).is_err());
    }

    #[test]
    fn zero_jitter_lands_on_centers() {
        let layout = ModeLayout::one_hot(3, 2.0, 0.0).unwrap();
        let b = sample_latent(
            &AlphaVector::uniform(3).unwrap(),
            &layout,
            200,
            f64::INFINITY,
            3,
        )
        .unwrap();
        for (k, row) in b.z.iter_rows().enumerate() {
            assert_eq!(row, layout.centers()[b.y[k]].as_slice());
        }
    }

    #[test]
    fn exact_step_samples_lie_in_exactly_one_box() {
        let layout = ModeLayout::one_hot(5, 2.0, 0.3).unwrap();
        let a = alpha(&[0.3, -1.0, 2.0, 0.0, 0.5]);
        let b = sample_latent(&a, &layout, 2000, f64::INFINITY, 11).unwrap();
        for (k, row) in b.z.iter_rows().enumerate() {
            let hits: Vec<_> = (0..5)
                .filter(|&i| {
                    layout.centers()[i]
                        .iter()
                        .zip(row)
                        .all(|(c, z)| (c - z).abs() <= 0.3)
                })
                .collect();
            assert_eq!(hits, vec![b.y[k]]);
        }
    }

    #[test]
    fn uniform_mode_counts_within_three_sigma() {
        let layout = ModeLayout::one_hot(8, 2.0, 0.3).unwrap();
        let n = 80_000;
        let b = sample_latent(&AlphaVector::uniform(8).unwrap(), &layout, n, 10.0, 2024).unwrap();
        let mut counts = [0usize; 8];
        b.y.iter().for_each(|&y| counts[y] += 1);
        let sigma = (n as f64 * 0.125 * 0.875).sqrt();
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn batch_invariants_hold() {
        let layout = ModeLayout::one_hot(4, 2.0, 0.3).unwrap();
        let a = alpha(&[0.1, 0.9, -0.4, 0.0]);
        let slope = 10.0;
        let b = sample_latent(&a, &layout, 500, slope, 5).unwrap();
        let c = layout.centers_tensor();
        for k in 0..500 {
            let f = b.f.row(k);
            let hs_last = hard_sigmoid(1.0 - b.nu1[k], slope);
            assert_abs_diff_eq!(f.iter().sum::<f64>(), hs_last, epsilon = 1e-12);
            if b.nu1[k] <= 1.0 - 0.5 / slope {
                assert_abs_diff_eq!(f.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            }
            assert_eq!(b.y[k], argmax(f));
            for d in 0..4 {
                assert!(b.nu2.get(k, d).abs() <= 0.3);
                let want: f64 = (0..4).map(|i| f[i] * c.get(i, d)).sum::<f64>() + b.nu2.get(k, d);
                assert_abs_diff_eq!(b.z.get(k, d), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn graph_matches_plain_path() {
        let layout = ModeLayout::one_hot(3, 2.0, 0.3).unwrap();
        let a = alpha(&[0.5, -0.2, 0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = LatentNoise::draw(&mut rng, 64, &layout).unwrap();
        let plain = latent_from_noise(&a, &layout, &noise, 10.0).unwrap();
        let mut tape = Tape::new();
        let av = tape.constant(a.as_tensor());
        let g = latent_graph(&mut tape, av, &layout, &noise, 10.0).unwrap();
        for (x, y) in tape.value(g.f).data().iter().zip(plain.f.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        for (x, y) in tape.value(g.z).data().iter().zip(plain.z.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn stratified_noise_is_one_per_cell() {
        let layout = ModeLayout::one_hot(2, 2.0, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = LatentNoise::stratified(&mut rng, 100, &layout).unwrap();
        for (k, &u) in noise.nu1.iter().enumerate() {
            assert!(u > k as f64 / 100.0 && u < (k + 1) as f64 / 100.0);
        }
    }
}
