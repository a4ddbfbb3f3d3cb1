//! Adversarial, inversion, supervision and prior-alignment losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NormOrder, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smoothing floor applied to the reference distribution of every KL term.
pub const KL_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorRole {
    /// `softmax(alpha)`.
    LatentPrior,
    /// Inverter posterior averaged over generated data.
    AggregatePosterior,
    /// Posterior of the retrained inverter averaged over real data.
    RetrainedAggregate,
}

/// A distribution over modes tagged with what it estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorVector {
    probs: Vec<f64>,
    pub role: PriorRole,
}

impl PriorVector {
    pub fn new(probs: Vec<f64>, role: PriorRole) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid("a prior needs at least 2 entries"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid(format!(
                "prior has negative or non-finite entries: {probs:?}"
            )));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("prior sums to {s}, not 1")));
        }
        Ok(PriorVector { probs, role })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Entries floored at [`KL_FLOOR`] and renormalized.
    pub fn smoothed(&self) -> Vec<f64> {
        smooth(&self.probs)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

pub fn smooth(q: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = q.iter().map(|&v| v.max(KL_FLOOR)).collect();
    let s: f64 = floored.iter().sum();
    floored.into_iter().map(|v| v / s).collect()
}

/// `KL(p || q)` with `q` smoothed and `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            left: vec![p.len()],
            right: vec![q.len()],
        });
    }
    let q = smooth(q);
    Ok(p.iter()
        .zip(&q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum())
}

/// Column mean of posterior rows.
pub fn aggregate_posterior(rows: &Tensor) -> Result<PriorVector> {
    if rows.is_empty() || rows.shape().len() != 2 {
        return Err(Error::invalid(
            "aggregate posterior needs a non-empty [n, M] batch",
        ));
    }
    let (n, m) = (rows.rows(), rows.cols());
    let mut mean = vec![0.0; m];
    for r in rows.iter_rows() {
        mean.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    // Re-normalize away accumulated rounding before validation.
    let s: f64 = mean.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "posterior rows average to mass {s}"
        )));
    }
    PriorVector::new(mean, PriorRole::AggregatePosterior)
}

/// Records `KL(p || smooth(q))` for a `[1, M]` node `p` and constant `q`.
pub fn kl_to_constant(tape: &mut Tape, p: Var, q: &[f64]) -> Result<Var> {
    let pv = tape.value(p);
    if pv.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "kl_to_constant",
            left: pv.shape().to_vec(),
            right: vec![q.len()],
        });
    }
    let log_q: Vec<f64> = smooth(q).iter().map(|v| v.ln()).collect();
    let log_q = tape.constant(Tensor::new(pv.shape().to_vec(), log_q)?);
    let log_p = tape.ln(p)?;
    let diff = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, diff)?;
    tape.sum(terms)
}

/// `-mean ln σ(d_real) - mean ln(1 - σ(d_fake))`, minimized by d.
pub fn discriminator_loss(tape: &mut Tape, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let nr = tape.value(real_logits).len();
    let nf = tape.value(fake_logits).len();
    let real = tape.bce_with_logits(real_logits, &Tensor::ones(&[nr]))?;
    let fake = tape.bce_with_logits(fake_logits, &Tensor::zeros(&[nf]))?;
    tape.add(real, fake)
}

/// Generator adversarial term: `-mean ln σ(d_fake)` (non-saturating) or
/// `mean ln(1 - σ(d_fake))` (saturating).
pub fn generator_adversarial_loss(
    tape: &mut Tape,
    fake_logits: Var,
    saturating: bool,
) -> Result<Var> {
    let n = tape.value(fake_logits).len();
    if saturating {
        let bce = tape.bce_with_logits(fake_logits, &Tensor::zeros(&[n]))?;
        tape.scale(bce, -1.0)
    } else {
        tape.bce_with_logits(fake_logits, &Tensor::ones(&[n]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Norm order of the latent reconstruction term (1 or 2).
    pub p: u32,
    pub lambda_recon: f64,
    pub lambda_kl: f64,
    /// Weight of the per-sample mode cross-entropy `CE(y, h2(h1(g(z))))`.
    pub lambda_mode: f64,
    pub saturating: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            p: 2,
            lambda_recon: 0.1,
            lambda_kl: 1.0,
            lambda_mode: 1.0,
            saturating: false,
        }
    }
}

/// Scalar values of every loss term for one logging point.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub d_loss: f64,
    pub g_adv: f64,
    pub recon: f64,
    pub kl_latent: f64,
    pub mode_ce: f64,
    pub cc: Option<f64>,
    pub prior_align: Option<f64>,
    pub p: u32,
}

impl LossBreakdown {
    pub fn check_finite(&self, step: u64) -> Result<()> {
        let terms = [
            ("d_loss", self.d_loss),
            ("g_adv", self.g_adv),
            ("recon", self.recon),
            ("kl_latent", self.kl_latent),
            ("mode_ce", self.mode_ce),
            ("cc", self.cc.unwrap_or(0.0)),
            ("prior_align", self.prior_align.unwrap_or(0.0)),
        ];
        for (term, v) in terms {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term, step });
            }
        }
        Ok(())
    }
}

/// Graph nodes feeding [`generator_inverter_loss`].
#[derive(Clone, Copy, Debug)]
pub struct GeneratorInverterInputs<'a> {
    /// `[n, dim]` latent codes.
    pub z: Var,
    /// `[n, dim]` reconstruction `h1(g(z))`.
    pub zhat: Var,
    /// `[n, 1]` discriminator logits on `g(z)`.
    pub fake_logits: Var,
    /// `[n, M]` logits `h2(zhat)`.
    pub yhat_logits: Var,
    /// Latent mode of each sample.
    pub modes: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorInverterLoss {
    pub total: Var,
    pub g_adv: Var,
    pub recon: Var,
    pub kl_latent: Var,
    pub mode_ce: Var,
}

/// `g_adv + λ_recon·mean ||z - zhat||_p + λ_kl·KL(P_Ŷ || P_Y) + λ_mode·CE`.
///
/// `latent_prior` enters as a constant, so no gradient reaches `alpha`.
pub fn generator_inverter_loss(
    tape: &mut Tape,
    inputs: GeneratorInverterInputs<'_>,
    latent_prior: &[f64],
    weights: &LossWeights,
) -> Result<GeneratorInverterLoss> {
    let order = NormOrder::from_p(weights.p)?;
    let g_adv = generator_adversarial_loss(tape, inputs.fake_logits, weights.saturating)?;

    let residual = tape.sub(inputs.z, inputs.zhat)?;
    let norms = tape.row_norm(residual, order)?;
    let recon = tape.mean(norms)?;

    let posterior = tape.softmax(inputs.yhat_logits)?;
    let aggregate = tape.mean_rows(posterior)?;
    let kl_latent = kl_to_constant(tape, aggregate, latent_prior)?;

    let mode_ce = tape.ce_with_logits(inputs.yhat_logits, inputs.modes)?;

    let mut total = g_adv;
    for (term, w) in [
        (recon, weights.lambda_recon),
        (kl_latent, weights.lambda_kl),
        (mode_ce, weights.lambda_mode),
    ] {
        if w != 0.0 {
            let scaled = tape.scale(term, w)?;
            total = tape.add(total, scaled)?;
        }
    }
    Ok(GeneratorInverterLoss {
        total,
        g_adv,
        recon,
        kl_latent,
        mode_ce,
    })
}

/// Mean categorical cross-entropy of the inverter on labeled real samples.
pub fn supervised_cc_loss(tape: &mut Tape, yhat_logits: Var, labels: &[usize]) -> Result<Var> {
    tape.ce_with_logits(yhat_logits, labels)
}

/// `KL(P_Ŷ(alpha) || target)` where `current_aggregate` records the
/// aggregate posterior of generated data as a function of the `alpha` node
/// with every network frozen. `target` must not require gradients.
pub fn prior_alignment_loss<F>(
    tape: &mut Tape,
    alpha: Var,
    target: Var,
    current_aggregate: F,
) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    if tape.requires_grad(target) {
        return Err(Error::TargetNotDetached);
    }
    let target = tape.value(target).data().to_vec();
    let aggregate = current_aggregate(tape, alpha)?;
    kl_to_constant(tape, aggregate, &target)
}
