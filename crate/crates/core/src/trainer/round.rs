//! Prior-learning rounds: retrain the posterior model on labeled data,
//! freeze its aggregate posterior on real data as a target, then fit `alpha`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamParams, AdamState};
use crate::autodiff::{Tape, Var};
use crate::data::Samples;
use crate::error::{Error, Result};
use crate::latent::{
    argmax, embed_hard, latent_from_noise, latent_graph, AlphaVector, LatentGraph, LatentNoise,
    ModeLayout,
};
use crate::networks::NetworkSet;
use crate::objectives::{
    aggregate_posterior, prior_alignment_loss, supervised_cc_loss, PriorRole, PriorVector,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    /// Full-batch inverter updates on the labeled subset.
    pub retrain_epochs: usize,
    pub retrain_lr: f64,
    /// Update only h2 during retraining.
    pub retrain_h2_only: bool,
    pub alpha_steps: usize,
    pub alpha_lr: f64,
    /// Latent draws per alpha step, shared by every step of a round.
    pub alpha_batch: usize,
    /// Stop the alpha fit once the alignment KL drops below this.
    pub alpha_tolerance: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub slope: f64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            retrain_epochs: 100,
            retrain_lr: 1e-3,
            retrain_h2_only: false,
            alpha_steps: 300,
            alpha_lr: 0.05,
            alpha_batch: 10_000,
            alpha_tolerance: 1e-7,
            beta1: 0.5,
            beta2: 0.9,
            slope: crate::latent::DEFAULT_SLOPE,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.retrain_lr <= 0.0
            || self.alpha_lr <= 0.0
            || self.alpha_batch == 0
            || self.alpha_steps == 0
        {
            return Err(Error::Config(
                "prior-learning schedule values must be positive".into(),
            ));
        }
        if !(self.slope > 0.0) {
            return Err(Error::Config("slope must be positive".into()));
        }
        Ok(())
    }
}

/// What one round did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    /// Supervised loss after each retraining epoch.
    pub cc: Vec<f64>,
    pub target: Option<PriorVector>,
    /// Alignment KL before each alpha step, plus the final value.
    pub kl: Vec<f64>,
    pub prior_before: Vec<f64>,
    pub prior_after: Vec<f64>,
}

impl RoundDiagnostics {
    pub fn final_cc(&self) -> Option<f64> {
        self.cc.last().copied()
    }

    pub fn final_kl(&self) -> Option<f64> {
        self.kl.last().copied()
    }
}

/// Maps data and latents to mode posteriors for a round.
pub trait ModePipeline {
    fn modes(&self) -> usize;

    /// Fits the posterior model to labeled samples; returns the loss per epoch.
    fn retrain(&mut self, labeled: &Samples, cfg: &RoundConfig) -> Result<Vec<f64>>;

    /// Posterior rows for real data.
    fn posterior(&self, x: &Tensor) -> Result<Tensor>;

    /// Posterior rows for generated samples of latent codes `z` with
    /// indicator rows `f`, without gradient tracking.
    fn generated_posterior(&self, z: &Tensor, f: &Tensor) -> Result<Tensor>;

    /// Records the same map on a tape with every parameter frozen.
    fn generated_posterior_graph(&self, tape: &mut Tape, latent: LatentGraph) -> Result<Var>;

    /// Fingerprint of every parameter the alpha fit must leave untouched.
    fn checksum(&self) -> u64;
}

/// Trivial pipeline where data rows are already mode distributions and a
/// generated sample's posterior is its normalized indicator row.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityPipeline {
    pub modes: usize,
}

impl ModePipeline for IdentityPipeline {
    fn modes(&self) -> usize {
        self.modes
    }

    fn retrain(&mut self, _labeled: &Samples, _cfg: &RoundConfig) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }

    fn posterior(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn generated_posterior(&self, _z: &Tensor, f: &Tensor) -> Result<Tensor> {
        let m = f.cols();
        let mut data = f.data().to_vec();
        for row in data.chunks_mut(m) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new(f.shape().to_vec(), data)
    }

    fn generated_posterior_graph(&self, tape: &mut Tape, latent: LatentGraph) -> Result<Var> {
        tape.normalize_rows(latent.f)
    }

    fn checksum(&self) -> u64 {
        self.modes as u64
    }
}

/// `softmax(h2(h1(g(z))))` over the trained networks.
pub struct InverterPipeline<'a> {
    pub nets: &'a mut NetworkSet,
}

impl ModePipeline for InverterPipeline<'_> {
    fn modes(&self) -> usize {
        self.nets.modes()
    }

    fn retrain(&mut self, labeled: &Samples, cfg: &RoundConfig) -> Result<Vec<f64>> {
        let hp = AdamParams::new(cfg.retrain_lr, cfg.beta1, cfg.beta2);
        let mut s1 = AdamState::new(self.nets.h1.params());
        let mut s2 = AdamState::new(self.nets.h2.params());
        let mut history = Vec::with_capacity(cfg.retrain_epochs);
        for _ in 0..cfg.retrain_epochs {
            let mut tape = Tape::new();
            let (loss, g1, g2) = {
                let h1 = self.nets.h1.bind(&mut tape, !cfg.retrain_h2_only);
                let h2 = self.nets.h2.bind(&mut tape, true);
                let x = tape.constant(labeled.x.clone());
                let zhat = h1.forward(&mut tape, x)?;
                let logits = h2.forward(&mut tape, zhat)?;
                let loss = supervised_cc_loss(&mut tape, logits, &labeled.labels)?;
                let mut grads = tape.backward(loss)?;
                let g1: Vec<Tensor> = h1
                    .vars()
                    .iter()
                    .zip(self.nets.h1.params())
                    .map(|(&v, p)| grads.take_or_zeros(v, p))
                    .collect();
                let g2: Vec<Tensor> = h2
                    .vars()
                    .iter()
                    .zip(self.nets.h2.params())
                    .map(|(&v, p)| grads.take_or_zeros(v, p))
                    .collect();
                (tape.value(loss).item(), g1, g2)
            };
            if !cfg.retrain_h2_only {
                adam_step(self.nets.h1.params_mut(), &g1, &mut s1, &hp)?;
            }
            adam_step(self.nets.h2.params_mut(), &g2, &mut s2, &hp)?;
            history.push(loss);
        }
        Ok(history)
    }

    fn posterior(&self, x: &Tensor) -> Result<Tensor> {
        self.nets.posterior(x)
    }

    fn generated_posterior(&self, z: &Tensor, _f: &Tensor) -> Result<Tensor> {
        self.nets.posterior(&self.nets.generate(z)?)
    }

    fn generated_posterior_graph(&self, tape: &mut Tape, latent: LatentGraph) -> Result<Var> {
        let g = self.nets.g.bind(tape, false);
        let h1 = self.nets.h1.bind(tape, false);
        let h2 = self.nets.h2.bind(tape, false);
        let x = g.forward(tape, latent.z)?;
        let zhat = h1.forward(tape, x)?;
        let logits = h2.forward(tape, zhat)?;
        tape.softmax(logits)
    }

    fn checksum(&self) -> u64 {
        self.nets.checksum()
    }
}

/// Evaluates `KL(P_Ŷ(alpha) || target)` and its gradient on fixed noise.
///
/// Rows whose indicator is exactly one-hot do not depend on `alpha` except
/// through their mode, so their posteriors are cached per (row, mode) and
/// only rows inside a hard-sigmoid window go on the tape.
pub struct AlignmentObjective<'p, P: ModePipeline + ?Sized> {
    pipeline: &'p P,
    layout: &'p ModeLayout,
    noise: LatentNoise,
    target: Vec<f64>,
    slope: f64,
    cache: Vec<Option<Vec<f64>>>,
    use_cache: bool,
}

impl<'p, P: ModePipeline + ?Sized> AlignmentObjective<'p, P> {
    pub fn new(
        pipeline: &'p P,
        layout: &'p ModeLayout,
        noise: LatentNoise,
        target: &[f64],
        slope: f64,
    ) -> Result<Self> {
        if target.len() != layout.modes() || pipeline.modes() != layout.modes() {
            return Err(Error::invalid(
                "target, pipeline and layout disagree on mode count",
            ));
        }
        let n = noise.len();
        Ok(AlignmentObjective {
            pipeline,
            layout,
            noise,
            target: target.to_vec(),
            slope,
            cache: vec![None; n * layout.modes()],
            use_cache: true,
        })
    }

    /// Puts every row on the tape; used to check the cached path.
    pub fn without_cache(mut self) -> Self {
        self.use_cache = false;
        self
    }

    /// Returns the KL value and its gradient with respect to the logits.
    pub fn value_and_grad(&mut self, alpha: &AlphaVector) -> Result<(f64, Vec<f64>)> {
        let m = self.layout.modes();
        let n = self.noise.len();
        let batch = latent_from_noise(alpha, self.layout, &self.noise, self.slope)?;
        let mut active = Vec::new();
        let mut saturated = Vec::new();
        for (k, row) in batch.f.iter_rows().enumerate() {
            let one_hot =
                row.iter().all(|&v| v == 0.0 || v == 1.0) && row.iter().sum::<f64>() == 1.0;
            if one_hot && self.use_cache {
                saturated.push((k, argmax(row)));
            } else {
                active.push(k);
            }
        }
        self.fill_cache(&saturated)?;
        let mut fixed = vec![0.0; m];
        for &(k, y) in &saturated {
            let row = self.cache[k * m + y].as_ref().expect("filled");
            fixed.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        fixed.iter_mut().for_each(|v| *v /= n as f64);

        let mut tape = Tape::new();
        let alpha_var = tape.param(alpha.as_tensor());
        let target = tape.constant(Tensor::row_vector(&self.target)?);
        let noise = &self.noise;
        let (layout, slope, pipeline) = (self.layout, self.slope, self.pipeline);
        let loss = prior_alignment_loss(&mut tape, alpha_var, target, |tape, a| {
            let fixed = tape.constant(Tensor::row_vector(&fixed)?);
            if active.is_empty() {
                return Ok(fixed);
            }
            let sub = noise.select(&active)?;
            let graph = latent_graph(tape, a, layout, &sub, slope)?;
            let post = pipeline.generated_posterior_graph(tape, graph)?;
            let mean = tape.mean_rows(post)?;
            let part = tape.scale(mean, active.len() as f64 / n as f64)?;
            tape.add(part, fixed)
        })?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let grad = grads
            .take_or_zeros(alpha_var, &alpha.as_tensor())
            .into_data();
        Ok((value, grad))
    }

    fn fill_cache(&mut self, saturated: &[(usize, usize)]) -> Result<()> {
        let m = self.layout.modes();
        let missing: Vec<(usize, usize)> = saturated
            .iter()
            .copied()
            .filter(|&(k, y)| self.cache[k * m + y].is_none())
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        let rows: Vec<usize> = missing.iter().map(|&(k, _)| k).collect();
        let modes: Vec<usize> = missing.iter().map(|&(_, y)| y).collect();
        let nu2 = self.noise.nu2.select_rows(&rows)?;
        let z = embed_hard(self.layout, &modes, &nu2)?;
        let mut f = Tensor::zeros(&[missing.len(), m]);
        for (i, &y) in modes.iter().enumerate() {
            f.data_mut()[i * m + y] = 1.0;
        }
        let post = self.pipeline.generated_posterior(&z, &f)?;
        for (i, &(k, y)) in missing.iter().enumerate() {
            self.cache[k * m + y] = Some(post.row(i).to_vec());
        }
        Ok(())
    }
}

/// Fits `alpha` to `target` with all pipeline parameters frozen.
/// Returns the KL before each step followed by the final KL.
pub fn fit_alpha<P: ModePipeline + ?Sized>(
    pipeline: &P,
    alpha: &mut AlphaVector,
    layout: &ModeLayout,
    target: &[f64],
    cfg: &RoundConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let before = pipeline.checksum();
    let noise = LatentNoise::stratified(rng, cfg.alpha_batch, layout)?;
    let mut objective = AlignmentObjective::new(pipeline, layout, noise, target, cfg.slope)?;
    let hp = AdamParams::new(cfg.alpha_lr, cfg.beta1, cfg.beta2);
    let mut logits = vec![alpha.as_tensor()];
    let mut state = AdamState::new(&logits);
    let mut trajectory = Vec::with_capacity(cfg.alpha_steps + 1);
    for _ in 0..cfg.alpha_steps {
        let (kl, grad) = objective.value_and_grad(alpha)?;
        trajectory.push(kl);
        if kl < cfg.alpha_tolerance {
            break;
        }
        let grad = Tensor::new(logits[0].shape().to_vec(), grad)?;
        adam_step(&mut logits, &[grad], &mut state, &hp)?;
        alpha.set_logits(logits[0].data())?;
    }
    if trajectory
        .last()
        .is_none_or(|&kl| kl >= cfg.alpha_tolerance)
    {
        trajectory.push(objective.value_and_grad(alpha)?.0);
    }
    if pipeline.checksum() != before {
        return Err(Error::Invariant(
            "network parameters changed during alpha steps".into(),
        ));
    }
    Ok(trajectory)
}

/// Step 1: retrain; step 2: frozen target over the unlabeled pool.
pub fn retrain_and_target<P: ModePipeline + ?Sized>(
    pipeline: &mut P,
    labeled: &Samples,
    pool: &Tensor,
    cfg: &RoundConfig,
) -> Result<(Vec<f64>, PriorVector)> {
    let mut distinct = labeled.labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid("labeled subset must cover at least 2 modes"));
    }
    let cc = pipeline.retrain(labeled, cfg)?;
    let mut target = aggregate_posterior(&pipeline.posterior(pool)?)?;
    target.role = PriorRole::RetrainedAggregate;
    Ok((cc, target))
}

/// One full prior-learning round.
pub fn prior_learning_round<P: ModePipeline + ?Sized>(
    pipeline: &mut P,
    alpha: &mut AlphaVector,
    layout: &ModeLayout,
    labeled: &Samples,
    pool: &Tensor,
    cfg: &RoundConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RoundDiagnostics> {
    cfg.validate()?;
    let prior_before = crate::latent::prior_probs(alpha);
    let (cc, target) = retrain_and_target(pipeline, labeled, pool, cfg)?;
    let kl = fit_alpha(&*pipeline, alpha, layout, target.probs(), cfg, rng)?;
    Ok(RoundDiagnostics {
        cc,
        target: Some(target),
        kl,
        prior_before,
        prior_after: crate::latent::prior_probs(alpha),
    })
}
