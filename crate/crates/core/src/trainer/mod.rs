//! Alternating adversarial training with optional prior-learning rounds.

pub mod adam;
pub mod round;
pub mod variants;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{draw_supervised_subset, make_splits, MixtureSpec, Samples};
use crate::error::{Error, Result};
use crate::latent::{
    embed_hard, latent_from_noise, prior_probs, AlphaVector, LatentNoise, ModeLayout,
};
use crate::metrics::{self, ContingencyTable, MetricsReport};
use crate::networks::{init_networks, Activation, NetworkSet, NetworkSpecs};
use crate::objectives::{
    discriminator_loss, generator_inverter_loss, supervised_cc_loss, GeneratorInverterInputs,
    LossBreakdown, LossWeights,
};
use crate::tensor::Tensor;

use adam::{adam_step, AdamParams, AdamState};
pub use round::{
    prior_learning_round, InverterPipeline, ModePipeline, RoundConfig, RoundDiagnostics,
};
pub use variants::{training_variant, training_variants, TrainingVariant};

/// How latent codes are embedded during the adversarial phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Embedding {
    /// `z = c_y + nu2`.
    Hard,
    /// `z = sum_i f_i c_i + nu2` with the hard-sigmoid indicator.
    Soft,
}

impl std::str::FromStr for Embedding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Embedding::Hard),
            "soft" => Ok(Embedding::Soft),
            other => Err(Error::Config(format!(
                "unknown embedding '{other}' (hard, soft)"
            ))),
        }
    }
}

/// Network architecture and latent layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent modes; defaults to the number of data components.
    pub modes: Option<usize>,
    /// Mode centers are `latent_scale · e_i`.
    pub latent_scale: f64,
    pub epsilon: f64,
    pub g_hidden: Vec<usize>,
    pub d_hidden: Vec<usize>,
    pub h1_hidden: Vec<usize>,
    pub h2_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modes: None,
            latent_scale: 2.0,
            epsilon: 0.3,
            g_hidden: vec![128, 128],
            d_hidden: vec![128, 128],
            h1_hidden: vec![128, 128],
            h2_hidden: vec![64],
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn layout(&self, data_modes: usize) -> Result<ModeLayout> {
        ModeLayout::one_hot(
            self.modes.unwrap_or(data_modes),
            self.latent_scale,
            self.epsilon,
        )
    }

    pub fn specs(&self, layout: &ModeLayout, data_dim: usize) -> NetworkSpecs {
        NetworkSpecs::with_hidden(
            layout.dim(),
            data_dim,
            layout.modes(),
            &self.g_hidden,
            &self.d_hidden,
            &self.h1_hidden,
            &self.h2_hidden,
            self.activation,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr_d: f64,
    pub lr_g: f64,
    /// Learning rate of h1 and h2.
    pub lr_h: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub slope: f64,
    pub embedding: Embedding,
    pub weights: LossWeights,
    /// Weight of the supervised loss on the labeled subset in every joint
    /// update, for variants that use supervision.
    pub lambda_cc: f64,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    /// First round after this fraction of the steps.
    pub warmup_fraction: f64,
    /// Rounds repeat every this fraction of the steps.
    pub round_period_fraction: f64,
    pub round: RoundConfig,
    pub labeled_fraction: f64,
    pub pool_size: usize,
    /// Real samples drawn before the 80/20 split.
    pub dataset_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            steps: 30_000,
            lr_d: 1e-3,
            lr_g: 2e-4,
            lr_h: 1e-3,
            beta1: 0.5,
            beta2: 0.9,
            slope: crate::latent::DEFAULT_SLOPE,
            embedding: Embedding::Hard,
            weights: LossWeights::default(),
            lambda_cc: 10.0,
            d_steps: 1,
            warmup_fraction: 0.2,
            round_period_fraction: 0.1,
            round: RoundConfig::default(),
            labeled_fraction: 0.01,
            pool_size: 10_000,
            dataset_size: 20_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_d", self.lr_d),
            ("lr_g", self.lr_g),
            ("lr_h", self.lr_h),
            ("slope", self.slope),
            ("warmup_fraction", self.warmup_fraction),
            ("round_period_fraction", self.round_period_fraction),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "train.{name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.steps == 0 || self.d_steps == 0 || self.pool_size == 0 {
            return Err(Error::Config(
                "batch_size, steps, d_steps and pool_size must be positive".into(),
            ));
        }
        if self.labeled_fraction < 0.0 || self.labeled_fraction > crate::data::MAX_LABELED_FRACTION
        {
            return Err(Error::Config(format!(
                "train.labeled_fraction must lie in (0, {}]",
                crate::data::MAX_LABELED_FRACTION
            )));
        }
        if self.lambda_cc < 0.0 {
            return Err(Error::Config("train.lambda_cc must be non-negative".into()));
        }
        crate::autodiff::NormOrder::from_p(self.weights.p)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.round.validate()
    }

    /// Completed-step counts after which a round runs.
    pub fn round_steps(&self) -> Vec<u64> {
        let warmup = (self.warmup_fraction * self.steps as f64).ceil() as u64;
        let period = ((self.round_period_fraction * self.steps as f64).round() as u64).max(1);
        (0..)
            .map(|i| warmup + i * period)
            .take_while(|&s| s < self.steps)
            .collect()
    }

    fn adam(&self, lr: f64) -> AdamParams {
        AdamParams::new(lr, self.beta1, self.beta2)
    }
}

/// Evaluation cadence and toggles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub interval: u64,
    pub n_eval: usize,
    pub clustering: bool,
    pub coverage: bool,
    pub frechet: bool,
    /// Coverage hit threshold; `None` uses `max(1, 0.2 n / K)`.
    pub min_count: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            interval: 1000,
            n_eval: 5000,
            clustering: true,
            coverage: true,
            frechet: true,
            min_count: None,
        }
    }
}

/// Deterministic, decorrelated seed for a named stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const STREAM_DATA: u64 = 1;
const STREAM_LABELS: u64 = 2;
const STREAM_NETS: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_EVAL: u64 = 5;

/// Real data prepared for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub spec: MixtureSpec,
    pub train: Samples,
    /// Per-mode balanced held-out set.
    pub test: Samples,
    pub labeled: Option<Samples>,
    /// Unlabeled real samples for the retrained aggregate posterior.
    pub pool: Tensor,
}

impl TrainingData {
    pub fn prepare(spec: &MixtureSpec, cfg: &TrainConfig, supervised: bool) -> Result<Self> {
        let splits = make_splits(spec, cfg.dataset_size, derive_seed(cfg.seed, STREAM_DATA))?;
        let labeled = if supervised {
            let sub = draw_supervised_subset(
                &splits.train.labels,
                cfg.labeled_fraction,
                derive_seed(cfg.seed, STREAM_LABELS),
            )?;
            Some(splits.train.select(&sub.indices)?)
        } else {
            None
        };
        let pool_n = cfg.pool_size.min(splits.train.len());
        let pool = splits
            .train
            .x
            .select_rows(&(0..pool_n).collect::<Vec<_>>())?;
        Ok(TrainingData {
            spec: spec.clone(),
            train: splits.train,
            test: splits.test,
            labeled,
            pool,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub g: AdamState,
    pub d: AdamState,
    pub h1: AdamState,
    pub h2: AdamState,
}

impl Optimizers {
    pub fn new(nets: &NetworkSet) -> Self {
        Optimizers {
            g: AdamState::new(nets.g.params()),
            d: AdamState::new(nets.d.params()),
            h1: AdamState::new(nets.h1.params()),
            h2: AdamState::new(nets.h2.params()),
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub nets: NetworkSet,
    pub alpha: AlphaVector,
    pub layout: ModeLayout,
    pub optimizers: Optimizers,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl TrainerState {
    pub fn init(model: &ModelConfig, spec: &MixtureSpec, cfg: &TrainConfig) -> Result<Self> {
        let layout = model.layout(spec.components())?;
        let specs = model.specs(&layout, spec.dim());
        let nets = init_networks(&specs, derive_seed(cfg.seed, STREAM_NETS))?;
        Ok(TrainerState {
            optimizers: Optimizers::new(&nets),
            alpha: AlphaVector::uniform(layout.modes())?,
            layout,
            nets,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_TRAIN)),
            step: 0,
        })
    }
}

fn draw_rows(samples: &Samples, n: usize, rng: &mut ChaCha8Rng) -> Result<Samples> {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..samples.len())).collect();
    samples.select(&idx)
}

/// Latent codes and modes for the adversarial phase.
pub fn draw_latent(
    alpha: &AlphaVector,
    layout: &ModeLayout,
    n: usize,
    slope: f64,
    embedding: Embedding,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let noise = LatentNoise::draw(rng, n, layout)?;
    let batch = latent_from_noise(alpha, layout, &noise, slope)?;
    let z = match embedding {
        Embedding::Soft => batch.z,
        Embedding::Hard => embed_hard(layout, &batch.y, &batch.nu2)?,
    };
    Ok((z, batch.y))
}

fn grads_for(
    grads: &mut crate::autodiff::Gradients,
    vars: &[crate::autodiff::Var],
    params: &[Tensor],
) -> Vec<Tensor> {
    vars.iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p))
        .collect()
}

/// One discriminator update followed by one joint update of g, h1 and h2.
/// `labeled` adds the supervised loss to the joint update.
pub fn train_step(
    state: &mut TrainerState,
    data: &TrainingData,
    labeled: Option<&Samples>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let alpha_sum = state.alpha.checksum();
    let step = state.step;
    let bs = cfg.batch_size;
    let mut out = LossBreakdown {
        p: cfg.weights.p,
        ..Default::default()
    };

    for _ in 0..cfg.d_steps {
        let real = draw_rows(&data.train, bs, &mut state.rng)?;
        let (z, _) = draw_latent(
            &state.alpha,
            &state.layout,
            bs,
            cfg.slope,
            cfg.embedding,
            &mut state.rng,
        )?;
        let fake = state.nets.g.eval(&z)?;
        let mut tape = Tape::new();
        let d = state.nets.d.bind(&mut tape, true);
        let xr = tape.constant(real.x);
        let xf = tape.constant(fake);
        let lr = d.forward(&mut tape, xr)?;
        let lf = d.forward(&mut tape, xf)?;
        let loss = discriminator_loss(&mut tape, lr, lf)?;
        out.d_loss = tape.value(loss).item();
        if !out.d_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: "d_loss",
                step,
            });
        }
        let mut grads = tape.backward(loss)?;
        let gd = grads_for(&mut grads, d.vars(), state.nets.d.params());
        drop(d);
        adam_step(
            state.nets.d.params_mut(),
            &gd,
            &mut state.optimizers.d,
            &cfg.adam(cfg.lr_d),
        )?;
    }

    let (z, modes) = draw_latent(
        &state.alpha,
        &state.layout,
        bs,
        cfg.slope,
        cfg.embedding,
        &mut state.rng,
    )?;
    let sup = match labeled {
        Some(l) if cfg.lambda_cc > 0.0 => Some(if l.len() <= bs {
            l.clone()
        } else {
            draw_rows(l, bs, &mut state.rng)?
        }),
        _ => None,
    };
    let prior = prior_probs(&state.alpha);
    let mut tape = Tape::new();
    let g = state.nets.g.bind(&mut tape, true);
    let d = state.nets.d.bind(&mut tape, false);
    let h1 = state.nets.h1.bind(&mut tape, true);
    let h2 = state.nets.h2.bind(&mut tape, true);
    let zv = tape.constant(z);
    let x = g.forward(&mut tape, zv)?;
    let fake_logits = d.forward(&mut tape, x)?;
    let zhat = h1.forward(&mut tape, x)?;
    let yhat_logits = h2.forward(&mut tape, zhat)?;
    let inputs = GeneratorInverterInputs {
        z: zv,
        zhat,
        fake_logits,
        yhat_logits,
        modes: &modes,
    };
    let gi = generator_inverter_loss(&mut tape, inputs, &prior, &cfg.weights)?;
    let mut total = gi.total;
    if let Some(sup) = &sup {
        let lx = tape.constant(sup.x.clone());
        let lz = h1.forward(&mut tape, lx)?;
        let ll = h2.forward(&mut tape, lz)?;
        let cc = supervised_cc_loss(&mut tape, ll, &sup.labels)?;
        out.cc = Some(tape.value(cc).item());
        let scaled = tape.scale(cc, cfg.lambda_cc)?;
        total = tape.add(total, scaled)?;
    }
    out.g_adv = tape.value(gi.g_adv).item();
    out.recon = tape.value(gi.recon).item();
    out.kl_latent = tape.value(gi.kl_latent).item();
    out.mode_ce = tape.value(gi.mode_ce).item();
    out.check_finite(step)?;

    let mut grads = tape.backward(total)?;
    let gg = grads_for(&mut grads, g.vars(), state.nets.g.params());
    let g1 = grads_for(&mut grads, h1.vars(), state.nets.h1.params());
    let g2 = grads_for(&mut grads, h2.vars(), state.nets.h2.params());
    drop((g, d, h1, h2));
    adam_step(
        state.nets.g.params_mut(),
        &gg,
        &mut state.optimizers.g,
        &cfg.adam(cfg.lr_g),
    )?;
    adam_step(
        state.nets.h1.params_mut(),
        &g1,
        &mut state.optimizers.h1,
        &cfg.adam(cfg.lr_h),
    )?;
    adam_step(
        state.nets.h2.params_mut(),
        &g2,
        &mut state.optimizers.h2,
        &cfg.adam(cfg.lr_h),
    )?;

    if state.alpha.checksum() != alpha_sum {
        return Err(Error::Invariant(
            "alpha changed during an adversarial step".into(),
        ));
    }
    state.step += 1;
    Ok(out)
}

/// Generated samples with their latent modes, drawn from a dedicated seed.
pub fn generate(
    state: &TrainerState,
    n: usize,
    slope: f64,
    embedding: Embedding,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (z, modes) = draw_latent(&state.alpha, &state.layout, n, slope, embedding, &mut rng)?;
    Ok((state.nets.generate(&z)?, modes))
}

/// Computes the enabled metrics against the balanced test set.
pub fn evaluate(
    state: &TrainerState,
    data: &TrainingData,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<MetricsReport> {
    if eval.n_eval == 0 {
        return Err(Error::invalid("n_eval must be positive"));
    }
    let mut report = MetricsReport {
        step: state.step,
        ..Default::default()
    };
    if eval.clustering {
        let pred = state.nets.classify(&data.test.x)?;
        let table = ContingencyTable::new(&data.test.labels, &pred)?;
        report.acc = Some(table.matched_count() as f64 / table.total() as f64);
        report.nmi = Some(table.nmi());
        report.ari = Some(table.ari());
    }
    if eval.coverage || eval.frechet {
        let seed = derive_seed(derive_seed(cfg.seed, STREAM_EVAL), state.step);
        let (x, _) = generate(state, eval.n_eval, cfg.slope, Embedding::Hard, seed)?;
        if eval.coverage {
            let cov = metrics::mode_coverage(&x, &data.spec, eval.min_count, data.spec.weights())?;
            report.modes_covered = Some(cov.modes_covered);
            report.histogram_kl = Some(cov.histogram_kl);
        }
        if eval.frechet {
            report.gaussian_frechet = Some(metrics::frechet_gaussian(&data.test.x, &x)?);
        }
    }
    report.validate(data.spec.components())?;
    Ok(report)
}

/// One metrics-CSV row: interval-mean losses and an evaluation snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub losses: LossBreakdown,
    pub metrics: MetricsReport,
}

#[derive(Default)]
struct LossAccumulator {
    sum: LossBreakdown,
    cc_sum: f64,
    cc_n: usize,
    n: usize,
}

impl LossAccumulator {
    fn push(&mut self, l: &LossBreakdown) {
        self.sum.d_loss += l.d_loss;
        self.sum.g_adv += l.g_adv;
        self.sum.recon += l.recon;
        self.sum.kl_latent += l.kl_latent;
        self.sum.mode_ce += l.mode_ce;
        self.sum.p = l.p;
        if let Some(cc) = l.cc {
            self.cc_sum += cc;
            self.cc_n += 1;
        }
        self.n += 1;
    }

    fn take(&mut self, prior_align: Option<f64>) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        let out = LossBreakdown {
            d_loss: self.sum.d_loss / n,
            g_adv: self.sum.g_adv / n,
            recon: self.sum.recon / n,
            kl_latent: self.sum.kl_latent / n,
            mode_ce: self.sum.mode_ce / n,
            cc: (self.cc_n > 0).then(|| self.cc_sum / self.cc_n as f64),
            prior_align,
            p: self.sum.p,
        };
        *self = LossAccumulator::default();
        out
    }
}

/// Result of [`run_training`].
#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub state: TrainerState,
    pub history: Vec<HistoryRow>,
    pub rounds: Vec<RoundDiagnostics>,
    pub data: TrainingData,
}

/// Runs a full schedule, passing each history row to `sink` as soon as it
/// is complete.
pub fn run_training(
    model: &ModelConfig,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    spec: &MixtureSpec,
    variant: &dyn TrainingVariant,
    sink: &mut dyn FnMut(&HistoryRow) -> Result<()>,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if eval.interval == 0 {
        return Err(Error::Config("eval.interval must be positive".into()));
    }
    let data = TrainingData::prepare(spec, cfg, variant.uses_supervision())?;
    let mut state = TrainerState::init(model, spec, cfg)?;
    let rounds_at = if variant.uses_supervision() {
        cfg.round_steps()
    } else {
        Vec::new()
    };
    let mut rounds = Vec::new();
    let mut history = Vec::new();
    let mut acc = LossAccumulator::default();
    let mut prior_align = None;

    while state.step < cfg.steps {
        let labeled = if variant.uses_supervision() {
            data.labeled.as_ref()
        } else {
            None
        };
        let losses = train_step(&mut state, &data, labeled, cfg)?;
        acc.push(&losses);
        if rounds_at.contains(&state.step) {
            if let Some(diag) = variant.round(&mut state, &data, cfg)? {
                log::info!(
                    "step {}: round prior {:?} -> {:?}",
                    state.step,
                    diag.prior_before,
                    diag.prior_after
                );
                prior_align = diag.final_kl().or(prior_align);
                rounds.push(diag);
            }
        }
        if state.step % eval.interval == 0 || state.step == cfg.steps {
            let row = HistoryRow {
                step: state.step,
                losses: acc.take(prior_align),
                metrics: evaluate(&state, &data, cfg, eval)?,
            };
            log::info!("step {}: {:?}", row.step, row.metrics);
            sink(&row)?;
            history.push(row);
        }
    }
    Ok(TrainingOutcome {
        state,
        history,
        rounds,
        data,
    })
}
