//! Finite-difference audit of every loss term at random initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport};
use crate::autodiff::{Tape, Var};
use crate::data::{oracle_mode_assign, sample_mixture};
use crate::error::{Error, Result};
use crate::latent::{breakpoints, latent_graph, AlphaVector, LatentNoise, ModeLayout};
use crate::networks::{BoundMlp, Mlp, NetworkSet};
use crate::objectives::{
    discriminator_loss, generator_inverter_loss, prior_alignment_loss, supervised_cc_loss,
    GeneratorInverterInputs, GeneratorInverterLoss,
};
use crate::tensor::Tensor;
use crate::trainer::{
    derive_seed, draw_latent, Embedding, InverterPipeline, ModePipeline, TrainerState,
};

use super::config::ExperimentConfig;

/// Minimum distance of every hard-sigmoid input from its clamp corners on
/// the alpha probes.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct TermCheck {
    pub term: &'static str,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct GradCheckSummary {
    pub terms: Vec<TermCheck>,
    pub tolerance: f64,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.report.passed)
    }

    pub fn worst(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| t.report.max_relative_error)
            .fold(0.0, f64::max)
    }
}

fn bind_split<'a>(
    tape: &mut Tape,
    vars: &[Var],
    trainable: &[&'a Mlp],
    frozen: &[&'a Mlp],
) -> Result<Vec<BoundMlp<'a>>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for m in trainable {
        let n = m.params().len();
        out.push(m.with_vars(vars[offset..offset + n].to_vec())?);
        offset += n;
    }
    for m in frozen {
        out.push(m.bind(tape, false));
    }
    Ok(out)
}

fn params_of(nets: &[&Mlp]) -> Vec<Tensor> {
    nets.iter()
        .flat_map(|m| m.params().iter().cloned())
        .collect()
}

/// Noise whose indicator is away from every clamp corner, with about half
/// of the rows inside a transition window so that `alpha` has gradient.
pub fn kink_free_noise(
    alpha: &AlphaVector,
    layout: &ModeLayout,
    n: usize,
    slope: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LatentNoise> {
    let a = breakpoints(alpha);
    let m = layout.modes();
    let clear = |u: f64| {
        u > 0.0
            && u < 1.0
            && a.iter().all(|&ai| {
                let s = slope * (ai - u) + 0.5;
                s.abs() > KINK_MARGIN && (s - 1.0).abs() > KINK_MARGIN
            })
    };
    let mut nu1 = Vec::with_capacity(n);
    while nu1.len() < n {
        let u = if nu1.len() % 2 == 0 && m > 1 {
            let i = rng.random_range(0..m - 1);
            a[i] + (rng.random::<f64>() - 0.5) * 0.9 / slope
        } else {
            rng.random::<f64>()
        };
        if clear(u) {
            nu1.push(u);
        }
    }
    let jitter = LatentNoise::draw(rng, n, layout)?;
    Ok(LatentNoise {
        nu1,
        nu2: jitter.nu2,
    })
}

struct Fixture {
    nets: NetworkSet,
    layout: ModeLayout,
    alpha: AlphaVector,
    slope: f64,
    real: Tensor,
    labels: Vec<usize>,
    z: Tensor,
    modes: Vec<usize>,
    target: Vec<f64>,
    alpha_noise: LatentNoise,
}

fn fixture(cfg: &ExperimentConfig, batch: usize) -> Result<Fixture> {
    if batch == 0 {
        return Err(Error::invalid("gradcheck batch must be positive"));
    }
    let seed = cfg.train.seed;
    let spec = cfg.dataset.build()?;
    let TrainerState { nets, layout, .. } = TrainerState::init(&cfg.model, &spec, &cfg.train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6772_6164));
    let logits: Vec<f64> = (0..layout.modes())
        .map(|_| rng.random::<f64>() - 0.5)
        .collect();
    let alpha = AlphaVector::new(logits)?;
    let samples = sample_mixture(&spec, batch, rng.random())?;
    let labels = oracle_mode_assign(&samples.x, &spec)?;
    let (z, modes) = draw_latent(
        &alpha,
        &layout,
        batch,
        cfg.train.slope,
        Embedding::Hard,
        &mut rng,
    )?;
    let raw: Vec<f64> = (0..layout.modes())
        .map(|_| rng.random::<f64>() + 0.1)
        .collect();
    let total: f64 = raw.iter().sum();
    let target = raw.iter().map(|v| v / total).collect();
    let alpha_noise = kink_free_noise(&alpha, &layout, batch, cfg.train.slope, &mut rng)?;
    Ok(Fixture {
        nets,
        layout,
        alpha,
        slope: cfg.train.slope,
        real: samples.x,
        labels,
        z,
        modes,
        target,
        alpha_noise,
    })
}

fn inverter_terms(
    fx: &Fixture,
    cfg: &ExperimentConfig,
    tape: &mut Tape,
    vars: &[Var],
    trainable: &[&Mlp],
) -> Result<GeneratorInverterLoss> {
    let n = &fx.nets;
    let all = [&n.g, &n.d, &n.h1, &n.h2];
    let frozen: Vec<&Mlp> = all
        .iter()
        .copied()
        .filter(|m| !trainable.iter().any(|t| std::ptr::eq(*t, *m)))
        .collect();
    let bound = bind_split(tape, vars, trainable, &frozen)?;
    let order: Vec<&Mlp> = trainable.iter().chain(frozen.iter()).copied().collect();
    let find = |m: &Mlp| {
        order
            .iter()
            .position(|o| std::ptr::eq(*o, m))
            .expect("bound")
    };
    let (g, d, h1, h2) = (
        &bound[find(&n.g)],
        &bound[find(&n.d)],
        &bound[find(&n.h1)],
        &bound[find(&n.h2)],
    );
    let z = tape.constant(fx.z.clone());
    let x = g.forward(tape, z)?;
    let fake_logits = d.forward(tape, x)?;
    let zhat = h1.forward(tape, x)?;
    let yhat_logits = h2.forward(tape, zhat)?;
    let inputs = GeneratorInverterInputs {
        z,
        zhat,
        fake_logits,
        yhat_logits,
        modes: &fx.modes,
    };
    let prior = crate::latent::prior_probs(&fx.alpha);
    generator_inverter_loss(tape, inputs, &prior, &cfg.train.weights)
}

/// Checks every loss term against central differences. Network terms use
/// the configured architecture at its seeded initialization.
pub fn run_gradcheck(
    cfg: &ExperimentConfig,
    opts: &GradCheckOptions,
    batch: usize,
) -> Result<GradCheckSummary> {
    let fx = fixture(cfg, batch)?;
    let n = &fx.nets;
    let mut terms = Vec::new();

    let d_params = params_of(&[&n.d]);
    let report = grad_check(
        |tape, vars| {
            let d = n.d.with_vars(vars.to_vec())?;
            let real = tape.constant(fx.real.clone());
            let fake = tape.constant(n.generate(&fx.z)?);
            let lr = d.forward(tape, real)?;
            let lf = d.forward(tape, fake)?;
            discriminator_loss(tape, lr, lf)
        },
        &d_params,
        opts,
    )?;
    terms.push(TermCheck {
        term: "d_loss",
        report,
    });

    type Pick = fn(&GeneratorInverterLoss) -> Var;
    let cases: [(&'static str, Vec<&Mlp>, Pick); 5] = [
        ("g_adv", vec![&n.g], |l| l.g_adv),
        ("recon", vec![&n.g, &n.h1], |l| l.recon),
        ("kl_latent", vec![&n.g, &n.h1, &n.h2], |l| l.kl_latent),
        ("mode_ce", vec![&n.g, &n.h1, &n.h2], |l| l.mode_ce),
        ("generator_total", vec![&n.g, &n.h1, &n.h2], |l| l.total),
    ];
    for (term, trainable, pick) in cases {
        let params = params_of(&trainable);
        let report = grad_check(
            |tape, vars| Ok(pick(&inverter_terms(&fx, cfg, tape, vars, &trainable)?)),
            &params,
            opts,
        )?;
        terms.push(TermCheck { term, report });
    }

    let h_params = params_of(&[&n.h1, &n.h2]);
    let report = grad_check(
        |tape, vars| {
            let k = n.h1.params().len();
            let h1 = n.h1.with_vars(vars[..k].to_vec())?;
            let h2 = n.h2.with_vars(vars[k..].to_vec())?;
            let x = tape.constant(fx.real.clone());
            let zhat = h1.forward(tape, x)?;
            let logits = h2.forward(tape, zhat)?;
            supervised_cc_loss(tape, logits, &fx.labels)
        },
        &h_params,
        opts,
    )?;
    terms.push(TermCheck { term: "cc", report });

    let alpha_param = [fx.alpha.as_tensor()];
    let weights: Vec<f64> = (0..fx.layout.modes()).map(|i| 1.0 + i as f64).collect();
    let report = grad_check(
        |tape, vars| {
            let graph = latent_graph(tape, vars[0], &fx.layout, &fx.alpha_noise, fx.slope)?;
            let mean = tape.mean_rows(graph.f)?;
            let w = tape.constant(Tensor::row_vector(&weights)?);
            let weighted = tape.mul(mean, w)?;
            tape.sum(weighted)
        },
        &alpha_param,
        opts,
    )?;
    terms.push(TermCheck {
        term: "alpha_indicator",
        report,
    });

    let mut nets = fx.nets.clone();
    let pipeline = InverterPipeline { nets: &mut nets };
    let report = grad_check(
        |tape, vars| {
            let target = tape.constant(Tensor::row_vector(&fx.target)?);
            prior_alignment_loss(tape, vars[0], target, |tape, a| {
                let graph = latent_graph(tape, a, &fx.layout, &fx.alpha_noise, fx.slope)?;
                let post = pipeline.generated_posterior_graph(tape, graph)?;
                tape.mean_rows(post)
            })
        },
        &alpha_param,
        opts,
    )?;
    terms.push(TermCheck {
        term: "prior_align",
        report,
    });

    Ok(GradCheckSummary {
        terms,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{AdjointFault, OpKind};

    fn small() -> ExperimentConfig {
        ExperimentConfig::parse(
            "mode = V\ndataset.kind = ring\ndataset.k = 4\nmodel.g_hidden = 8\nmodel.d_hidden = 8\nmodel.h1_hidden = 8\nmodel.h2_hidden = 8\n",
        )
        .unwrap()
    }

    #[test]
    fn every_term_passes() {
        let s = run_gradcheck(&small(), &GradCheckOptions::default(), 6).unwrap();
        let names: Vec<_> = s.terms.iter().map(|t| t.term).collect();
        assert!(names.contains(&"alpha_indicator") && names.contains(&"prior_align"));
        assert!(s.passed(), "{:?}", s.terms);
        assert!(s.terms.iter().all(|t| t.report.probes > 0));
    }

    #[test]
    fn corrupted_adjoint_detected() {
        let opts = GradCheckOptions {
            adjoint_fault: Some(AdjointFault {
                op: OpKind::HardSigmoid,
                factor: 1.5,
            }),
            ..Default::default()
        };
        let s = run_gradcheck(&small(), &opts, 6).unwrap();
        let alpha = s
            .terms
            .iter()
            .find(|t| t.term == "alpha_indicator")
            .unwrap();
        assert!(!alpha.report.passed);
        assert!(!s.passed());
    }

    #[test]
    fn probes_avoid_kinks() {
        let layout = ModeLayout::one_hot(5, 2.0, 0.3).unwrap();
        let alpha = AlphaVector::new(vec![0.3, -0.2, 0.1, 0.0, 0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = kink_free_noise(&alpha, &layout, 200, 10.0, &mut rng).unwrap();
        let a = breakpoints(&alpha);
        let inside = noise
            .nu1
            .iter()
            .filter(|&&u| {
                a.iter().any(|&ai| {
                    let s = 10.0 * (ai - u) + 0.5;
                    s > 0.0 && s < 1.0
                })
            })
            .count();
        assert!(inside >= 90, "{inside}");
        for &u in &noise.nu1 {
            for &ai in &a {
                let s = 10.0 * (ai - u) + 0.5;
                assert!(s.abs() > KINK_MARGIN && (s - 1.0).abs() > KINK_MARGIN);
            }
        }
    }
}
