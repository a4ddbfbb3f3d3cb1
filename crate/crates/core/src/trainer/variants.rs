//! Training variants selectable by name.

use super::round::{fit_alpha, retrain_and_target, InverterPipeline, RoundDiagnostics};
use super::{TrainConfig, TrainerState, TrainingData};
use crate::error::{Error, Result};
use crate::latent::prior_probs;

/// Strategy deciding how labeled data and rounds are used.
pub trait TrainingVariant: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    /// Whether the run draws a labeled subset and schedules rounds.
    fn uses_supervision(&self) -> bool;

    fn learns_prior(&self) -> bool;

    /// Runs the work scheduled between adversarial steps.
    fn round(
        &self,
        state: &mut TrainerState,
        data: &TrainingData,
        cfg: &TrainConfig,
    ) -> Result<Option<RoundDiagnostics>>;
}

/// No supervision and uniform, fixed priors.
pub struct Vanilla;

/// Inverter supervision with frozen priors.
pub struct Supervised;

/// Supervision plus prior learning.
pub struct PriorLearning;

fn labeled(data: &TrainingData) -> Result<&crate::data::Samples> {
    data.labeled
        .as_ref()
        .ok_or_else(|| Error::invalid("this variant needs a labeled subset"))
}

impl TrainingVariant for Vanilla {
    fn name(&self) -> &'static str {
        "V"
    }

    fn description(&self) -> &'static str {
        "unsupervised, uniform fixed priors"
    }

    fn uses_supervision(&self) -> bool {
        false
    }

    fn learns_prior(&self) -> bool {
        false
    }

    fn round(
        &self,
        _: &mut TrainerState,
        _: &TrainingData,
        _: &TrainConfig,
    ) -> Result<Option<RoundDiagnostics>> {
        Ok(None)
    }
}

impl TrainingVariant for Supervised {
    fn name(&self) -> &'static str {
        "S"
    }

    fn description(&self) -> &'static str {
        "inverter supervised on the labeled subset, priors frozen"
    }

    fn uses_supervision(&self) -> bool {
        true
    }

    fn learns_prior(&self) -> bool {
        false
    }

    fn round(
        &self,
        state: &mut TrainerState,
        data: &TrainingData,
        cfg: &TrainConfig,
    ) -> Result<Option<RoundDiagnostics>> {
        let prior = prior_probs(&state.alpha);
        let mut pipe = InverterPipeline {
            nets: &mut state.nets,
        };
        let round_cfg = round_config(cfg);
        let (cc, target) = retrain_and_target(&mut pipe, labeled(data)?, &data.pool, &round_cfg)?;
        Ok(Some(RoundDiagnostics {
            cc,
            target: Some(target),
            kl: Vec::new(),
            prior_before: prior.clone(),
            prior_after: prior,
        }))
    }
}

impl TrainingVariant for PriorLearning {
    fn name(&self) -> &'static str {
        "P"
    }

    fn description(&self) -> &'static str {
        "inverter supervised on the labeled subset, priors learned"
    }

    fn uses_supervision(&self) -> bool {
        true
    }

    fn learns_prior(&self) -> bool {
        true
    }

    fn round(
        &self,
        state: &mut TrainerState,
        data: &TrainingData,
        cfg: &TrainConfig,
    ) -> Result<Option<RoundDiagnostics>> {
        let prior_before = prior_probs(&state.alpha);
        let round_cfg = round_config(cfg);
        let mut pipe = InverterPipeline {
            nets: &mut state.nets,
        };
        let (cc, target) = retrain_and_target(&mut pipe, labeled(data)?, &data.pool, &round_cfg)?;
        let kl = fit_alpha(
            &pipe,
            &mut state.alpha,
            &state.layout,
            target.probs(),
            &round_cfg,
            &mut state.rng,
        )?;
        Ok(Some(RoundDiagnostics {
            cc,
            target: Some(target),
            kl,
            prior_before,
            prior_after: prior_probs(&state.alpha),
        }))
    }
}

fn round_config(cfg: &TrainConfig) -> super::RoundConfig {
    super::RoundConfig {
        slope: cfg.slope,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        ..cfg.round.clone()
    }
}

pub fn training_variants() -> Vec<Box<dyn TrainingVariant>> {
    vec![
        Box::new(Vanilla),
        Box::new(Supervised),
        Box::new(PriorLearning),
    ]
}

pub fn training_variant(name: &str) -> Result<Box<dyn TrainingVariant>> {
    let all = training_variants();
    let known = all.iter().map(|v| v.name()).collect::<Vec<_>>().join(", ");
    all.into_iter()
        .find(|v| v.name() == name)
        .ok_or(Error::UnknownName {
            kind: "mode",
            name: name.to_string(),
            known,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names() {
        let names: Vec<_> = training_variants().iter().map(|v| v.name()).collect();
        assert_eq!(names, ["V", "S", "P"]);
        assert!(training_variant("P").unwrap().learns_prior());
        assert!(!training_variant("S").unwrap().learns_prior());
        assert!(!training_variant("V").unwrap().uses_supervision());
        assert!(training_variant("Q").is_err());
    }
}
