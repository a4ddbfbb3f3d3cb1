//! Flat `section.key = value` experiment configuration.
//!
//! ```text
//! # ring of eight, unsupervised
//! mode = V
//! dataset.kind = ring
//! dataset.k = 8
//! train.steps = 30000
//! ```
//!
//! Only `mode` and the `dataset` section are required; everything else
//! falls back to the library defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{dataset_builder, DatasetParams, MixtureSpec};
use crate::error::{Error, Result};
use crate::networks::Activation;
use crate::trainer::{training_variant, EvalConfig, ModelConfig, TrainConfig, TrainingVariant};

/// Environment variable overriding `train.seed`.
pub const SEED_ENV: &str = "NEMGAN_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub kind: String,
    pub params: DatasetParams,
}

impl DatasetConfig {
    pub fn build(&self) -> Result<MixtureSpec> {
        dataset_builder(&self.kind)?.build(&self.params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("{key} = '{value}': {e}"))
}

fn parse_list(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
    }
}

impl ExperimentConfig {
    /// Defaults for every section around the given mode and dataset.
    pub fn new(mode: &str, dataset: DatasetConfig) -> Self {
        ExperimentConfig {
            mode: mode.to_string(),
            dataset,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigLine {
                line: line_no,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(Error::ConfigLine {
                    line: line_no,
                    message: format!("empty key or value in '{line}'"),
                });
            }
            if let Some((first, _)) = entries.get(key) {
                return Err(Error::ConfigLine {
                    line: line_no,
                    message: format!("duplicate key '{key}' (first set on line {first})"),
                });
            }
            entries.insert(key.to_string(), (line_no, value.to_string()));
        }

        let mode = entries
            .remove("mode")
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Config("missing required key 'mode'".into()))?;
        let kind = entries
            .remove("dataset.kind")
            .map(|(_, v)| v)
            .ok_or_else(|| {
                Error::Config("missing required section 'dataset' (dataset.kind)".into())
            })?;
        let builder = dataset_builder(&kind)?;
        let accepted = builder.keys();

        let mut cfg = ExperimentConfig::new(
            &mode,
            DatasetConfig {
                kind,
                params: DatasetParams::new(),
            },
        );
        let mut labeled_set = false;
        for (key, (line, value)) in entries {
            let fail = |message: String| Error::ConfigLine { line, message };
            let (section, name) = key
                .split_once('.')
                .ok_or_else(|| fail(format!("unknown key '{key}'")))?;
            match section {
                "dataset" => {
                    if !accepted.contains(&name) {
                        return Err(fail(format!(
                            "unknown key '{key}' for dataset kind '{}' (accepted: {})",
                            cfg.dataset.kind,
                            accepted.join(", ")
                        )));
                    }
                    cfg.dataset.params.insert(name.to_string(), value);
                }
                "model" => cfg.set_model(name, &value).map_err(fail)?,
                "train" => {
                    labeled_set |= name == "labeled_fraction";
                    cfg.set_train(name, &value).map_err(fail)?
                }
                "eval" => cfg.set_eval(name, &value).map_err(fail)?,
                _ => return Err(fail(format!("unknown section '{section}' in key '{key}'"))),
            }
        }

        let variant = cfg.variant()?;
        if !variant.uses_supervision() {
            if labeled_set && cfg.train.labeled_fraction > 0.0 {
                return Err(Error::Config(format!(
                    "mode {} uses no labels; train.labeled_fraction must be 0",
                    cfg.mode
                )));
            }
            cfg.train.labeled_fraction = 0.0;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("{SEED_ENV} = '{v}': {e}")))?;
        }
        Ok(())
    }

    pub fn variant(&self) -> Result<Box<dyn TrainingVariant>> {
        training_variant(&self.mode)
    }

    pub fn validate(&self) -> Result<()> {
        let variant = self.variant()?;
        self.dataset.build()?;
        self.train.validate()?;
        if variant.uses_supervision() && self.train.labeled_fraction <= 0.0 {
            return Err(Error::Config(format!(
                "mode {} needs train.labeled_fraction > 0",
                self.mode
            )));
        }
        if self.eval.interval == 0 || self.eval.n_eval == 0 {
            return Err(Error::Config(
                "eval.interval and eval.n_eval must be positive".into(),
            ));
        }
        if !(self.model.epsilon >= 0.0) || !(self.model.latent_scale > 0.0) {
            return Err(Error::Config(
                "model.epsilon must be >= 0 and model.latent_scale > 0".into(),
            ));
        }
        Ok(())
    }

    fn set_model(&mut self, name: &str, v: &str) -> std::result::Result<(), String> {
        let key = format!("model.{name}");
        let k = key.as_str();
        let m = &mut self.model;
        let w = &mut self.train.weights;
        match name {
            "modes" => m.modes = Some(parse_value(k, v)?),
            "latent_scale" => m.latent_scale = parse_value(k, v)?,
            "epsilon" => m.epsilon = parse_value(k, v)?,
            "g_hidden" => m.g_hidden = parse_list(k, v)?,
            "d_hidden" => m.d_hidden = parse_list(k, v)?,
            "h1_hidden" => m.h1_hidden = parse_list(k, v)?,
            "h2_hidden" => m.h2_hidden = parse_list(k, v)?,
            "activation" => m.activation = parse_value(k, v)?,
            "slope" => self.train.slope = parse_value(k, v)?,
            "p" => w.p = parse_value(k, v)?,
            "lambda_recon" => w.lambda_recon = parse_value(k, v)?,
            "lambda_kl" => w.lambda_kl = parse_value(k, v)?,
            "lambda_mode" => w.lambda_mode = parse_value(k, v)?,
            "saturating" => w.saturating = parse_value(k, v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    fn set_train(&mut self, name: &str, v: &str) -> std::result::Result<(), String> {
        let key = format!("train.{name}");
        let k = key.as_str();
        let t = &mut self.train;
        match name {
            "batch_size" => t.batch_size = parse_value(k, v)?,
            "steps" => t.steps = parse_value(k, v)?,
            "lr_d" => t.lr_d = parse_value(k, v)?,
            "lr_g" => t.lr_g = parse_value(k, v)?,
            "lr_h" => t.lr_h = parse_value(k, v)?,
            "beta1" => t.beta1 = parse_value(k, v)?,
            "beta2" => t.beta2 = parse_value(k, v)?,
            "embedding" => t.embedding = parse_value(k, v)?,
            "lambda_cc" => t.lambda_cc = parse_value(k, v)?,
            "d_steps" => t.d_steps = parse_value(k, v)?,
            "warmup_fraction" => t.warmup_fraction = parse_value(k, v)?,
            "round_period_fraction" => t.round_period_fraction = parse_value(k, v)?,
            "labeled_fraction" => t.labeled_fraction = parse_value(k, v)?,
            "pool_size" => t.pool_size = parse_value(k, v)?,
            "dataset_size" => t.dataset_size = parse_value(k, v)?,
            "seed" => t.seed = parse_value(k, v)?,
            "retrain_epochs" => t.round.retrain_epochs = parse_value(k, v)?,
            "retrain_lr" => t.round.retrain_lr = parse_value(k, v)?,
            "retrain_h2_only" => t.round.retrain_h2_only = parse_value(k, v)?,
            "alpha_steps" => t.round.alpha_steps = parse_value(k, v)?,
            "alpha_lr" => t.round.alpha_lr = parse_value(k, v)?,
            "alpha_batch" => t.round.alpha_batch = parse_value(k, v)?,
            "alpha_tolerance" => t.round.alpha_tolerance = parse_value(k, v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    fn set_eval(&mut self, name: &str, v: &str) -> std::result::Result<(), String> {
        let key = format!("eval.{name}");
        let k = key.as_str();
        let e = &mut self.eval;
        match name {
            "interval" => e.interval = parse_value(k, v)?,
            "n_eval" => e.n_eval = parse_value(k, v)?,
            "clustering" => e.clustering = parse_value(k, v)?,
            "coverage" => e.coverage = parse_value(k, v)?,
            "frechet" => e.frechet = parse_value(k, v)?,
            "min_count" => {
                e.min_count = match v {
                    "auto" => None,
                    _ => Some(parse_value(k, v)?),
                }
            }
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order. Parsing the
    /// result yields an equal config.
    pub fn resolved(&self) -> String {
        let (m, t, e) = (&self.model, &self.train, &self.eval);
        let w = &t.weights;
        let r = &t.round;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("mode", self.mode.clone());
        put("dataset.kind", self.dataset.kind.clone());
        for (k, v) in &self.dataset.params {
            put(&format!("dataset.{k}"), v.clone());
        }
        if let Some(modes) = m.modes {
            put("model.modes", modes.to_string());
        }
        put("model.latent_scale", m.latent_scale.to_string());
        put("model.epsilon", m.epsilon.to_string());
        put("model.g_hidden", join(&m.g_hidden));
        put("model.d_hidden", join(&m.d_hidden));
        put("model.h1_hidden", join(&m.h1_hidden));
        put("model.h2_hidden", join(&m.h2_hidden));
        put("model.activation", activation_name(m.activation).into());
        put("model.slope", t.slope.to_string());
        put("model.p", w.p.to_string());
        put("model.lambda_recon", w.lambda_recon.to_string());
        put("model.lambda_kl", w.lambda_kl.to_string());
        put("model.lambda_mode", w.lambda_mode.to_string());
        put("model.saturating", w.saturating.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.steps", t.steps.to_string());
        put("train.lr_d", t.lr_d.to_string());
        put("train.lr_g", t.lr_g.to_string());
        put("train.lr_h", t.lr_h.to_string());
        put("train.beta1", t.beta1.to_string());
        put("train.beta2", t.beta2.to_string());
        put(
            "train.embedding",
            format!("{:?}", t.embedding).to_lowercase(),
        );
        put("train.lambda_cc", t.lambda_cc.to_string());
        put("train.d_steps", t.d_steps.to_string());
        put("train.warmup_fraction", t.warmup_fraction.to_string());
        put(
            "train.round_period_fraction",
            t.round_period_fraction.to_string(),
        );
        put("train.labeled_fraction", t.labeled_fraction.to_string());
        put("train.pool_size", t.pool_size.to_string());
        put("train.dataset_size", t.dataset_size.to_string());
        put("train.seed", t.seed.to_string());
        put("train.retrain_epochs", r.retrain_epochs.to_string());
        put("train.retrain_lr", r.retrain_lr.to_string());
        put("train.retrain_h2_only", r.retrain_h2_only.to_string());
        put("train.alpha_steps", r.alpha_steps.to_string());
        put("train.alpha_lr", r.alpha_lr.to_string());
        put("train.alpha_batch", r.alpha_batch.to_string());
        put("train.alpha_tolerance", r.alpha_tolerance.to_string());
        put("eval.interval", e.interval.to_string());
        put("eval.n_eval", e.n_eval.to_string());
        put("eval.clustering", e.clustering.to_string());
        put("eval.coverage", e.coverage.to_string());
        put("eval.frechet", e.frechet.to_string());
        put(
            "eval.min_count",
            e.min_count
                .map_or_else(|| "auto".to_string(), |c| c.to_string()),
        );
        out
    }

    /// Git-style blob hash of the resolved config.
    pub fn content_hash(&self) -> String {
        blob_hash(self.resolved().as_bytes())
    }
}

/// SHA-256 over `"blob <len>\0" ++ bytes`, hex encoded.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const RING: &str = "mode = V\ndataset.kind = ring\ndataset.k = 8\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::parse(RING).unwrap();
        assert_eq!(cfg.mode, "V");
        assert_eq!(cfg.train.steps, TrainConfig::default().steps);
        assert_eq!(cfg.train.labeled_fraction, 0.0);
        assert_eq!(cfg.dataset.build().unwrap().components(), 8);
    }

    #[test]
    fn resolved_round_trips() {
        let text = format!("{RING}# note\ntrain.steps = 500 # inline\nmodel.g_hidden = 32, 16\neval.min_count = 3.5\n");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg.model.g_hidden, vec![32, 16]);
        let again = ExperimentConfig::parse(&cfg.resolved()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.content_hash(), cfg.content_hash());
    }

    #[test]
    fn missing_dataset_section_named() {
        let err = ExperimentConfig::parse("mode = V\ntrain.steps = 10\n").unwrap_err();
        assert!(err.to_string().contains("dataset"), "{err}");
    }

    #[test]
    fn diagnostics_carry_line() {
        let err = ExperimentConfig::parse(&format!("{RING}train.stepz = 3\n")).unwrap_err();
        assert!(matches!(err, Error::ConfigLine { line: 4, .. }), "{err}");
        assert!(err.to_string().contains("train.stepz"));
        let err = ExperimentConfig::parse(&format!("{RING}train.steps = many\n")).unwrap_err();
        assert!(matches!(err, Error::ConfigLine { line: 4, .. }), "{err}");
        let err = ExperimentConfig::parse(&format!("{RING}garbage\n")).unwrap_err();
        assert!(matches!(err, Error::ConfigLine { line: 4, .. }), "{err}");
        let err = ExperimentConfig::parse(&format!("{RING}dataset.k = 4\n")).unwrap_err();
        assert!(matches!(err, Error::ConfigLine { line: 4, .. }), "{err}");
        let err = ExperimentConfig::parse(&format!("{RING}dataset.levels = 4\n")).unwrap_err();
        assert!(err.to_string().contains("dataset.levels"), "{err}");
    }

    #[test]
    fn vanilla_rejects_labels() {
        let err =
            ExperimentConfig::parse(&format!("{RING}train.labeled_fraction = 0.01\n")).unwrap_err();
        assert!(err.to_string().contains("labeled_fraction"), "{err}");
        assert!(ExperimentConfig::parse(&format!("{RING}train.labeled_fraction = 0\n")).is_ok());
    }

    #[test]
    fn supervised_modes_need_labels() {
        let s = "mode = P\ndataset.kind = skewed\ndataset.k = 2\ndataset.weights = 0.9,0.1\n";
        assert_eq!(
            ExperimentConfig::parse(s).unwrap().train.labeled_fraction,
            0.01
        );
        assert!(ExperimentConfig::parse(&format!("{s}train.labeled_fraction = 0\n")).is_err());
        assert!(ExperimentConfig::parse(&format!("{s}train.labeled_fraction = 0.2\n")).is_err());
    }

    #[test]
    fn unknown_mode_and_kind() {
        assert!(ExperimentConfig::parse("mode = Q\ndataset.kind = ring\n").is_err());
        assert!(ExperimentConfig::parse("mode = V\ndataset.kind = spiral\n").is_err());
    }

    #[test]
    fn seed_override() {
        let mut cfg = ExperimentConfig::parse(RING).unwrap();
        cfg.apply_seed_override(Some("42")).unwrap();
        assert_eq!(cfg.train.seed, 42);
        assert!(cfg.apply_seed_override(Some("x")).is_err());
    }

    #[test]
    fn blob_hash_matches_git_scheme() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}
