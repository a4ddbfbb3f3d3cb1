//! Experiment front-end: training runs on disk, evaluation and sampling from
//! checkpoints, gradient audits and step timing.

pub mod config;
pub mod gradcheck;
mod svg;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{oracle_mode_assign, save_samples_csv, Samples};
use crate::error::{Error, Result};
use crate::latent::{embed_hard, prior_probs, LatentNoise};
use crate::metrics::MetricsReport;
use crate::trainer::{
    derive_seed, evaluate, generate, run_training, train_step, Embedding, HistoryRow,
    RoundDiagnostics, TrainerState, TrainingData,
};

pub use config::{blob_hash, DatasetConfig, ExperimentConfig, SEED_ENV};
pub use gradcheck::{run_gradcheck, GradCheckSummary, TermCheck};
pub use svg::scatter_svg;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const METRICS_COLUMNS: [&str; 13] = [
    "step",
    "d_loss",
    "g_adv",
    "recon",
    "kl_latent",
    "cc",
    "prior_align",
    "acc",
    "nmi",
    "ari",
    "modes_covered",
    "histogram_kl",
    "gaussian_frechet",
];

const EVAL_COLUMNS: [&str; 7] = [
    "step",
    "acc",
    "nmi",
    "ari",
    "modes_covered",
    "histogram_kl",
    "gaussian_frechet",
];

const STREAM_FRESH_TEST: u64 = 11;
const STREAM_SAMPLE: u64 = 12;

/// Parameters, prior, layout, optimizer moments and RNG of a run, tied to
/// the config that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Resolved config text.
    pub config: String,
    pub config_hash: String,
    pub state: TrainerState,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

impl Checkpoint {
    pub fn new(cfg: &ExperimentConfig, state: TrainerState) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg.resolved(),
            config_hash: cfg.content_hash(),
            state,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: probe.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if blob_hash(ckpt.config.as_bytes()) != ckpt.config_hash {
            return Err(Error::Config(
                "checkpoint config does not match its hash".into(),
            ));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub step: u64,
    pub prior_before: Vec<f64>,
    pub prior_after: Vec<f64>,
    pub target: Option<Vec<f64>>,
    pub final_cc: Option<f64>,
    pub final_kl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub mode: String,
    pub seed: u64,
    pub steps: u64,
    pub config_hash: String,
    pub config_file: String,
    pub metrics_file: String,
    pub checkpoint_file: String,
    pub final_prior: Vec<f64>,
    pub rounds: Vec<RoundSummary>,
}

fn opt_f(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_u(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metrics_fields(m: &MetricsReport) -> [String; 6] {
    [
        opt_f(m.acc),
        opt_f(m.nmi),
        opt_f(m.ari),
        opt_u(m.modes_covered),
        opt_f(m.histogram_kl),
        opt_f(m.gaussian_frechet),
    ]
}

pub fn metrics_csv_row(row: &HistoryRow) -> String {
    let l = &row.losses;
    let mut fields = vec![
        row.step.to_string(),
        l.d_loss.to_string(),
        l.g_adv.to_string(),
        l.recon.to_string(),
        l.kl_latent.to_string(),
        opt_f(l.cc),
        opt_f(l.prior_align),
    ];
    fields.extend(metrics_fields(&row.metrics));
    fields.join(",")
}

/// What [`train_experiment`] produced.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub history: Vec<HistoryRow>,
    pub rounds: Vec<RoundDiagnostics>,
    pub state: TrainerState,
    pub data: TrainingData,
}

/// Trains from a config file into `out_dir`.
pub fn cmd_train(config_path: &Path, out_dir: &Path) -> Result<TrainSummary> {
    let cfg = ExperimentConfig::load(config_path)?;
    train_experiment(&cfg, out_dir)
}

/// Writes the resolved config first, then metrics rows as they complete,
/// then the checkpoint and manifest.
pub fn train_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(CONFIG_FILE), cfg.resolved())?;
    let spec = cfg.dataset.build()?;
    let variant = cfg.variant()?;

    let mut metrics = BufWriter::new(File::create(out_dir.join(METRICS_FILE))?);
    writeln!(metrics, "{}", METRICS_COLUMNS.join(","))?;
    metrics.flush()?;
    let mut sink = |row: &HistoryRow| -> Result<()> {
        writeln!(metrics, "{}", metrics_csv_row(row))?;
        metrics.flush()?;
        Ok(())
    };
    let outcome = run_training(
        &cfg.model,
        &cfg.train,
        &cfg.eval,
        &spec,
        variant.as_ref(),
        &mut sink,
    )?;
    drop(metrics);

    Checkpoint::new(cfg, outcome.state.clone()).save(&out_dir.join(CHECKPOINT_FILE))?;
    let round_steps = cfg.train.round_steps();
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        mode: cfg.mode.clone(),
        seed: cfg.train.seed,
        steps: cfg.train.steps,
        config_hash: cfg.content_hash(),
        config_file: CONFIG_FILE.into(),
        metrics_file: METRICS_FILE.into(),
        checkpoint_file: CHECKPOINT_FILE.into(),
        final_prior: prior_probs(&outcome.state.alpha),
        rounds: outcome
            .rounds
            .iter()
            .zip(&round_steps)
            .map(|(r, &step)| RoundSummary {
                step,
                prior_before: r.prior_before.clone(),
                prior_after: r.prior_after.clone(),
                target: r.target.as_ref().map(|t| t.probs().to_vec()),
                final_cc: r.final_cc(),
                final_kl: r.final_kl(),
            })
            .collect(),
    };
    std::fs::write(
        out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    Ok(TrainSummary {
        out_dir: out_dir.to_path_buf(),
        history: outcome.history,
        rounds: outcome.rounds,
        state: outcome.state,
        data: outcome.data,
    })
}

/// Evaluates a checkpoint on `n` generated samples against a balanced test
/// set drawn fresh from `seed`, optionally writing a one-row CSV.
pub fn cmd_eval(
    checkpoint: &Path,
    n: usize,
    seed: Option<u64>,
    csv: Option<&Path>,
) -> Result<MetricsReport> {
    if n == 0 {
        return Err(Error::invalid("eval needs n > 0 samples"));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = ckpt.experiment()?;
    let spec = cfg.dataset.build()?;
    let mut train = cfg.train.clone();
    train.seed = derive_seed(seed.unwrap_or(cfg.train.seed), STREAM_FRESH_TEST);
    let data = TrainingData::prepare(&spec, &train, false)?;
    let eval = crate::trainer::EvalConfig {
        n_eval: n,
        ..cfg.eval.clone()
    };
    let report = evaluate(&ckpt.state, &data, &train, &eval)?;
    if let Some(path) = csv {
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "{}", EVAL_COLUMNS.join(","))?;
        writeln!(f, "{},{}", report.step, metrics_fields(&report).join(","))?;
        f.flush()?;
    }
    Ok(report)
}

/// Generated samples labeled with their latent mode, plus the oracle mode
/// of each sample under the training mixture.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub samples: Samples,
    pub oracle: Vec<usize>,
}

/// Samples `n` points; with `mode` set every latent code uses that mode.
pub fn sample_checkpoint(
    ckpt: &Checkpoint,
    n: usize,
    mode: Option<usize>,
    seed: u64,
) -> Result<SampleOutput> {
    if n == 0 {
        return Err(Error::invalid("sample needs n > 0"));
    }
    let cfg = ckpt.experiment()?;
    let spec = cfg.dataset.build()?;
    let state = &ckpt.state;
    let seed = derive_seed(seed, STREAM_SAMPLE);
    let (x, labels) = match mode {
        None => generate(state, n, cfg.train.slope, Embedding::Hard, seed)?,
        Some(i) => {
            let m = state.layout.modes();
            if i >= m {
                return Err(Error::invalid(format!(
                    "mode index {i} out of range for {m} modes"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = LatentNoise::draw(&mut rng, n, &state.layout)?;
            let y = vec![i; n];
            let z = embed_hard(&state.layout, &y, &noise.nu2)?;
            (state.nets.generate(&z)?, y)
        }
    };
    let oracle = oracle_mode_assign(&x, &spec)?;
    Ok(SampleOutput {
        samples: Samples { x, labels },
        oracle,
    })
}

/// Writes samples as CSV and optionally an SVG scatter colored by mode.
pub fn cmd_sample(
    checkpoint: &Path,
    n: usize,
    mode: Option<usize>,
    seed: u64,
    csv: &Path,
    svg: Option<&Path>,
) -> Result<SampleOutput> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let out = sample_checkpoint(&ckpt, n, mode, seed)?;
    save_samples_csv(csv, &out.samples)?;
    if let Some(path) = svg {
        let text = scatter_svg(
            &out.samples.x,
            &out.samples.labels,
            ckpt.state.layout.modes(),
        )?;
        std::fs::write(path, text)?;
    }
    Ok(out)
}

pub fn cmd_gradcheck(
    config_path: &Path,
    opts: &crate::autodiff::GradCheckOptions,
    batch: usize,
) -> Result<GradCheckSummary> {
    let cfg = ExperimentConfig::load(config_path)?;
    run_gradcheck(&cfg, opts, batch)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub steps: u64,
    pub batch_size: usize,
    pub seconds: f64,
    pub ms_per_step: f64,
}

/// Times full adversarial steps (forward and backward for d, g, h1, h2).
pub fn cmd_bench(cfg: &ExperimentConfig, steps: u64) -> Result<BenchReport> {
    if steps == 0 {
        return Err(Error::invalid("bench needs steps > 0"));
    }
    cfg.validate()?;
    let spec = cfg.dataset.build()?;
    let variant = cfg.variant()?;
    let data = TrainingData::prepare(&spec, &cfg.train, variant.uses_supervision())?;
    let labeled = if variant.uses_supervision() {
        data.labeled.as_ref()
    } else {
        None
    };
    let mut state = TrainerState::init(&cfg.model, &spec, &cfg.train)?;
    train_step(&mut state, &data, labeled, &cfg.train)?;
    let start = Instant::now();
    for _ in 0..steps {
        train_step(&mut state, &data, labeled, &cfg.train)?;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        steps,
        batch_size: cfg.train.batch_size,
        seconds,
        ms_per_step: 1e3 * seconds / steps as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: &str) -> ExperimentConfig {
        let extra = if mode == "V" {
            ""
        } else {
            "train.labeled_fraction = 0.05\n"
        };
        ExperimentConfig::parse(&format!(
            "mode = {mode}\ndataset.kind = ring\ndataset.k = 3\nmodel.g_hidden = 16\nmodel.d_hidden = 16\n\
             model.h1_hidden = 16\nmodel.h2_hidden = 8\ntrain.steps = 20\ntrain.batch_size = 16\n\
             train.dataset_size = 400\ntrain.pool_size = 200\ntrain.alpha_batch = 200\ntrain.alpha_steps = 5\n\
             train.retrain_epochs = 3\neval.interval = 10\neval.n_eval = 60\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn train_writes_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny("P");
        let s = train_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(s.history.len(), 2);
        let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_COLUMNS.join(","));
        assert_eq!(lines.len(), 3);
        assert!(lines[1..]
            .iter()
            .all(|l| l.split(',').count() == METRICS_COLUMNS.len()));
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap())
                .unwrap();
        assert_eq!(manifest.config_hash, cfg.content_hash());
        assert_eq!(manifest.rounds.len(), s.rounds.len());
        let resolved = std::fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(blob_hash(resolved.as_bytes()), manifest.config_hash);
        let ckpt = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ckpt.state, s.state);
    }

    #[test]
    fn checkpoint_version_checked() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny("V");
        let state =
            TrainerState::init(&cfg.model, &cfg.dataset.build().unwrap(), &cfg.train).unwrap();
        let json = Checkpoint::new(&cfg, state.clone()).to_json().unwrap();
        assert_eq!(Checkpoint::from_json(&json).unwrap().state, state);
        let bumped = json.replacen("\"version\":1", "\"version\":99", 1);
        assert!(matches!(
            Checkpoint::from_json(&bumped),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
        let path = dir.path().join("c.json");
        std::fs::write(&path, &bumped).unwrap();
        assert!(cmd_eval(&path, 10, None, None).is_err());
    }

    #[test]
    fn eval_and_sample_from_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny("V");
        let state =
            TrainerState::init(&cfg.model, &cfg.dataset.build().unwrap(), &cfg.train).unwrap();
        let path = dir.path().join(CHECKPOINT_FILE);
        Checkpoint::new(&cfg, state).save(&path).unwrap();

        assert!(cmd_eval(&path, 0, None, None).is_err());
        let a = cmd_eval(&path, 90, Some(3), Some(&dir.path().join("eval.csv"))).unwrap();
        let b = cmd_eval(&path, 90, Some(3), None).unwrap();
        assert_eq!(a, b);
        assert!(a.modes_covered.unwrap() <= 3);

        let csv = dir.path().join("s.csv");
        let svg = dir.path().join("s.svg");
        let one = cmd_sample(&path, 1, None, 0, &csv, Some(&svg)).unwrap();
        assert_eq!(one.samples.len(), 1);
        assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 2);
        let cond = cmd_sample(&path, 25, Some(2), 0, &csv, Some(&svg)).unwrap();
        assert!(cond.samples.labels.iter().all(|&y| y == 2));
        assert_eq!(
            std::fs::read_to_string(&svg)
                .unwrap()
                .matches("<circle")
                .count(),
            25
        );
        assert!(cmd_sample(&path, 5, Some(3), 0, &csv, None).is_err());
    }

    #[test]
    fn bench_times_steps() {
        let r = cmd_bench(&tiny("S"), 3).unwrap();
        assert_eq!(r.steps, 3);
        assert!(r.ms_per_step > 0.0);
    }
}
