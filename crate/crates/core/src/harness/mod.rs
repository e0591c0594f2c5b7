//! Experiment driver: build datasets, simulate the client, attack, score and
//! persist results for every point of a sweep.

pub mod idx;
pub mod output;
pub mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{self, AttackConfig, HistoryEntry};
use crate::fedsim::{self, ClientConfig};
use crate::image::ImageBatch;
use crate::metrics::CORRUPTION_PSNR;
use crate::model::{self, ModelSpec};

pub use idx::{load_idx, IdxError};
pub use output::RunRecord;
pub use synth::{synth_dataset, SynthKind};

/// Environment variable consulted for the base seed when none is given.
pub const SEED_ENV: &str = "GRADINV_SEED";

/// The ablation grid: SME, PR only, NLP only, full NL-SME.
pub const ABLATION_VARIANTS: [&str; 4] = ["sme", "nlsme-pr", "nlsme-nlp", "nlsme"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("nothing to write: no run records")]
    NoRecords,
    #[error("worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic {
        pattern: SynthKind,
        seed: u64,
    },
    /// Client `trial` uses images `[offset + trial·N, offset + (trial+1)·N)`,
    /// wrapping around the file.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        offset: usize,
    },
}

impl DatasetSource {
    pub fn label(&self) -> String {
        match self {
            DatasetSource::Synthetic { pattern, .. } => pattern.name().to_string(),
            DatasetSource::Idx { images, .. } => images
                .file_stem()
                .map(|s| s.to_string_lossy().replace(['_', ','], "-"))
                .unwrap_or_else(|| "idx".into()),
        }
    }
}

/// Everything one `sweep` needs. Stored on disk as a flat TOML document:
/// model, client and attack fields sit at top level next to the sweep axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(flatten)]
    pub spec: ModelSpec,
    #[serde(flatten)]
    pub client: ClientConfig,
    #[serde(flatten)]
    pub attack: AttackConfig,
    /// Sweep axes; an empty axis uses the single base value above.
    pub sweep_epochs: Vec<usize>,
    pub sweep_local_size: Vec<usize>,
    pub sweep_batch_size: Vec<usize>,
    pub sweep_rounds: Vec<usize>,
    /// Attack labels: `dlg`, `ig`, `sme`, `nlsme`, `nlsme-nlp`, `nlsme-pr`.
    pub sweep_variants: Vec<String>,
    pub trials: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Upper bound on sweep points × trials.
    pub max_runs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic { pattern: SynthKind::GaussianBlobs, seed: 0 },
            spec: ModelSpec::default(),
            client: ClientConfig::default(),
            attack: AttackConfig::default(),
            sweep_epochs: Vec::new(),
            sweep_local_size: Vec::new(),
            sweep_batch_size: Vec::new(),
            sweep_rounds: Vec::new(),
            sweep_variants: Vec::new(),
            trials: 1,
            seed: 0,
            output_dir: PathBuf::from("out"),
            max_runs: 10_000,
        }
    }
}

/// One cell of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub epochs: usize,
    pub local_size: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub variant: String,
    pub trial: usize,
}

impl ExperimentConfig {
    /// Parses a config document, rejecting unknown keys.
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let table: toml::Table = text.parse()?;
        let known = known_keys();
        if let Some(k) = table.keys().find(|k| !known.contains(k.as_str())) {
            return Err(HarnessError::Config(format!("unknown key `{k}`")));
        }
        let cfg: ExperimentConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn axis(values: &[usize], base: usize) -> Vec<usize> {
        if values.is_empty() {
            vec![base]
        } else {
            values.to_vec()
        }
    }

    pub fn variants(&self) -> Vec<String> {
        if self.sweep_variants.is_empty() {
            vec![self.attack.label()]
        } else {
            self.sweep_variants.clone()
        }
    }

    /// Sweep grid in output order: E, N, B, R, trial, variant (innermost).
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &epochs in &Self::axis(&self.sweep_epochs, self.client.epochs) {
            for &local_size in &Self::axis(&self.sweep_local_size, self.client.local_size) {
                for &batch_size in &Self::axis(&self.sweep_batch_size, self.client.batch_size) {
                    for &rounds in &Self::axis(&self.sweep_rounds, self.client.rounds) {
                        for trial in 0..self.trials {
                            for variant in self.variants() {
                                out.push(SweepPoint { epochs, local_size, batch_size, rounds, variant, trial });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.spec.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.trials == 0 {
            return Err(HarnessError::Config("trials must be at least 1".into()));
        }
        for v in self.variants() {
            let cfg = self
                .attack
                .clone()
                .with_label(&v)
                .ok_or_else(|| HarnessError::Config(format!("unknown variant `{v}`")))?;
            cfg.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        let runs = self.points().len();
        if runs > self.max_runs {
            return Err(HarnessError::Config(format!(
                "sweep has {runs} runs, above max_runs = {}",
                self.max_runs
            )));
        }
        if let DatasetSource::Synthetic { .. } = self.dataset {
            if self.spec.num_classes == 0 {
                return Err(HarnessError::Config("num_classes must be positive".into()));
            }
        }
        Ok(())
    }

    /// Base seed for `trial`: every variant of a trial sees the same data,
    /// initial model and dummy initialization.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_add(trial as u64)
    }
}

fn known_keys() -> BTreeSet<String> {
    let mut keys: BTreeSet<String> = match toml::Value::try_from(ExperimentConfig::default()) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => BTreeSet::new(),
    };
    // Optional or skipped fields absent from the serialized default.
    keys.insert("optimizer".into());
    keys
}

/// A finished (or failed) run with the data needed to write its outputs.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub truth: ImageBatch,
    /// Reconstruction reordered to line up with `truth`.
    pub reconstruction: Option<ImageBatch>,
    pub history: Vec<HistoryEntry>,
}

/// Client data for one trial.
pub fn client_dataset(cfg: &ExperimentConfig, n: usize, trial: usize) -> Result<ImageBatch, HarnessError> {
    let seed = cfg.trial_seed(trial);
    let data = match &cfg.dataset {
        DatasetSource::Synthetic { pattern, seed: data_seed } => {
            synth_dataset(*pattern, n, cfg.spec.num_classes, cfg.spec.input_dims, data_seed.wrapping_add(seed))
        }
        DatasetSource::Idx { images, labels, offset } => {
            let all = load_idx(images, Some(labels))?;
            if all.is_empty() {
                return Err(HarnessError::Config("IDX file holds no images".into()));
            }
            let idx: Vec<usize> = (0..n).map(|k| (offset + trial * n + k) % all.len()).collect();
            all.select(&idx)
        }
    };
    if data.dims() != cfg.spec.input_dims {
        return Err(HarnessError::Config(format!(
            "dataset images are {:?} but input_dims is {:?}",
            data.dims(),
            cfg.spec.input_dims
        )));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= cfg.spec.num_classes) {
        return Err(HarnessError::Config(format!("label {bad} exceeds num_classes")));
    }
    Ok(data)
}

/// Runs a single sweep point. Failures are folded into the record.
pub fn run_point(cfg: &ExperimentConfig, point: &SweepPoint) -> RunOutcome {
    let start = Instant::now();
    let seed = cfg.trial_seed(point.trial);
    let attack_cfg = cfg.attack.clone().with_label(&point.variant).unwrap_or_else(|| cfg.attack.clone());
    let mut record = RunRecord {
        dataset: cfg.dataset.label(),
        epochs: point.epochs,
        local_size: point.local_size,
        batch_size: point.batch_size,
        rounds: point.rounds,
        variant: attack_cfg.variant.name().to_string(),
        use_nlp: attack_cfg.use_nlp && attack_cfg.variant == attack::Variant::NlSme,
        use_pr: attack_cfg.use_pr && attack_cfg.variant == attack::Variant::NlSme,
        trial: point.trial,
        seed,
        lsim: f64::NAN,
        psnr: f64::NAN,
        ssim: f64::NAN,
        wall_minutes: 0.0,
        param_count: cfg.spec.param_count(),
        corrupted: true,
        mem_bytes: 0,
        nonlinearity: f64::NAN,
        error: String::new(),
    };

    let truth = match client_dataset(cfg, point.local_size, point.trial) {
        Ok(d) => d,
        Err(e) => {
            record.error = e.to_string();
            let empty = ImageBatch::new(cfg.spec.input_dims, Vec::new(), Vec::new()).expect("empty batch");
            return RunOutcome { record, truth: empty, reconstruction: None, history: Vec::new() };
        }
    };

    let outcome = (|| -> Result<(attack::AttackResult, f64), String> {
        let client = ClientConfig {
            epochs: point.epochs,
            local_size: point.local_size,
            batch_size: point.batch_size,
            rounds: point.rounds,
            shuffle_seed: seed,
            ..cfg.client.clone()
        };
        let w_init = model::init_params(&cfg.spec, seed);
        let sim = fedsim::simulate(&cfg.spec, &w_init, &truth, &client).map_err(|e| e.to_string())?;
        let nonlinearity = fedsim::trajectory_nonlinearity(&sim.trajectory);
        let acfg = AttackConfig { seed, ..attack_cfg.clone() };
        let result = attack::run_attack(&sim.observation, &acfg, &truth.labels, Some(&truth)).map_err(|e| e.to_string())?;
        Ok((result, nonlinearity))
    })();

    record.wall_minutes = start.elapsed().as_secs_f64() / 60.0;
    match outcome {
        Ok((result, nonlinearity)) => {
            let quality = result.quality.as_ref().expect("ground truth supplied");
            record.lsim = result.final_lsim;
            record.psnr = quality.mean_psnr;
            record.ssim = quality.mean_ssim;
            record.corrupted = quality.mean_psnr < CORRUPTION_PSNR;
            record.mem_bytes = result.peak_param_mem_estimate;
            record.nonlinearity = nonlinearity;
            let mut order = vec![0; truth.len()];
            for (r, &g) in quality.permutation.iter().enumerate() {
                order[g] = r;
            }
            let reconstruction = Some(result.reconstruction.select(&order));
            RunOutcome { record, truth, reconstruction, history: result.history }
        }
        Err(e) => {
            log::warn!("run {} failed: {e}", record.run_id());
            record.error = e;
            RunOutcome { record, truth, reconstruction: None, history: Vec::new() }
        }
    }
}

/// Runs every sweep point on `jobs` workers; results come back in sweep
/// order regardless of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<RunOutcome>, HarnessError> {
    cfg.validate()?;
    let points = cfg.points();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    Ok(pool.install(|| {
        points
            .par_iter()
            .map(|p| {
                let out = run_point(cfg, p);
                log::info!(
                    "{}: lsim={:.5} psnr={:.2} ssim={:.3}",
                    out.record.run_id(),
                    out.record.lsim,
                    out.record.psnr,
                    out.record.ssim
                );
                out
            })
            .collect()
    }))
}

/// Writes `results.csv`, `{runid}_history.csv` and matched
/// `{runid}_{idx}_recon.pgm` / `{runid}_{idx}_truth.pgm` pairs.
pub fn emit_outputs(outcomes: &[RunOutcome], output_dir: &Path) -> Result<(), HarnessError> {
    if outcomes.is_empty() {
        return Err(HarnessError::NoRecords);
    }
    fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
    let records: Vec<RunRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    output::write_results_csv(&output_dir.join("results.csv"), &records)?;
    for o in outcomes {
        let id = o.record.run_id();
        if !o.history.is_empty() {
            output::write_history_csv(&output_dir.join(format!("{id}_history.csv")), &o.history)?;
        }
        let Some(recon) = &o.reconstruction else { continue };
        for i in 0..o.truth.len() {
            let p = output_dir.join(format!("{id}_{i}_recon.pgm"));
            output::write_image_pgm(&p, recon, i).map_err(io_err(&p))?;
            let p = output_dir.join(format!("{id}_{i}_truth.pgm"));
            output::write_image_pgm(&p, &o.truth, i).map_err(io_err(&p))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flat_document_parses() {
        let text = r#"
            dataset = { kind = "synthetic", pattern = "stripes", seed = 3 }
            input_dims = [1, 8, 8]
            hidden_sizes = [8]
            num_classes = 3
            activation = "tanh"
            epochs = 2
            local_size = 6
            batch_size = 3
            lr = 0.05
            optimizer = { kind = "adamw", beta1 = 0.9, beta2 = 0.99, eps = 1e-8, weight_decay = 0.0 }
            variant = "sme"
            iterations = 10
            sweep_variants = ["sme", "nlsme"]
            trials = 2
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.spec.hidden_sizes, vec![8]);
        assert_eq!(cfg.client.local_size, 6);
        assert_eq!(cfg.attack.iterations, 10);
        assert!(matches!(cfg.client.optimizer, crate::fedsim::OptimizerKind::AdamW { beta2, .. } if beta2 == 0.99));
        assert_eq!(cfg.points().len(), 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("epoch = 3").unwrap_err();
        assert!(err.to_string().contains("unknown key `epoch`"));
    }

    #[test]
    fn sweep_cap_is_enforced() {
        let cfg = ExperimentConfig { sweep_epochs: vec![1, 2, 3], trials: 4, max_runs: 10, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig { max_runs: 12, ..cfg };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn sweep_counts_rows() {
        let cfg = ExperimentConfig {
            sweep_epochs: vec![1],
            sweep_local_size: vec![10],
            sweep_batch_size: vec![5],
            sweep_variants: vec!["sme".into(), "nlsme".into()],
            trials: 1,
            ..Default::default()
        };
        assert_eq!(cfg.points().len(), 2);
    }
}
