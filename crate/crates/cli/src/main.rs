use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use gradinv_core::attack::{self, AttackConfig};
use gradinv_core::fedsim::{self, ClientConfig, Observation};
use gradinv_core::harness::{self, output, ExperimentConfig, RunOutcome, ABLATION_VARIANTS, SEED_ENV};
use gradinv_core::model;

#[derive(Parser)]
#[command(name = "gradinv", version, about = "Gradient inversion attacks on simulated FedAVG clients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one client locally and write the attacker's observation.
    Simulate(Common),
    /// Attack a single client update: either a saved observation or a fresh
    /// simulation of the configured base point.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Observation written by `simulate`.
        #[arg(long)]
        observation: Option<PathBuf>,
    },
    /// Run every point of the configured sweep.
    Sweep(Common),
    /// Run the four-variant ablation (SME, NLP only, PR only, NL-SME).
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed (overrides `seed`).
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Parallel workers.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// What `simulate` writes and `attack --observation` reads.
#[derive(Serialize, Deserialize)]
struct SavedObservation {
    observation: Observation,
    labels: Vec<usize>,
}

fn simulate(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let data = harness::client_dataset(&cfg, cfg.client.local_size, 0)?;
    let seed = cfg.trial_seed(0);
    let client = ClientConfig { shuffle_seed: seed, ..cfg.client.clone() };
    let sim = fedsim::simulate(&cfg.spec, &model::init_params(&cfg.spec, seed), &data, &client)?;
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let saved = SavedObservation { observation: sim.observation, labels: data.labels.clone() };
    let path = cfg.output_dir.join("observation.json");
    fs::write(&path, serde_json::to_vec(&saved)?).with_context(|| format!("writing {}", path.display()))?;
    for i in 0..data.len() {
        output::write_image_pgm(&cfg.output_dir.join(format!("client_{i}_truth.pgm")), &data, i)?;
    }
    let summary = json!({
        "local_steps": client.local_steps(),
        "param_count": cfg.spec.param_count(),
        "update_norm": saved.observation.delta().norm(),
        "nonlinearity": fedsim::trajectory_nonlinearity(&sim.trajectory),
    });
    println!("{summary}");
    Ok(())
}

fn attack_saved(common: &Common, path: &Path) -> Result<()> {
    let cfg = common.load()?;
    let saved: SavedObservation =
        serde_json::from_slice(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)?;
    let acfg = AttackConfig { seed: cfg.trial_seed(0), ..cfg.attack.clone() };
    let result = attack::run_attack(&saved.observation, &acfg, &saved.labels, None)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let id = format!("{}_t0", acfg.label());
    output::write_history_csv(&cfg.output_dir.join(format!("{id}_history.csv")), &result.history)?;
    for i in 0..result.reconstruction.len() {
        output::write_image_pgm(&cfg.output_dir.join(format!("{id}_{i}_recon.pgm")), &result.reconstruction, i)?;
    }
    println!(
        "{}",
        json!({ "variant": acfg.label(), "lsim": result.final_lsim, "best_iteration": result.best_iteration })
    );
    Ok(())
}

fn sweep(cfg: ExperimentConfig, jobs: usize) -> Result<()> {
    let outcomes = harness::run_experiment(&cfg, jobs)?;
    harness::emit_outputs(&outcomes, &cfg.output_dir)?;
    report(&outcomes);
    Ok(())
}

fn report(outcomes: &[RunOutcome]) {
    for o in outcomes {
        let r = &o.record;
        if r.error.is_empty() {
            println!("{}  lsim={:.3e}  psnr={:.2}  ssim={:.3}", r.run_id(), r.lsim, r.psnr, r.ssim);
        } else {
            println!("{}  failed: {}", r.run_id(), r.error);
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Simulate(common) => simulate(&common),
        Command::Attack { common, observation: Some(p) } => attack_saved(&common, &p),
        Command::Attack { common, observation: None } => {
            let mut cfg = common.load()?;
            let label = cfg.attack.label();
            cfg.sweep_epochs.clear();
            cfg.sweep_local_size.clear();
            cfg.sweep_batch_size.clear();
            cfg.sweep_rounds.clear();
            cfg.sweep_variants = vec![label];
            cfg.trials = 1;
            sweep(cfg, common.jobs)
        }
        Command::Sweep(common) => sweep(common.load()?, common.jobs),
        Command::Ablate(common) => {
            let mut cfg = common.load()?;
            if !cfg.sweep_variants.is_empty() && cfg.sweep_variants != ABLATION_VARIANTS {
                log::warn!("ablate replaces sweep_variants with {ABLATION_VARIANTS:?}");
            }
            cfg.sweep_variants = ABLATION_VARIANTS.iter().map(|s| s.to_string()).collect();
            cfg.validate()?;
            sweep(cfg, common.jobs)
        }
    }
}
