//! FedAVG client simulation: `T = E·⌈N/B⌉` local optimizer steps from `w0`
//! to `wT`, and the `(w0, wT, N)` observation handed to the attacker.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageBatch;
use crate::model::{self, ModelError, ModelSpec, ParamVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("invalid client config: {0}")]
    InvalidConfig(String),
    #[error("client dataset has {actual} samples, config says N = {expected}")]
    DatasetSize { expected: usize, actual: usize },
    #[error("non-finite training loss at local step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
#[derive(Default)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    /// `E`
    pub epochs: usize,
    /// `N`
    pub local_size: usize,
    /// `B`
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub shuffle_seed: u64,
    /// `R`: observed rounds; the attack targets the last one.
    pub rounds: usize,
    /// Unobserved training rounds run before the first observed round.
    pub warmup_rounds: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            epochs: 5,
            local_size: 10,
            batch_size: 5,
            lr: 0.1,
            optimizer: OptimizerKind::Sgd,
            shuffle_seed: 0,
            rounds: 1,
            warmup_rounds: 0,
        }
    }
}

impl ClientConfig {
    pub fn batches_per_epoch(&self) -> usize {
        self.local_size.div_ceil(self.batch_size.max(1))
    }

    /// `T = E·⌈N/B⌉`
    pub fn local_steps(&self) -> usize {
        self.epochs * self.batches_per_epoch()
    }

    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: &str| Err(FedError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.local_size == 0 || self.epochs == 0 {
            return bad("E, N and B must be positive");
        }
        if self.batch_size > self.local_size {
            return bad("B must not exceed N");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.rounds == 0 {
            return bad("R must be at least 1");
        }
        Ok(())
    }
}

/// What the attacker sees of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub w0: ParamVector,
    pub wt: ParamVector,
    pub n: usize,
    pub spec: ModelSpec,
    pub client: ClientConfig,
}

impl Observation {
    /// `w0 − wT`
    pub fn delta(&self) -> ParamVector {
        self.w0.sub(&self.wt)
    }
}

/// Diagnostic output of a local training run; never passed to attacks.
#[derive(Debug, Clone)]
pub struct LocalRun {
    pub wt: ParamVector,
    /// `T + 1` points, `w0` first.
    pub trajectory: Vec<ParamVector>,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

/// Runs `E` epochs of minibatch training on `dataset` from `w0`.
///
/// Epoch `e` shuffles with seed `shuffle_seed + e` and splits into
/// `⌈N/B⌉` batches, the last possibly short.
pub fn local_train(
    spec: &ModelSpec,
    w0: &ParamVector,
    dataset: &ImageBatch,
    cfg: &ClientConfig,
) -> Result<LocalRun, FedError> {
    train_from_epoch(spec, w0, dataset, cfg, 0)
}

fn train_from_epoch(
    spec: &ModelSpec,
    w0: &ParamVector,
    dataset: &ImageBatch,
    cfg: &ClientConfig,
    epoch_offset: usize,
) -> Result<LocalRun, FedError> {
    cfg.validate()?;
    if dataset.len() != cfg.local_size {
        return Err(FedError::DatasetSize { expected: cfg.local_size, actual: dataset.len() });
    }
    let mut w = w0.clone();
    let mut trajectory = Vec::with_capacity(cfg.local_steps() + 1);
    trajectory.push(w.clone());
    let mut adam = AdamState { m: vec![0.0; w.len()], v: vec![0.0; w.len()], step: 0 };
    let mut order: Vec<usize> = (0..cfg.local_size).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let seed = cfg.shuffle_seed.wrapping_add((epoch_offset + epoch) as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = dataset.select(chunk);
            let (loss, grad) = model::loss_and_grad(spec, &w, &batch)?;
            if !loss.is_finite() {
                return Err(FedError::NonFiniteLoss { step });
            }
            apply_update(&mut w, &grad, cfg, &mut adam);
            if !w.all_finite() {
                return Err(FedError::NonFiniteLoss { step });
            }
            trajectory.push(w.clone());
            step += 1;
        }
    }
    Ok(LocalRun { wt: w, trajectory })
}

fn apply_update(w: &mut ParamVector, grad: &ParamVector, cfg: &ClientConfig, adam: &mut AdamState) {
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for (p, g) in w.iter_mut().zip(grad.iter()) {
                *p -= cfg.lr * g;
            }
        }
        OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } => {
            adam.step += 1;
            let c1 = 1.0 - beta1.powi(adam.step);
            let c2 = 1.0 - beta2.powi(adam.step);
            for i in 0..w.len() {
                let g = grad[i];
                adam.m[i] = beta1 * adam.m[i] + (1.0 - beta1) * g;
                adam.v[i] = beta2 * adam.v[i] + (1.0 - beta2) * g * g;
                let update = (adam.m[i] / c1) / ((adam.v[i] / c2).sqrt() + eps);
                w[i] -= cfg.lr * (update + weight_decay * w[i]);
            }
        }
    }
}

/// Chains `R` local trainings (one client, so aggregation is the identity)
/// and returns one observation per round.
pub fn run_rounds(
    spec: &ModelSpec,
    w_init: &ParamVector,
    dataset: &ImageBatch,
    cfg: &ClientConfig,
) -> Result<Vec<Observation>, FedError> {
    Ok(simulate_rounds(spec, w_init, dataset, cfg, 0)?.0)
}

fn simulate_rounds(
    spec: &ModelSpec,
    w_init: &ParamVector,
    dataset: &ImageBatch,
    cfg: &ClientConfig,
    first_round: usize,
) -> Result<(Vec<Observation>, Option<LocalRun>), FedError> {
    cfg.validate()?;
    let mut w = w_init.clone();
    let mut observations = Vec::with_capacity(cfg.rounds);
    let mut last = None;
    for r in 0..cfg.rounds {
        let round = first_round + r;
        let run = train_from_epoch(spec, &w, dataset, cfg, round * cfg.epochs)?;
        observations.push(Observation {
            w0: w.clone(),
            wt: run.wt.clone(),
            n: cfg.local_size,
            spec: spec.clone(),
            client: cfg.clone(),
        });
        w = run.wt.clone();
        last = Some(run);
    }
    Ok((observations, last))
}

/// Warmup rounds followed by `R` observed rounds; the returned observation
/// and trajectory belong to the final round.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub observation: Observation,
    pub trajectory: Vec<ParamVector>,
    pub rounds: Vec<Observation>,
}

pub fn simulate(
    spec: &ModelSpec,
    w_init: &ParamVector,
    dataset: &ImageBatch,
    cfg: &ClientConfig,
) -> Result<Simulation, FedError> {
    cfg.validate()?;
    let mut w = w_init.clone();
    for round in 0..cfg.warmup_rounds {
        w = train_from_epoch(spec, &w, dataset, cfg, round * cfg.epochs)?.wt;
    }
    let (rounds, last) = simulate_rounds(spec, &w, dataset, cfg, cfg.warmup_rounds)?;
    let observation = rounds.last().cloned().expect("at least one round");
    let trajectory = last.expect("at least one round").trajectory;
    Ok(Simulation { observation, trajectory, rounds })
}

/// Largest perpendicular distance from a trajectory point to the line
/// through `w0` and `wT`, divided by `‖wT − w0‖`. Zero for straight paths
/// and, by convention, when `w0 = wT`.
pub fn trajectory_nonlinearity(trajectory: &[ParamVector]) -> f64 {
    let (Some(first), Some(last)) = (trajectory.first(), trajectory.last()) else {
        return 0.0;
    };
    if trajectory.len() < 3 {
        return 0.0;
    }
    let chord = last.sub(first);
    let chord_norm = chord.norm();
    if chord_norm == 0.0 {
        return 0.0;
    }
    let unit: Vec<f64> = chord.iter().map(|c| c / chord_norm).collect();
    trajectory
        .iter()
        .map(|w| {
            let rel = w.sub(first);
            let along: f64 = rel.iter().zip(&unit).map(|(r, u)| r * u).sum();
            let perp_sq: f64 = rel.iter().zip(&unit).map(|(r, u)| (r - along * u).powi(2)).sum();
            perp_sq.max(0.0).sqrt() / chord_norm
        })
        .fold(0.0, f64::max)
}
