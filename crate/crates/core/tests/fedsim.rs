use gradinv_core::fedsim::{self, local_train, run_rounds, trajectory_nonlinearity};
use gradinv_core::harness::{synth_dataset, SynthKind};
use gradinv_core::model::{self, init_params};
use gradinv_core::{ClientConfig, ImageBatch, ModelSpec, OptimizerKind, ParamVector};

fn setup(n: usize) -> (ModelSpec, ParamVector, ImageBatch) {
    let spec = ModelSpec::new((1, 4, 4), vec![6], 3);
    let w0 = init_params(&spec, 5);
    let data = synth_dataset(SynthKind::GaussianBlobs, n, 3, (1, 4, 4), 2);
    (spec, w0, data)
}

fn client(epochs: usize, n: usize, b: usize) -> ClientConfig {
    ClientConfig { epochs, local_size: n, batch_size: b, lr: 0.1, ..Default::default() }
}

#[test]
fn single_full_batch_step_is_one_gradient_step() {
    let (spec, w0, data) = setup(4);
    let run = local_train(&spec, &w0, &data, &client(1, 4, 4)).unwrap();
    let g = model::grad_params(&spec, &w0, &data).unwrap();
    for ((a, w), gi) in run.wt.iter().zip(w0.iter()).zip(g.iter()) {
        assert!((a - (w - 0.1 * gi)).abs() < 1e-12);
    }
    assert_eq!(run.trajectory.len(), 2);
}

#[test]
fn step_count_and_trajectory_length() {
    let (spec, w0, data) = setup(50);
    let cfg = client(20, 50, 10);
    assert_eq!(cfg.local_steps(), 100);
    let run = local_train(&spec, &w0, &data, &cfg).unwrap();
    assert_eq!(run.trajectory.len(), 101);
    assert_eq!(run.trajectory[0], w0);
    assert_eq!(run.trajectory.last().unwrap(), &run.wt);

    let ragged = client(3, 7, 3);
    assert_eq!(ragged.local_steps(), 9);
}

#[test]
fn zero_learning_rate_is_identity() {
    let (spec, w0, data) = setup(6);
    let cfg = ClientConfig { lr: 0.0, ..client(3, 6, 2) };
    let run = local_train(&spec, &w0, &data, &cfg).unwrap();
    assert_eq!(run.wt, w0);
    assert_eq!(trajectory_nonlinearity(&run.trajectory), 0.0);
}

#[test]
fn rounds_chain() {
    let (spec, w0, data) = setup(6);
    let cfg = ClientConfig { rounds: 10, ..client(2, 6, 3) };
    let obs = run_rounds(&spec, &w0, &data, &cfg).unwrap();
    assert_eq!(obs.len(), 10);
    assert_eq!(obs[0].w0, w0);
    for r in 1..10 {
        assert_eq!(obs[r].w0, obs[r - 1].wt);
    }
    let sim = fedsim::simulate(&spec, &w0, &data, &cfg).unwrap();
    assert_eq!(sim.observation, obs[9]);
    assert_eq!(sim.trajectory[0], obs[9].w0);
}

#[test]
fn warmup_rounds_shift_the_observed_round() {
    let (spec, w0, data) = setup(6);
    let long = ClientConfig { rounds: 3, ..client(1, 6, 3) };
    let warm = ClientConfig { rounds: 1, warmup_rounds: 2, ..client(1, 6, 3) };
    let a = fedsim::simulate(&spec, &w0, &data, &long).unwrap();
    let b = fedsim::simulate(&spec, &w0, &data, &warm).unwrap();
    assert_eq!(a.observation.w0, b.observation.w0);
    assert_eq!(a.observation.wt, b.observation.wt);
}

#[test]
fn adamw_matches_scalar_oracle() {
    let (spec, w0, data) = setup(4);
    let (beta1, beta2, eps, wd, lr) = (0.9, 0.999, 1e-8, 0.01, 0.05);
    let cfg = ClientConfig {
        lr,
        optimizer: OptimizerKind::AdamW { beta1, beta2, eps, weight_decay: wd },
        ..client(3, 4, 4)
    };
    let run = local_train(&spec, &w0, &data, &cfg).unwrap();

    let mut w = w0.to_vec();
    let (mut m, mut v) = (vec![0.0; w.len()], vec![0.0; w.len()]);
    for k in 1..=3 {
        let g = model::grad_params(&spec, &ParamVector::new(w.clone()), &data).unwrap();
        for i in 0..w.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - beta1.powi(k));
            let vh = v[i] / (1.0 - beta2.powi(k));
            w[i] -= lr * (mh / (vh.sqrt() + eps) + wd * w[i]);
        }
    }
    for (a, b) in run.wt.iter().zip(&w) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn training_is_deterministic_and_seed_sensitive() {
    let (spec, w0, data) = setup(8);
    let cfg = client(3, 8, 2);
    let a = local_train(&spec, &w0, &data, &cfg).unwrap();
    let b = local_train(&spec, &w0, &data, &cfg).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
    let c = local_train(&spec, &w0, &data, &ClientConfig { shuffle_seed: 1, ..cfg }).unwrap();
    assert_ne!(a.wt, c.wt);
}

#[test]
fn invalid_configs_are_rejected() {
    let (spec, w0, data) = setup(4);
    assert!(local_train(&spec, &w0, &data, &client(1, 4, 5)).is_err());
    assert!(local_train(&spec, &w0, &data, &client(0, 4, 2)).is_err());
    assert!(local_train(&spec, &w0, &data, &client(1, 5, 2)).is_err());
    assert!(local_train(&spec, &w0, &data, &ClientConfig { lr: f64::NAN, ..client(1, 4, 2) }).is_err());
    assert!(run_rounds(&spec, &w0, &data, &ClientConfig { rounds: 0, ..client(1, 4, 2) }).is_err());
}

#[test]
fn nonlinearity_of_known_paths() {
    let p = |v: &[f64]| ParamVector::new(v.to_vec());
    let straight = [p(&[0.0, 0.0]), p(&[1.0, 0.0]), p(&[2.0, 0.0])];
    assert_eq!(trajectory_nonlinearity(&straight), 0.0);
    let bent = [p(&[0.0, 0.0]), p(&[1.0, 1.0]), p(&[2.0, 0.0])];
    assert!((trajectory_nonlinearity(&bent) - 0.5).abs() < 1e-12);
    let closed = [p(&[0.0, 0.0]), p(&[1.0, 1.0]), p(&[0.0, 0.0])];
    assert_eq!(trajectory_nonlinearity(&closed), 0.0);
}

#[test]
fn one_round_equals_local_train_and_frozen_rounds_stay_put() {
    let (spec, w0, data) = setup(6);
    let cfg = client(2, 6, 3);
    let run = local_train(&spec, &w0, &data, &cfg).unwrap();
    let obs = run_rounds(&spec, &w0, &data, &cfg).unwrap();
    assert_eq!(obs.len(), 1);
    assert_eq!((&obs[0].w0, &obs[0].wt), (&w0, &run.wt));

    let frozen = ClientConfig { lr: 0.0, rounds: 2, ..cfg };
    for o in run_rounds(&spec, &w0, &data, &frozen).unwrap() {
        assert_eq!(o.w0, o.wt);
    }
}

#[test]
fn long_training_bends_more_than_one_step() {
    let (spec, w0, data) = setup(10);
    for seed in 0..3 {
        let short = ClientConfig { shuffle_seed: seed, ..client(1, 10, 10) };
        let long = ClientConfig { shuffle_seed: seed, ..client(20, 10, 2) };
        let a = trajectory_nonlinearity(&local_train(&spec, &w0, &data, &short).unwrap().trajectory);
        let b = trajectory_nonlinearity(&local_train(&spec, &w0, &data, &long).unwrap().trajectory);
        assert!(b > a, "seed {seed}: {b} <= {a}");
    }
}
