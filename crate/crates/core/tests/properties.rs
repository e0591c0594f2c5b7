use proptest::prelude::*;

use gradinv_core::attack::{control_reg, control_reg_grad, cosine_direction_loss, dvec_scale, AttackState};
use gradinv_core::fedsim::{local_train, Observation};
use gradinv_core::harness::idx::{encode_images, encode_labels, parse_images, parse_labels};
use gradinv_core::harness::output::{decode_pgm, encode_pgm};
use gradinv_core::harness::{synth_dataset, SynthKind};
use gradinv_core::metrics::{hungarian, psnr, ssim};
use gradinv_core::model::init_params;
use gradinv_core::{BezierTrajectory, ClientConfig, ImageBatch, LinearTrajectory, ModelSpec};

fn vec_pair(len: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    len.prop_flat_map(|n| (prop::collection::vec(-5.0..5.0f64, n), prop::collection::vec(-5.0..5.0f64, n)))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_loss_is_scale_invariant((delta, g) in vec_pair(2..20), c in 0.01..100.0f64) {
        prop_assume!(delta.iter().any(|v| v.abs() > 1e-3) && g.iter().any(|v| v.abs() > 1e-3));
        let base = cosine_direction_loss(&delta, &g).unwrap();
        let ones = vec![c; g.len()];
        let scaled = dvec_scale(&g, &ones).unwrap();
        prop_assert!((cosine_direction_loss(&delta, &scaled).unwrap() - base).abs() < 1e-12);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&base));
    }

    #[test]
    fn bezier_hits_endpoints_and_reduces_to_chord((w0, wt) in vec_pair(1..12), t in 0.0..1.0f64) {
        let p1: Vec<f64> = w0.iter().zip(&wt).map(|(a, b)| 0.5 * (a + b)).collect();
        let at = |t| BezierTrajectory::new(&w0, &wt, &p1, t).eval();
        prop_assert_eq!(at(0.0).to_vec(), w0.clone());
        prop_assert_eq!(at(1.0).to_vec(), wt.clone());
        let line = LinearTrajectory::new(&w0, &wt, t).eval();
        for (a, b) in at(t).iter().zip(line.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bezier_derivatives_match_finite_differences(
        (w0, wt) in vec_pair(1..8),
        offsets in prop::collection::vec(-1.0..1.0f64, 8),
        t in 0.05..0.95f64,
    ) {
        let p1: Vec<f64> = w0.iter().zip(&wt).zip(&offsets).map(|((a, b), o)| 0.5 * (a + b) + o).collect();
        let h = 1e-6;
        let c = BezierTrajectory::new(&w0, &wt, &p1, t);
        let (p, m) = (BezierTrajectory::new(&w0, &wt, &p1, t + h).eval(), BezierTrajectory::new(&w0, &wt, &p1, t - h).eval());
        for ((d, a), b) in c.d_t().iter().zip(p.iter()).zip(m.iter()) {
            prop_assert!((d - (a - b) / (2.0 * h)).abs() < 1e-6);
        }
        prop_assert!((c.d_p1_coeff() - 2.0 * t * (1.0 - t)).abs() < 1e-15);
    }

    #[test]
    fn projection_is_idempotent(t in -3.0..3.0f64, d in prop::collection::vec(-20.0..20.0f64, 4), px in prop::collection::vec(-2.0..2.0f64, 4)) {
        let spec = ModelSpec::new((1, 2, 2), vec![], 2);
        let w0 = init_params(&spec, 0);
        let mut wt = w0.clone();
        wt[0] += 1.0;
        let obs = Observation { w0, wt, n: 1, spec, client: ClientConfig::default() };
        let mut s = AttackState::from_dummy(&obs, ImageBatch::new((1, 2, 2), px, vec![0]).unwrap());
        s.t = t;
        s.d[..4].copy_from_slice(&d);
        s.project((0.1, 10.0));
        let once = s.clone();
        s.project((0.1, 10.0));
        prop_assert_eq!(&s, &once);
        prop_assert!((0.0..=1.0).contains(&s.t));
        prop_assert!(s.d.iter().all(|v| (0.1..=10.0).contains(v)));
        prop_assert!(s.dummy.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn control_reg_gradient_matches_finite_differences((p1, w0) in vec_pair(1..10), lambda in 0.0..5.0f64) {
        let wt: Vec<f64> = w0.iter().map(|v| v * 0.5 - 1.0).collect();
        let g = control_reg_grad(&p1, &w0, &wt, lambda);
        let h = 1e-5;
        for i in 0..p1.len() {
            let mut p = p1.clone();
            p[i] += h;
            let mut m = p1.clone();
            m[i] -= h;
            let fd = lambda * (control_reg(&p, &w0, &wt) - control_reg(&m, &w0, &wt)) / (2.0 * h);
            prop_assert!((g[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn psnr_decreases_with_error(base in prop::collection::vec(0.2..0.8f64, 16), e1 in 0.001..0.1f64, e2 in 0.001..0.1f64) {
        prop_assume!((e1 - e2).abs() > 1e-6);
        let shifted = |e: f64| base.iter().map(|v| v + e).collect::<Vec<_>>();
        let (p1, p2) = (psnr(&base, &shifted(e1)).unwrap(), psnr(&base, &shifted(e2)).unwrap());
        prop_assert_eq!(p1 > p2, e1 < e2);
        prop_assert!((p1 - 10.0 * (1.0 / (e1 * e1)).log10()).abs() < 1e-9);
        prop_assert_eq!(psnr(&base, &base).unwrap(), 100.0);
    }

    #[test]
    fn ssim_is_bounded_and_symmetric(a in prop::collection::vec(0.0..1.0f64, 100), b in prop::collection::vec(0.0..1.0f64, 100)) {
        let s = ssim(&a, &b, (1, 10, 10)).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&b, &a, (1, 10, 10)).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a, (1, 10, 10)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_is_an_optimal_bijection(n in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let a = hungarian(&cost, n);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let total = |p: &[usize]| p.iter().enumerate().map(|(r, &c)| cost[r * n + c]).sum::<f64>();
        let best = permutations(n).iter().map(|p| total(p)).fold(f64::INFINITY, f64::min);
        prop_assert!((total(&a) - best).abs() < 1e-9);
    }

    #[test]
    fn pgm_round_trips_bytes(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let bytes: Vec<u8> = (0..w * h).map(|_| rng.gen()).collect();
        let pixels: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        let encoded = encode_pgm(&pixels, w, h);
        prop_assert_eq!(&encoded[encoded.len() - w * h..], &bytes[..]);
        let (dw, dh, back) = decode_pgm(&encoded).unwrap();
        prop_assert_eq!((dw, dh), (w, h));
        prop_assert_eq!(back, pixels);
    }

    #[test]
    fn idx_round_trips_bytes(count in 1usize..5, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let bytes: Vec<u8> = (0..count * rows * cols).map(|_| rng.gen()).collect();
        let labels: Vec<usize> = (0..count).map(|_| rng.gen_range(0..10)).collect();
        let batch = ImageBatch::new((1, rows, cols), bytes.iter().map(|&b| b as f64 / 255.0).collect(), labels.clone()).unwrap();
        let encoded = encode_images(&batch);
        prop_assert_eq!(&encoded[16..], &bytes[..]);
        let (c, r, k, px) = parse_images(&encoded).unwrap();
        prop_assert_eq!((c, r, k), (count, rows, cols));
        prop_assert_eq!(px, batch.pixels);
        prop_assert_eq!(parse_labels(&encode_labels(&labels)).unwrap(), labels);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn trajectory_has_t_plus_one_points(epochs in 1usize..4, n in 1usize..7, b in 1usize..7, lr in 0.0..0.5f64) {
        prop_assume!(b <= n);
        let spec = ModelSpec::new((1, 2, 2), vec![3], 2);
        let data = synth_dataset(SynthKind::GaussianBlobs, n, 2, (1, 2, 2), 1);
        let cfg = ClientConfig { epochs, local_size: n, batch_size: b, lr, ..Default::default() };
        let run = local_train(&spec, &init_params(&spec, 0), &data, &cfg).unwrap();
        prop_assert_eq!(run.trajectory.len(), epochs * n.div_ceil(b) + 1);
        prop_assert_eq!(run.trajectory.len(), cfg.local_steps() + 1);
        prop_assert_eq!(&run.wt, run.trajectory.last().unwrap());
    }
}
