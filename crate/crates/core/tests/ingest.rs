use std::collections::BTreeSet;

use nalgebra::DMatrix;
use pac_core::baselines::estimate_sigma_residual;
use pac_core::domains::{make_merge, make_pendulum};
use pac_core::harness::data::simulator_samples;
use pac_core::ingest::{
    generate_replay, kfold_split, read_trajectories, reconstruct_passive, resample_balanced, write_trajectories,
    Reconstruction, ScriptedMerge, TrajectoryLog, TrajectorySchema,
};
use pac_core::lmdp::{ActionVec, DynamicsModel, LmdpProblem, PassiveSample, StateVec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn replay(seed: u64, count: usize, steps: usize) -> (LmdpProblem, pac_core::ingest::ReplayDataset) {
    let problem = make_merge();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = generate_replay(&problem, &ScriptedMerge::default(), count, steps, &mut rng).unwrap();
    (problem, data)
}

#[test]
fn exported_merge_rollout_reloads_bit_identical() {
    let (_, data) = replay(1, 3, 200);
    let schema = TrajectorySchema::standard(4, 1, 0.1);
    let mut buf = Vec::new();
    write_trajectories(&mut buf, &data.logs, &schema).unwrap();
    let loaded = read_trajectories(buf.as_slice(), &schema).unwrap();
    assert_eq!(loaded.dropped_rows, 0);
    assert_eq!(loaded.logs.len(), data.logs.len());
    for (a, b) in loaded.logs.iter().zip(&data.logs) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.len(), b.len());
        for (xa, xb) in a.x.iter().zip(&b.x) {
            for (p, q) in xa.iter().zip(xb.iter()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
        for (ua, ub) in a.u.iter().zip(&b.u) {
            assert_eq!(ua[0].to_bits(), ub[0].to_bits());
        }
    }
}

#[test]
fn reconstruction_reproduces_passive_simulation_bitwise() {
    let (problem, data) = replay(2, 10, 300);
    let direct = data.direct_passive(&problem).unwrap();
    let mut rebuilt = Vec::new();
    for log in &data.logs {
        rebuilt.extend(reconstruct_passive(log, &problem, Reconstruction::Corrected).unwrap());
    }
    assert_eq!(rebuilt.len(), direct.len());
    for (a, b) in rebuilt.iter().zip(&direct) {
        for (p, q) in a.x_next.iter().zip(b.x_next.iter()) {
            assert_eq!(p.to_bits(), q.to_bits(), "{:?} vs {:?}", a.x_next, b.x_next);
        }
        assert_eq!(a.q.to_bits(), b.q.to_bits());
    }
    // the uncorrected form leaves a visible control residue
    let printed = reconstruct_passive(&data.logs[0], &problem, Reconstruction::AsPrinted).unwrap();
    assert!(printed.iter().zip(&direct).any(|(a, b)| a.x_next != b.x_next));
}

#[test]
fn zero_actions_give_raw_consecutive_states() {
    let problem = make_pendulum();
    let log = TrajectoryLog {
        id: "a".into(),
        dt: 0.01,
        t: vec![0.0, 0.01, 0.02],
        x: vec![StateVec(vec![0.1, 0.2]), StateVec(vec![0.3, -0.4]), StateVec(vec![0.5, 0.6])],
        u: vec![ActionVec(vec![0.0]); 3],
    };
    let s = reconstruct_passive(&log, &problem, Reconstruction::Corrected).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(s[0].x_next.0, vec![0.3, -0.4]);
    assert_eq!(s[1].x_next.0, vec![0.5, 0.6]);
}

fn cluster_samples(rng: &mut ChaCha8Rng) -> Vec<PassiveSample> {
    // 900 points near (-1,-1), 100 near (1,1); corners pin a symmetric box
    let mut pts = Vec::new();
    for (n, c) in [(900, -1.0), (100, 1.0)] {
        for _ in 0..n {
            let x = vec![c + rng.random_range(-0.05..0.05), c + rng.random_range(-0.05..0.05)];
            pts.push(PassiveSample::new(StateVec(x.clone()), StateVec(x), 0.0).unwrap());
        }
    }
    pts
}

#[test]
fn resampling_balances_unequal_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples = cluster_samples(&mut rng);
    let draws = resample_balanced(&samples, 10_000, &mut rng).unwrap();
    let left = draws.iter().filter(|s| s.x[0] < 0.0).count() as f64 / 1e4;
    assert!((left - 0.5).abs() <= 0.03, "left cluster share {left}");
}

#[test]
fn resampling_single_sample_and_determinism() {
    let one = vec![PassiveSample::new(StateVec(vec![1.0, 2.0]), StateVec(vec![1.0, 2.0]), 0.5).unwrap()];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = resample_balanced(&one, 50, &mut rng).unwrap();
    assert!(draws.iter().all(|s| s == &one[0]));

    let samples = cluster_samples(&mut ChaCha8Rng::seed_from_u64(6));
    let a = resample_balanced(&samples, 500, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let b = resample_balanced(&samples, 500, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(a, b);
}

/// Brute-force nearest neighbour, for checking the index.
fn nearest_brute(samples: &[PassiveSample], bounds: &[(f64, f64)], q: &[f64]) -> f64 {
    samples
        .iter()
        .map(|s| {
            s.x.iter()
                .zip(q)
                .zip(bounds)
                .map(|((a, b), (l, h))| ((a - b) / (h - l)).powi(2))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn resampled_states_come_from_the_input(seed in 0u64..1000, n in 1usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<PassiveSample> = (0..n)
            .map(|_| {
                let x = vec![rng.random_range(-3.0..3.0), rng.random_range(0.0..0.5)];
                PassiveSample::new(StateVec(x.clone()), StateVec(x), 0.0).unwrap()
            })
            .collect();
        let draws = resample_balanced(&samples, 200, &mut rng).unwrap();
        prop_assert!(draws.iter().all(|d| samples.contains(d)));
    }

    #[test]
    fn index_returns_an_exact_nearest_point(seed in 0u64..1000, n in 2usize..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<PassiveSample> = (0..n)
            .map(|_| {
                let x = vec![rng.random_range(-1.0f64..1.0).powi(3), rng.random_range(0.0..10.0)];
                PassiveSample::new(StateVec(x.clone()), StateVec(x), 0.0).unwrap()
            })
            .collect();
        let index = pac_core::ingest::NearestIndex::new(&samples).unwrap();
        let bounds = index.bounds();
        for _ in 0..50 {
            let q = vec![rng.random_range(-1.0..1.0), rng.random_range(0.0..10.0)];
            let i = index.nearest(&q);
            let d: f64 = samples[i].x.iter().zip(&q).zip(&bounds)
                .map(|((a, b), (l, h))| ((a - b) / (h - l)).powi(2)).sum();
            prop_assert!(d <= nearest_brute(&samples, &bounds, &q) + 1e-12);
        }
    }

    #[test]
    fn folds_partition_trajectories(n in 5usize..60, k in 1usize..6, seed in 0u64..100) {
        let logs: Vec<TrajectoryLog> = (0..n)
            .map(|i| TrajectoryLog { id: format!("t{i}"), dt: 0.1, t: vec![], x: vec![], u: vec![] })
            .collect();
        let split = kfold_split(&logs, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut seen = BTreeSet::new();
        for f in 0..k {
            for id in split.fold_ids(f) {
                prop_assert!(seen.insert(id.to_string()));
            }
        }
        prop_assert_eq!(seen.len(), n);
        let sizes = split.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let again = kfold_split(&logs, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(split, again);
    }
}

#[test]
fn eleven_trajectories_make_one_fold_of_three() {
    let logs: Vec<TrajectoryLog> = (0..11)
        .map(|i| TrajectoryLog { id: format!("t{i}"), dt: 0.1, t: vec![], x: vec![], u: vec![] })
        .collect();
    let mut sizes = kfold_split(&logs, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().fold_sizes();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    assert!(kfold_split(&logs[..4], 5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

fn pendulum_sigma(count: usize, seed: u64) -> f64 {
    let problem = make_pendulum();
    let region = vec![(-std::f64::consts::PI, std::f64::consts::PI), (-6.0, 6.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = simulator_samples(&problem, &region, count, 500, &mut rng).unwrap();
    let s = estimate_sigma_residual(&samples, problem.dynamics.dt(), problem.dynamics.angle_dims()).unwrap();
    s[1]
}

#[test]
fn pendulum_sigma_estimate() {
    let s = pendulum_sigma(100_000, 8);
    assert!((1.9..=2.1).contains(&s), "sigma_2 {s}");
}

#[test]
fn sigma_estimate_improves_with_more_data() {
    let mut err_small = 0.0;
    let mut err_large = 0.0;
    for seed in 0..4 {
        err_small += (pendulum_sigma(10_000, 100 + seed) - 2.0).abs();
        err_large += (pendulum_sigma(100_000, 200 + seed) - 2.0).abs();
    }
    assert!(err_large < err_small, "1e4: {err_small} 1e5: {err_large}");
}

#[test]
fn constant_drift_sigma_estimate() {
    let dt = 0.01;
    let dynamics = DynamicsModel::new(|_x, a| a[0] = 0.7, DMatrix::from_element(1, 1, 1.0), vec![1.0], dt).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples: Vec<PassiveSample> = (0..100_000)
        .map(|_| {
            let x: f64 = rng.random_range(-5.0..5.0);
            let w: f64 = StandardNormal.sample(&mut rng);
            let xn = x + 0.7 * dt + w * dt.sqrt();
            PassiveSample::new(StateVec(vec![x]), StateVec(vec![xn]), 0.0).unwrap()
        })
        .collect();
    let s = estimate_sigma_residual(&samples, dynamics.dt(), &[]).unwrap();
    assert!((0.97..=1.03).contains(&s[0]), "sigma {}", s[0]);
    let still: Vec<PassiveSample> = samples
        .iter()
        .map(|p| PassiveSample::new(p.x.clone(), StateVec(vec![p.x[0] + 0.7 * dt]), 0.0).unwrap())
        .collect();
    assert!(estimate_sigma_residual(&still, dt, &[]).unwrap()[0] <= 1e-6);
}
