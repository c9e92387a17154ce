use pac_core::approx::{RbfZ, TabularZ, ZApproximator};
use pac_core::baselines::{solve_principal_eigenpair, DiscretizedLmdp};
use pac_core::critic::{project_feasible, project_simplex, CriticState, RateSchedule};
use pac_core::domains::{make_double_well, make_pendulum};
use pac_core::harness::data::simulator_samples;
use pac_core::lmdp::{PassiveSample, StateVec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Projection of `v` onto `{A x = c}` for one or two rows of `A`.
fn affine_projection(v: &[f64], rows: &[Vec<f64>], c: &[f64]) -> Option<Vec<f64>> {
    let k = rows.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let r: Vec<f64> = (0..k).map(|i| dot(&rows[i], v) - c[i]).collect();
    let g: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| dot(&rows[i], &rows[j])).collect()).collect();
    let mu = if k == 1 {
        vec![r[0] / g[0][0]]
    } else {
        let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
        if det.abs() < 1e-12 * (g[0][0] * g[1][1]).max(1e-300) {
            return None;
        }
        vec![
            (g[1][1] * r[0] - g[0][1] * r[1]) / det,
            (g[0][0] * r[1] - g[1][0] * r[0]) / det,
        ]
    };
    Some(
        (0..v.len())
            .map(|j| v[j] - (0..k).map(|i| mu[i] * rows[i][j]).sum::<f64>())
            .collect(),
    )
}

/// Exhaustive active-set search for `min |nu - t|^2` subject to `nu >= 0`,
/// `sum nu = c`, `f' nu <= bound`.
fn brute_force_projection(t: &[f64], f: &[f64], c: f64, bound: f64) -> Vec<f64> {
    let n = t.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << n) {
        let free: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 0).collect();
        if free.is_empty() {
            continue;
        }
        for bound_active in [false, true] {
            let tv: Vec<f64> = free.iter().map(|&i| t[i]).collect();
            let mut rows = vec![vec![1.0; free.len()]];
            let mut rhs = vec![c];
            if bound_active {
                rows.push(free.iter().map(|&i| f[i]).collect());
                rhs.push(bound);
            }
            let Some(sub) = affine_projection(&tv, &rows, &rhs) else { continue };
            let mut nu = vec![0.0; n];
            for (k, &i) in free.iter().enumerate() {
                nu[i] = sub[k];
            }
            let feasible = nu.iter().all(|&v| v >= -1e-12)
                && nu.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() <= bound + 1e-12;
            if feasible {
                let d: f64 = nu.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum();
                if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                    best = Some((d, nu));
                }
            }
        }
    }
    best.expect("feasible problem").1
}

#[test]
fn projection_examples() {
    let (nu, _) = project_simplex(&[0.6, 0.6], 1.0);
    assert!((nu[0] - 0.5).abs() < 1e-15 && (nu[1] - 0.5).abs() < 1e-15);
    let (nu, _) = project_simplex(&[1.3, -0.1], 1.0);
    assert!((nu[0] - 1.0).abs() < 1e-15 && nu[1] == 0.0);
    let p = project_feasible(&[1.3, -0.1], &[1.0, 1.0], 1.0, 10.0).unwrap();
    assert_eq!(p.lambda3, 0.0);
    assert!((p.nu[0] - 1.0).abs() < 1e-15);
}

#[test]
fn projection_matches_brute_force_with_active_bound() {
    let t = [0.5, 0.4, 0.3, -0.1];
    let f = [3.0, 1.0, 0.5, 2.0];
    let bound = 1.2;
    let p = project_feasible(&t, &f, 1.0, bound).unwrap();
    let oracle = brute_force_projection(&t, &f, 1.0, bound);
    for (a, b) in p.nu.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-9, "{:?} vs {:?}", p.nu, oracle);
    }
    assert!(p.lambda3 < 0.0);
    let dot: f64 = p.nu.iter().zip(&f).map(|(a, b)| a * b).sum();
    assert!((dot - bound).abs() < 1e-9);
}

#[test]
fn infeasible_bound_is_an_error() {
    assert!(project_feasible(&[0.5, 0.5], &[2.0, 3.0], 1.0, 1.0).is_err());
}

proptest! {
    #[test]
    fn projection_is_the_constrained_minimizer(
        t in prop::collection::vec(-1.0f64..2.0, 2..7),
        f_raw in prop::collection::vec(0.01f64..3.0, 7),
        c in 0.1f64..3.0,
        slack in 0.0f64..2.0,
    ) {
        let n = t.len();
        let f = &f_raw[..n];
        let f_min = f.iter().cloned().fold(f64::INFINITY, f64::min);
        let f_max = f.iter().cloned().fold(0.0, f64::max);
        // between the smallest attainable value and a loose bound
        let bound = c * (f_min + slack * (f_max - f_min) / 2.0) + 1e-9;
        let p = project_feasible(&t, f, c, bound).unwrap();
        prop_assert!(p.nu.iter().all(|&v| v >= 0.0));
        prop_assert!((p.nu.iter().sum::<f64>() - c).abs() <= 1e-9);
        let dot: f64 = p.nu.iter().zip(f).map(|(a, b)| a * b).sum();
        prop_assert!(dot <= bound + 1e-9);
        let oracle = brute_force_projection(&t, f, c, bound);
        let d_p: f64 = p.nu.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum();
        let d_o: f64 = oracle.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum();
        prop_assert!(d_p <= d_o + 1e-9, "projection {:?} ({}) oracle {:?} ({})", p.nu, d_p, oracle, d_o);
    }

    #[test]
    fn simplex_projection_is_idempotent(t in prop::collection::vec(-1.0f64..2.0, 1..12), c in 0.1f64..5.0) {
        let (a, _) = project_simplex(&t, c);
        let (b, _) = project_simplex(&a, c);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * c.max(1.0));
        }
    }
}

#[test]
fn td_error_vanishes_at_constant_solution() {
    let mut tab = TabularZ::new(&[(0.0, 1.0)], &[4], 4.0).unwrap();
    tab.params_mut().iter_mut().for_each(|w| *w = 1.0);
    let mut c = CriticState::new(
        Box::new(tab),
        1.0,
        RateSchedule::constant(0.5),
        RateSchedule::constant(0.5),
        4.0,
    )
    .unwrap();
    let s = PassiveSample::new(StateVec(vec![0.1]), StateVec(vec![0.9]), 0.0).unwrap();
    let td = c.step(&s).unwrap();
    assert_eq!(td.e, 0.0);
    assert_eq!(c.z_avg, 1.0);
    assert!(c.approx.params().iter().all(|&w| w == 1.0));
}

/// Tabular critic on a 51-state discretized double well against the
/// power-iteration eigenpair.
#[test]
fn tabular_critic_recovers_principal_eigenpair() {
    let problem = make_double_well();
    let d = DiscretizedLmdp::from_problem(&problem, &[(-2.5, 2.5)], &[51]).unwrap();
    let pair = solve_principal_eigenpair(&d, 1e-13).unwrap();
    let approx = TabularZ::new(&[(-2.5, 2.5)], &[51], 1.0).unwrap();
    let mut critic = CriticState::new(
        Box::new(approx),
        1.0,
        RateSchedule::decaying(30.0, 4000.0),
        RateSchedule::decaying(0.2, 4000.0),
        1.0,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100_000 {
        let i = rng.random_range(0..d.len());
        let j = d.sample_next(i, &mut rng);
        let s = PassiveSample::new(StateVec(d.states[i].clone()), StateVec(d.states[j].clone()), d.costs[i])
            .unwrap();
        critic.step(&s).unwrap();
    }
    assert!((critic.z_avg / pair.z_avg - 1.0).abs() <= 0.02);
    let nu = critic.approx.params();
    let sn: f64 = nu.iter().sum();
    let sz: f64 = pair.z.iter().sum();
    let zmax = pair.z.iter().cloned().fold(0.0, f64::max) / sz;
    let sup = nu
        .iter()
        .zip(&pair.z)
        .map(|(a, b)| (a / sn - b / sz).abs())
        .fold(0.0, f64::max);
    assert!(sup / zmax <= 0.05, "sup-norm relative error {}", sup / zmax);
}

#[test]
fn rbf_critic_keeps_constraints_every_update() {
    let problem = make_pendulum();
    let region = vec![(-std::f64::consts::PI, std::f64::consts::PI), (-6.0, 6.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples = simulator_samples(&problem, &region, 100_000, 500, &mut rng).unwrap();
    let c = 1.0;
    let rbf = RbfZ::build_grid(&region, &[20, 20], c).unwrap();
    let mut critic = CriticState::new(
        Box::new(rbf),
        1.0,
        RateSchedule::decaying(10.0, 2e5),
        RateSchedule::decaying(0.03, 2e5),
        c,
    )
    .unwrap();
    for s in &samples {
        critic.step(s).unwrap();
        let nu = critic.approx.params();
        assert!(nu.iter().all(|&w| w >= 0.0));
        assert!((nu.iter().sum::<f64>() - c).abs() <= 1e-9);
        assert!(critic.approx.value(&s.x) * critic.z_avg <= 1.0 + 1e-9);
        assert!(critic.z_avg > 0.0 && critic.z_avg <= 1.0);
    }
}
