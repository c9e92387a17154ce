//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use pac_core::actor::{actor_td, td_gradient, ActorState, GradientMode, ValueModel};
use pac_core::approx::{MlpZ, OutputActivation, RbfZ, TabularZ, ZApproximator};
use pac_core::baselines::{estimate_sigma_residual, zlearning_policy, DiscretizedLmdp};
use pac_core::critic::{CriticState, RateSchedule};
use pac_core::domains::{domain_registry, make_double_well, make_pendulum};
use pac_core::harness::config::ExperimentConfig;
use pac_core::harness::data::simulator_samples;
use pac_core::harness::train::{train_until, Learner, TrainStats};
use pac_core::harness::{run_experiment, EvalReport};
use pac_core::ingest::{generate_replay, reconstruct_passive, Reconstruction};
use pac_core::lmdp::{sample_box, true_control_cost_matrix, ControlCostMatrix, PassiveSample, StateVec};
use pac_core::policy::Policy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs().join(name)).expect("config")
}

fn run(cfg: &ExperimentConfig) -> EvalReport {
    let t = Instant::now();
    let r = run_experiment(cfg).expect("experiment");
    eprintln!(
        "  [{} {} {}] cost {:.3} -> {:.3} success {:?} s_hat {:?} ({:.0?})",
        cfg.domain,
        cfg.method,
        cfg.approximator,
        r.initial_cost,
        r.final_cost,
        r.success_rate,
        r.s_hat,
        t.elapsed()
    );
    r
}

/// Principal eigenpair from a dense eigen-decomposition: the largest real
/// eigenvalue, and the null vector of `G - lambda I` from an SVD.
fn dense_eigenpair(d: &DiscretizedLmdp) -> (f64, Vec<f64>) {
    let n = d.len();
    let mut g = DMatrix::zeros(n, n);
    for (i, row) in d.rows.iter().enumerate() {
        for &(j, p) in row {
            g[(i, j)] = (-d.costs[i]).exp() * p;
        }
    }
    let lambda = g
        .complex_eigenvalues()
        .iter()
        .filter(|c| c.im.abs() < 1e-9)
        .map(|c| c.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = &g - DMatrix::identity(n, n) * lambda;
    let svd = shifted.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors");
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty")
        .0;
    let mut z: Vec<f64> = v_t.row(k).iter().cloned().collect();
    if z.iter().sum::<f64>() < 0.0 {
        z.iter_mut().for_each(|v| *v = -*v);
    }
    (lambda, z)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let problem = make_double_well();
    let d = DiscretizedLmdp::from_problem(&problem, &[(-2.5, 2.5)], &[51]).unwrap();
    let (lambda, z) = dense_eigenpair(&d);
    let approx = TabularZ::new(&[(-2.5, 2.5)], &[51], 1.0).unwrap();
    let mut critic = CriticState::new(
        Box::new(approx),
        1.0,
        RateSchedule::decaying(30.0, 4000.0),
        RateSchedule::decaying(0.2, 4000.0),
        1.0,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100_000 {
        let i = rng.random_range(0..d.len());
        let j = d.sample_next(i, &mut rng);
        let s = PassiveSample::new(StateVec(d.states[i].clone()), StateVec(d.states[j].clone()), d.costs[i]).unwrap();
        critic.step(&s).unwrap();
    }
    let z_err = (critic.z_avg / lambda - 1.0).abs();
    let nu = critic.approx.params();
    let (sn, sz) = (nu.iter().sum::<f64>(), z.iter().sum::<f64>());
    let peak = z.iter().cloned().fold(0.0, f64::max) / sz;
    let sup = nu.iter().zip(&z).map(|(a, b)| (a / sn - b / sz).abs()).fold(0.0, f64::max) / peak;
    let secs = t.elapsed().as_secs_f64();
    (
        z_err <= 0.02 && sup <= 0.05 && secs <= 60.0,
        format!("Z_avg rel err {z_err:.4} (<=0.02), Z sup-norm rel err {sup:.4} (<=0.05), {secs:.1}s"),
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300)
}

fn fd_params(m: &dyn ZApproximator, x: &[f64]) -> Vec<f64> {
    let mut probe = m.clone_box();
    (0..m.num_params())
        .map(|j| {
            let p0 = m.params()[j];
            let h = 1e-6 * p0.abs().max(1e-3);
            probe.params_mut()[j] = p0 + h;
            let up = probe.value(x);
            probe.params_mut()[j] = p0 - h;
            let dn = probe.value(x);
            probe.params_mut()[j] = p0;
            (up - dn) / (2.0 * h)
        })
        .collect()
}

fn fd_input(m: &dyn ZApproximator, x: &[f64], scale: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|d| {
            let h = 1e-6 * scale[d];
            let (mut a, mut b) = (x.to_vec(), x.to_vec());
            a[d] += h;
            b[d] -= h;
            (m.value(&a) - m.value(&b)) / (2.0 * h)
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let range = vec![(-3.0, 3.0), (-6.0, 6.0)];
    let scale = [6.0, 12.0];
    let mut rbf = RbfZ::build_grid(&range, &[10, 10], 1.0).unwrap();
    rbf.params_mut().iter_mut().for_each(|w| *w = rng.random_range(0.0..0.02));
    let mlp = MlpZ::new(&range, &[16, 12, 8], OutputActivation::ExpNegSoftplus, &mut rng).unwrap();
    let (mut rbf_worst, mut mlp_worst, mut actor_worst) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let x = sample_box(&range, &mut rng);
        let q = rbf.query(&x);
        rbf_worst = rbf_worst
            .max(rel_err(&q.grad_params, &fd_params(&rbf, &x)))
            .max(rel_err(&q.grad_input, &fd_input(&rbf, &x, &scale)));
        let q = mlp.query(&x);
        mlp_worst = mlp_worst
            .max(rel_err(&q.grad_params, &fd_params(&mlp, &x)))
            .max(rel_err(&q.grad_input, &fd_input(&mlp, &x, &scale)));
    }
    let critic = CriticState::new(
        Box::new(rbf),
        0.97,
        RateSchedule::constant(0.0),
        RateSchedule::constant(0.0),
        1.0,
    )
    .unwrap();
    let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.8]);
    let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.5]);
    let dt = 0.05;
    let actor = ActorState::with_initial(
        ControlCostMatrix::new(s.clone()).unwrap(),
        RateSchedule::constant(0.0),
        GradientMode::Full,
    );
    for _ in 0..20 {
        let x = sample_box(&[(-2.0, 2.0), (-4.0, 4.0)], &mut rng);
        let xn = vec![x[0] + rng.random_range(-0.1..0.1), x[1] + rng.random_range(-0.2..0.2)];
        let sample = PassiveSample::new(StateVec(x.into_inner()), StateVec(xn), 0.02).unwrap();
        let td = actor_td(&actor, &critic, &sample, &b, dt).unwrap();
        let analytic = td_gradient(GradientMode::Full, &td, &b, dt);
        let mut numeric = DMatrix::zeros(2, 2);
        for i in 0..2 {
            for j in i..2 {
                let mut e = DMatrix::zeros(2, 2);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                let h = 1e-6;
                let d_at = |sign: f64| {
                    let mut a = actor.clone();
                    a.s_hat = ControlCostMatrix::new(&s + &e * (sign * h)).unwrap();
                    actor_td(&a, &critic, &sample, &b, dt).unwrap().d
                };
                let deriv = (d_at(1.0) - d_at(-1.0)) / (2.0 * h);
                let w = if i == j { 1.0 } else { 0.5 };
                numeric[(i, j)] = w * deriv;
                numeric[(j, i)] = w * deriv;
            }
        }
        actor_worst = actor_worst.max(rel_err(analytic.as_slice(), numeric.as_slice()));
    }
    (
        rbf_worst <= 1e-5 && mlp_worst <= 1e-4 && actor_worst <= 1e-4,
        format!("worst rel err RBF {rbf_worst:.1e} (<=1e-5), MLP {mlp_worst:.1e} (<=1e-4), actor {actor_worst:.1e} (<=1e-4)"),
    )
}

fn criterion_3() -> Outcome {
    let problem = make_pendulum();
    let region = vec![(-std::f64::consts::PI, std::f64::consts::PI), (-6.0, 6.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
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
    let mut violations = 0usize;
    let mut worst_sum = 0.0f64;
    for s in &samples {
        critic.step(s).unwrap();
        let nu = critic.approx.params();
        let sum_err = (nu.iter().sum::<f64>() - c).abs();
        worst_sum = worst_sum.max(sum_err);
        let ok = nu.iter().all(|&w| w >= 0.0)
            && sum_err <= 1e-9
            && critic.approx.value(&s.x) * critic.z_avg <= 1.0 + 1e-9
            && critic.z_avg > 0.0
            && critic.z_avg <= 1.0;
        violations += !ok as usize;
    }
    (
        violations == 0,
        format!("{violations} violating updates of 100000, worst |sum - C| {worst_sum:.1e}"),
    )
}

fn criterion_4() -> Outcome {
    let mut mismatches = 0;
    let mut checked = 0;
    for text in [
        "domain = \"pendulum\"\n[critic]\nalpha1 = 10.0\nalpha2 = 0.03\n[actor]\nbeta = 1.0",
        "domain = \"merge\"\napproximator = \"mlp\"\n[actor]\nbeta = 1.0",
    ] {
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let domain = domain_registry().get(&cfg.domain).unwrap();
        let problem = domain.problem(cfg.cost_repair);
        let mut learner = Learner::new(&cfg, domain.as_ref(), &problem).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples = simulator_samples(&problem, &domain.sample_region(), 2000, 200, &mut rng).unwrap();
        train_until(&cfg, &mut learner, &problem, &samples, 1000, &mut rng, &mut TrainStats::default(), None).unwrap();
        let d = &problem.dynamics;
        learner.actor.s_hat = true_control_cost_matrix(d.input_gain(), d.noise()).unwrap();
        let pac = learner.policy(&problem, None, Default::default()).unwrap();
        let critic: Arc<dyn ValueModel> = Arc::new(learner.critic.clone());
        let zl = zlearning_policy(critic, d.input_gain(), d.noise(), None).unwrap();
        for _ in 0..1000 {
            let x = sample_box(&domain.sample_region(), &mut rng);
            let (a, b) = (pac.act(&x), zl.act(&x));
            checked += 1;
            mismatches += a.iter().zip(b.iter()).any(|(p, q)| p.to_bits() != q.to_bits()) as usize;
        }
    }
    (mismatches == 0, format!("{mismatches} bitwise mismatches over {checked} states"))
}

struct Runs {
    merge_rbf: EvalReport,
    merge_mlp: EvalReport,
    merge_secs: f64,
}

fn criterion_5() -> (Outcome, Runs) {
    let t = Instant::now();
    let merge_mlp = run(&load("merge_mlp.toml"));
    let merge_rbf = run(&load("merge_rbf.toml"));
    let merge_secs = t.elapsed().as_secs_f64();
    let (mlp, rbf) = (merge_mlp.success_rate.unwrap_or(0.0), merge_rbf.success_rate.unwrap_or(0.0));
    (
        (
            mlp >= 0.85 && rbf >= 0.80 && merge_secs <= 1800.0,
            format!(
                "merge success pAC-MLP {:.1}% (>=85%), pAC-RBF {:.1}% (>=80%), {merge_secs:.0}s",
                100.0 * mlp,
                100.0 * rbf
            ),
        ),
        Runs {
            merge_rbf,
            merge_mlp,
            merge_secs,
        },
    )
}

fn criterion_6(runs: &Runs) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    let mut check = |name: &str, pac: &EvalReport, zl: &EvalReport| {
        let ratio = pac.final_cost / pac.initial_cost;
        let vs = pac.final_cost / zl.final_cost;
        ok &= ratio <= 0.7 && vs <= 1.1;
        parts.push(format!("{name} final/init {ratio:.3} (<=0.7), pAC/ZL {vs:.3} (<=1.1)"));
    };
    for name in ["pendulum", "car_on_hill"] {
        let cfg = load(&format!("{name}.toml"));
        let pac = run(&cfg);
        let mut zcfg = cfg.clone();
        zcfg.method = "zlearning".into();
        check(name, &pac, &run(&zcfg));
    }
    let mut zcfg = load("merge_rbf.toml");
    zcfg.method = "zlearning".into();
    check("merge", &runs.merge_rbf, &run(&zcfg));
    (ok, parts.join("; "))
}

fn criterion_7() -> Outcome {
    let problem = domain_registry().get("merge").unwrap().problem(Default::default());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = generate_replay(&problem, &Default::default(), 50, 300, &mut rng).unwrap();
    let direct = data.direct_passive(&problem).unwrap();
    let rebuilt: Vec<PassiveSample> = data
        .logs
        .iter()
        .flat_map(|l| reconstruct_passive(l, &problem, Reconstruction::Corrected).unwrap())
        .collect();
    let bitwise = rebuilt.len() == direct.len()
        && rebuilt.iter().zip(&direct).all(|(a, b)| {
            a.x_next.iter().zip(b.x_next.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
        });
    let cfg = load("merge_replay.toml");
    let reconstructed = run(&cfg);
    let mut dcfg = cfg.clone();
    dcfg.data.direct_passive = true;
    let passive = run(&dcfg);
    let (a, b) = (
        reconstructed.replay_success_rate.unwrap_or(f64::NAN),
        passive.replay_success_rate.unwrap_or(f64::NAN),
    );
    (
        bitwise && (a - b).abs() <= 0.05,
        format!(
            "bitwise passive states {bitwise}, replay success reconstructed {:.1}% vs direct {:.1}% (|diff|<=5pp)",
            100.0 * a,
            100.0 * b
        ),
    )
}

fn criterion_8() -> Outcome {
    let problem = make_pendulum();
    let region = vec![(-std::f64::consts::PI, std::f64::consts::PI), (-6.0, 6.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let samples = simulator_samples(&problem, &region, 100_000, 500, &mut rng).unwrap();
    let s = estimate_sigma_residual(&samples, problem.dynamics.dt(), problem.dynamics.angle_dims()).unwrap();
    ((1.9..=2.1).contains(&s[1]), format!("sigma_2 estimate {:.4} in [1.9, 2.1]", s[1]))
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.toml");
    std::fs::write(
        &cfg_path,
        "domain = \"pendulum\"\nseed = 9\niterations = 5000\ncheckpoints = 2\n\
         [critic]\nalpha1 = 10.0\nalpha2 = 0.03\n[actor]\nbeta = 1.0\n[eval]\nstarts = 10\n",
    )
    .unwrap();
    let outs: Vec<PathBuf> = (0..2)
        .map(|i| {
            let out = tmp.path().join(format!("out{i}"));
            let status = Command::new(env!("CARGO_BIN_EXE_pac"))
                .args(["train", "--config"])
                .arg(&cfg_path)
                .arg("--out")
                .arg(&out)
                .status()
                .expect("pac binary runs");
            assert!(status.success());
            out
        })
        .collect();
    let same = ["report.json", "curve.csv"].iter().all(|f| {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        let b = std::fs::read(outs[1].join(f)).unwrap();
        a == b
    });
    (same, format!("report.json and curve.csv byte-identical across two CLI runs: {same}"))
}

fn report(n: usize, (ok, detail): &Outcome) {
    println!("criterion {n}: {} {detail}", if *ok { "PASS" } else { "FAIL" });
}

fn main() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut record = |n: usize, o: Outcome| {
        report(n, &o);
        results.push((n, o));
    };
    record(1, criterion_1());
    record(2, criterion_2());
    record(3, criterion_3());
    record(4, criterion_4());
    record(8, criterion_8());
    record(9, criterion_9());
    let (c5, runs) = criterion_5();
    record(5, c5);
    eprintln!(
        "  merge runs: MLP final cost {:.2}, RBF final cost {:.2}, {:.0}s",
        runs.merge_mlp.final_cost, runs.merge_rbf.final_cost, runs.merge_secs
    );
    record(6, criterion_6(&runs));
    record(7, criterion_7());

    results.sort_by_key(|r| r.0);
    println!("acceptance summary:");
    for (n, o) in &results {
        report(*n, o);
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.1 .0).map(|r| r.0).collect();
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
