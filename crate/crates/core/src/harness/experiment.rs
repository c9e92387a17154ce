//! Full experiment: gather data, train with periodic evaluation, optional
//! k-fold replay scoring, and write artifacts.
//!
//! Artifacts in the output directory:
//! - `config.toml`: the effective configuration
//! - `curve.csv`: `iteration,mean_cost,success_rate`
//! - `report.json`: [`EvalReport`]
//! - `params.txt`: final parameter snapshot (`checkpoints/` when enabled)
//! - `folds.csv`: fold assignment, in k-fold mode
//! - `trace.csv`: TD trace, when `trace_every > 0`
//! - `manifest.json`: files written and whether the run completed

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::approx::{load_snapshot, save_snapshot};
use crate::critic::{CriticState, RateSchedule};
use crate::domains::{domain_registry, Domain};
use crate::error::{Error, Result};
use crate::ingest::{kfold_split, resample_balanced};
use crate::lmdp::{ControlCostMatrix, LmdpProblem, PassiveSample};
use crate::policy::{GreedyPolicy, Policy};

use super::config::{DataSource, EvalCostMatrix, ExperimentConfig};
use super::data::{gather, TrainingData};
use super::eval::{evaluate_average_cost, evaluate_merge_replay, evaluate_merge_success};
use super::seed;
use super::train::{checkpoint_schedule, train_until, Learner, TrainStats, TRACE_HEADER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub mean_cost: f64,
    pub success_rate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub underflows: u64,
    pub clamp_hits: u64,
    pub diverged_rollouts: u64,
    pub actor_skips: u64,
    pub flagged_cases: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    /// Replay success rate (merge) or average cost (other domains) per fold.
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain: String,
    pub method: String,
    pub approximator: String,
    pub seed: u64,
    pub iterations: u64,
    pub training_samples: usize,
    pub average_cost_curve: Vec<CurvePoint>,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Simulated merge success rate of the final policy.
    pub success_rate: Option<f64>,
    /// Success rate against the training logs (merge with logged data).
    pub replay_success_rate: Option<f64>,
    pub folds: Option<FoldSummary>,
    pub z_avg: f64,
    pub s_hat: Vec<f64>,
    pub counters: Counters,
}

/// Everything needed to run and score one configuration.
pub struct Setup {
    pub cfg: ExperimentConfig,
    pub domain: std::sync::Arc<dyn Domain>,
    pub problem: LmdpProblem,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let domain = domain_registry().get(&cfg.domain)?;
        let problem = domain.problem(cfg.cost_repair);
        Ok(Self {
            cfg: cfg.clone(),
            domain,
            problem,
        })
    }

    pub fn window_s(&self) -> f64 {
        self.cfg.eval.window_s.unwrap_or_else(|| self.domain.eval_window_s())
    }

    pub fn is_merge(&self) -> bool {
        self.domain.success(&vec![0.0; self.problem.dynamics.state_dim()]).is_some()
    }

    pub fn policy(&self, learner: &Learner) -> Result<GreedyPolicy> {
        learner.policy(&self.problem, self.cfg.eval.action_limit, self.cfg.eval.cost_matrix)
    }

    /// Average cost and, for merge, simulated success rate.
    pub fn score(&self, policy: &dyn Policy, counters: &mut Counters) -> Result<CurvePoint> {
        let cost = evaluate_average_cost(policy, &self.problem, self.window_s(), self.cfg.eval.starts, self.cfg.seed)?;
        counters.diverged_rollouts += cost.diverged as u64;
        let success_rate = if self.is_merge() {
            let s = evaluate_merge_success(
                policy,
                &self.problem,
                self.cfg.eval.success_starts,
                self.window_s(),
                self.cfg.seed,
            )?;
            counters.flagged_cases += s.flagged as u64;
            Some(s.rate)
        } else {
            None
        };
        counters.underflows += policy.underflows();
        Ok(CurvePoint {
            iteration: 0,
            mean_cost: cost.mean_cost,
            success_rate,
        })
    }

    fn training_set(&self, samples: Vec<PassiveSample>, index: u64) -> Result<Vec<PassiveSample>> {
        match self.cfg.data.resample {
            Some(count) => {
                let mut rng = seed::stream_rng(self.cfg.seed, seed::DATA, 1 + index);
                resample_balanced(&samples, count, &mut rng)
            }
            None => Ok(samples),
        }
    }
}

/// Tracks written files for the manifest.
struct Artifacts {
    dir: Option<PathBuf>,
    written: Vec<String>,
}

impl Artifacts {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        if let Some(p) = self.path(name) {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            f(&p)?;
            self.written.push(name.to_string());
        }
        Ok(())
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        self.write(name, |p| fs::write(p, text).map_err(|e| Error::io(p, e)))
    }

    fn manifest(&self, error: Option<&Error>) {
        if let Some(p) = self.path("manifest.json") {
            let m = json!({
                "complete": error.is_none(),
                "written": self.written,
                "error": error.map(|e| e.to_string()),
            });
            let _ = fs::write(&p, serde_json::to_string_pretty(&m).expect("json") + "\n");
        }
    }
}

fn snapshot_extra(learner: &Learner) -> serde_json::Value {
    json!({
        "z_avg": learner.critic.z_avg,
        "s_hat": learner.s().entries(),
        "action_dim": learner.s().dim(),
        "iteration": learner.critic.iteration,
        "method": learner.method.name(),
    })
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("iteration,mean_cost,success_rate\n");
    for p in curve {
        let rate = p.success_rate.map(|r| format!("{r:?}")).unwrap_or_default();
        s.push_str(&format!("{},{:?},{}\n", p.iteration, p.mean_cost, rate));
    }
    s
}

pub fn parse_curve_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |detail: &str| Error::BadRow {
            row: row + 1,
            detail: detail.to_string(),
        };
        let iteration = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("iteration"))?;
        let mean_cost = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("mean_cost"))?;
        let success_rate = match rec.get(2) {
            Some("") | None => None,
            Some(v) => Some(v.parse().map_err(|_| bad("success_rate"))?),
        };
        out.push(CurvePoint {
            iteration,
            mean_cost,
            success_rate,
        });
    }
    Ok(out)
}

/// Trains on `samples` with evaluation at every checkpoint.
fn train_with_curve(
    setup: &Setup,
    samples: &[PassiveSample],
    artifacts: &mut Artifacts,
    counters: &mut Counters,
) -> Result<(Learner, Vec<CurvePoint>, TrainStats)> {
    let cfg = &setup.cfg;
    let mut learner = Learner::new(cfg, setup.domain.as_ref(), &setup.problem)?;
    let mut rng = seed::stream_rng(cfg.seed, seed::TRAIN, 0);
    let mut stats = TrainStats::default();
    let mut curve = Vec::new();
    let mut trace = match artifacts.path("trace.csv") {
        Some(p) if cfg.trace_every > 0 => {
            let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{TRACE_HEADER}").map_err(|e| Error::io(&p, e))?;
            artifacts.written.push("trace.csv".into());
            Some(w)
        }
        _ => None,
    };
    for it in checkpoint_schedule(cfg.iterations, cfg.checkpoints) {
        train_until(
            cfg,
            &mut learner,
            &setup.problem,
            samples,
            it,
            &mut rng,
            &mut stats,
            trace.as_mut().map(|w| w as &mut dyn Write),
        )?;
        let policy = setup.policy(&learner)?;
        let mut point = setup.score(&policy, counters)?;
        point.iteration = it;
        log::info!(
            "iteration {it}: mean cost {:.4}{}",
            point.mean_cost,
            point.success_rate.map(|r| format!(", success {:.1}%", 100.0 * r)).unwrap_or_default()
        );
        curve.push(point);
        if cfg.save_checkpoints {
            let extra = snapshot_extra(&learner);
            artifacts.write(&format!("checkpoints/params_{it:010}.txt"), |p| {
                save_snapshot(p, learner.critic.approx.as_ref(), &extra)
            })?;
        }
    }
    if let Some(mut w) = trace {
        w.flush().map_err(|e| Error::io("trace.csv", e))?;
    }
    Ok((learner, curve, stats))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn run_folds(setup: &Setup, data: &TrainingData, artifacts: &mut Artifacts, counters: &mut Counters) -> Result<FoldSummary> {
    let cfg = &setup.cfg;
    let k = cfg.data.folds;
    let mut rng = seed::stream_rng(cfg.seed, seed::FOLDS, 0);
    let split = kfold_split(&data.logs, k, &mut rng)?;
    let mut buf = Vec::new();
    split.write_csv(&mut buf)?;
    artifacts.write_text("folds.csv", &String::from_utf8(buf).expect("utf8"))?;
    let fold_of: Vec<usize> = data.logs.iter().map(|l| split.assignments[&l.id]).collect();
    let mut values = Vec::with_capacity(k);
    for f in 0..k {
        let samples = setup.training_set(data.select(|i| fold_of[i] != f), f as u64 + 1)?;
        let mut learner = Learner::new(cfg, setup.domain.as_ref(), &setup.problem)?;
        let mut trng = seed::stream_rng(cfg.seed, seed::TRAIN, f as u64 + 1);
        let mut stats = TrainStats::default();
        train_until(cfg, &mut learner, &setup.problem, &samples, cfg.iterations, &mut trng, &mut stats, None)?;
        counters.actor_skips += stats.actor_skips;
        let policy = setup.policy(&learner)?;
        let value = if setup.is_merge() {
            let held_out: Vec<_> = data
                .logs
                .iter()
                .zip(&fold_of)
                .filter(|(_, &g)| g == f)
                .map(|(l, _)| l.clone())
                .collect();
            let s = evaluate_merge_replay(&policy, &setup.problem, &held_out, setup.window_s())?;
            counters.flagged_cases += s.flagged as u64;
            s.rate
        } else {
            setup.score(&policy, counters)?.mean_cost
        };
        log::info!("fold {f}: {value:.4}");
        values.push(value);
    }
    let (mean, std) = mean_std(&values);
    Ok(FoldSummary { values, mean, std })
}

fn run_inner(setup: &Setup, artifacts: &mut Artifacts) -> Result<EvalReport> {
    let cfg = &setup.cfg;
    artifacts.write_text("config.toml", &cfg.to_toml())?;
    let data = gather(cfg, setup.domain.as_ref(), &setup.problem)?;
    let mut counters = Counters::default();
    let samples = setup.training_set(data.samples.clone(), 0)?;
    let (learner, curve, stats) = train_with_curve(setup, &samples, artifacts, &mut counters)?;
    counters.actor_skips += stats.actor_skips;
    let final_point = curve.last().expect("schedule is non-empty").clone();
    let replay_success_rate = if setup.is_merge() && !data.logs.is_empty() {
        let policy = setup.policy(&learner)?;
        let s = evaluate_merge_replay(&policy, &setup.problem, &data.logs, setup.window_s())?;
        counters.flagged_cases += s.flagged as u64;
        Some(s.rate)
    } else {
        None
    };
    let folds = if cfg.data.folds >= 2 {
        if cfg.data.source == DataSource::Simulator {
            return Err(Error::Config("folds need trajectory or replay data".into()));
        }
        Some(run_folds(setup, &data, artifacts, &mut counters)?)
    } else {
        None
    };
    counters.clamp_hits = setup.problem.clamp_hits();
    let report = EvalReport {
        domain: cfg.domain.clone(),
        method: cfg.method.clone(),
        approximator: cfg.approximator.clone(),
        seed: cfg.seed,
        iterations: cfg.iterations,
        training_samples: samples.len(),
        initial_cost: curve[0].mean_cost,
        final_cost: final_point.mean_cost,
        success_rate: final_point.success_rate,
        replay_success_rate,
        folds,
        z_avg: learner.critic.z_avg,
        s_hat: learner.s().entries(),
        counters,
        average_cost_curve: curve,
    };
    let extra = snapshot_extra(&learner);
    artifacts.write("params.txt", |p| save_snapshot(p, learner.critic.approx.as_ref(), &extra))?;
    artifacts.write_text("curve.csv", &curve_csv(&report.average_cost_curve))?;
    artifacts.write_text("report.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(report)
}

/// Runs `cfg`, writing artifacts to `cfg.out` when set. On failure the
/// manifest lists what was written before the error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let setup = Setup::new(cfg)?;
    let mut artifacts = Artifacts {
        dir: cfg.out.clone(),
        written: Vec::new(),
    };
    if let Some(d) = &cfg.out {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let result = run_inner(&setup, &mut artifacts);
    artifacts.manifest(result.as_ref().err());
    result
}

/// Rebuilds a learner-equivalent policy from a parameter snapshot and scores it.
pub fn evaluate_snapshot(cfg: &ExperimentConfig, params: &Path) -> Result<serde_json::Value> {
    let setup = Setup::new(cfg)?;
    let (approx, extra) = load_snapshot(params)?;
    let z_avg = extra.get("z_avg").and_then(|v| v.as_f64()).unwrap_or(1.0);
    let entries: Vec<f64> = serde_json::from_value(extra.get("s_hat").cloned().unwrap_or_default())
        .map_err(|_| Error::Snapshot("missing `s_hat`".into()))?;
    let m = setup.problem.dynamics.action_dim();
    if entries.len() != m * m {
        return Err(Error::Snapshot(format!("`s_hat` needs {} entries", m * m)));
    }
    let s = ControlCostMatrix::new(nalgebra::DMatrix::from_row_slice(m, m, &entries))?;
    let critic = CriticState::new(approx, z_avg, RateSchedule::constant(0.0), RateSchedule::constant(0.0), cfg.critic.c)?;
    let d = &setup.problem.dynamics;
    let mut policy = GreedyPolicy::new(std::sync::Arc::new(critic), s, d.input_gain().clone(), cfg.eval.action_limit);
    if cfg.eval.cost_matrix == EvalCostMatrix::True {
        policy = policy.priced_with(crate::lmdp::true_control_cost_matrix(d.input_gain(), d.noise())?);
    }
    let mut counters = Counters::default();
    let point = setup.score(&policy, &mut counters)?;
    Ok(json!({
        "mean_cost": point.mean_cost,
        "success_rate": point.success_rate,
        "counters": counters,
    }))
}
