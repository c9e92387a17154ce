//! Passive training samples: simulator rollouts, trajectory files, or the
//! synthetic replay dataset.

use rand::Rng;

use crate::domains::Domain;
use crate::error::{Error, Result};
use crate::ingest::{
    generate_replay, load_trajectories, reconstruct_passive, TrajectoryLog,
    TrajectorySchema,
};
use crate::lmdp::{sample_box, LmdpProblem, PassiveSample};

use super::config::{DataSource, ExperimentConfig};
use super::seed;

/// Samples grouped by trajectory, so folds can split them.
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub samples: Vec<PassiveSample>,
    /// Logged trajectories behind the samples (file and replay sources).
    pub logs: Vec<TrajectoryLog>,
    /// `samples` index range of each log.
    pub spans: Vec<std::ops::Range<usize>>,
}

impl TrainingData {
    /// Samples of every log whose index satisfies `keep`.
    pub fn select(&self, keep: impl Fn(usize) -> bool) -> Vec<PassiveSample> {
        self.spans
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .flat_map(|(_, r)| self.samples[r.clone()].iter().cloned())
            .collect()
    }
}

fn inside(x: &[f64], region: &[(f64, f64)]) -> bool {
    x.iter().zip(region).all(|(v, (lo, hi))| v >= lo && v <= hi)
}

/// Restarted passive rollouts: a rollout begins uniformly in `region` and
/// restarts when it leaves the region or after `reset_steps` steps.
pub fn simulator_samples<R: Rng + ?Sized>(
    problem: &LmdpProblem,
    region: &[(f64, f64)],
    count: usize,
    reset_steps: usize,
    rng: &mut R,
) -> Result<Vec<PassiveSample>> {
    if reset_steps == 0 {
        return Err(Error::Config("data.reset_steps must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(count);
    let mut x = sample_box(region, rng);
    let mut age = 0;
    while out.len() < count {
        let next = problem.dynamics.step_passive(&x, rng)?;
        let q = problem.cost_increment(&x);
        let keep = next.is_finite() && inside(&next, region);
        out.push(PassiveSample::new(x, next.clone(), q)?);
        age += 1;
        if keep && age < reset_steps {
            x = next;
        } else {
            x = sample_box(region, rng);
            age = 0;
        }
    }
    Ok(out)
}

fn from_logs(
    cfg: &ExperimentConfig,
    problem: &LmdpProblem,
    logs: Vec<TrajectoryLog>,
    direct: Option<Vec<Vec<PassiveSample>>>,
) -> Result<TrainingData> {
    let mut data = TrainingData::default();
    for (i, log) in logs.iter().enumerate() {
        let s = match &direct {
            Some(d) => d[i].clone(),
            None => reconstruct_passive(log, problem, cfg.data.reconstruction)?,
        };
        let start = data.samples.len();
        data.samples.extend(s);
        data.spans.push(start..data.samples.len());
    }
    data.logs = logs;
    Ok(data)
}

/// Gathers the training data described by `cfg.data`.
pub fn gather(cfg: &ExperimentConfig, domain: &dyn Domain, problem: &LmdpProblem) -> Result<TrainingData> {
    let mut rng = seed::stream_rng(cfg.seed, seed::DATA, 0);
    let data = match cfg.data.source {
        DataSource::Simulator => {
            let region = cfg.data.region.clone().unwrap_or_else(|| domain.sample_region());
            let samples = simulator_samples(problem, &region, cfg.data.buffer, cfg.data.reset_steps, &mut rng)?;
            TrainingData {
                spans: vec![0..samples.len()],
                samples,
                logs: Vec::new(),
            }
        }
        DataSource::Trajectories => {
            let path = cfg.data.path.as_ref().expect("validated");
            let d = &problem.dynamics;
            let schema = cfg
                .data
                .schema
                .clone()
                .unwrap_or_else(|| TrajectorySchema::standard(d.state_dim(), d.action_dim(), d.dt()));
            let loaded = load_trajectories(path, &schema)?;
            from_logs(cfg, problem, loaded.logs, None)?
        }
        DataSource::Replay => {
            let mut replay_rng = seed::stream_rng(cfg.seed, seed::REPLAY, 0);
            let replay = generate_replay(
                problem,
                &cfg.data.replay_controller,
                cfg.data.replay_trajectories,
                cfg.data.replay_steps,
                &mut replay_rng,
            )?;
            let direct = if cfg.data.direct_passive {
                let mut per_log = Vec::with_capacity(replay.logs.len());
                for (log, noise) in replay.logs.iter().zip(&replay.noise) {
                    let one = crate::ingest::ReplayDataset {
                        logs: vec![log.clone()],
                        noise: vec![noise.clone()],
                    };
                    per_log.push(one.direct_passive(problem)?);
                }
                Some(per_log)
            } else {
                None
            };
            from_logs(cfg, problem, replay.logs, direct)?
        }
    };
    if data.samples.is_empty() {
        return Err(Error::InsufficientData {
            what: "training samples",
            needed: 1,
            got: 0,
        });
    }
    Ok(data)
}
