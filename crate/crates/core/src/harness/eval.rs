//! Policy evaluation: average cost over fixed-length rollouts and the merge
//! success rate, in the simulator or against recorded traffic.

use rand::SeedableRng;
use rayon::prelude::*;
use serde::Serialize;

use crate::domains::MergeState;
use crate::error::{Error, Result};
use crate::ingest::TrajectoryLog;
use crate::lmdp::{LmdpProblem, StateVec};
use crate::policy::Policy;

use super::seed;

/// Rollouts stop once the state norm exceeds this.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostEval {
    pub mean_cost: f64,
    pub per_rollout: Vec<f64>,
    /// Rollouts truncated by divergence.
    pub diverged: usize,
}

/// Number of steps in `window_s`, which must be a whole number of steps.
pub fn window_steps(window_s: f64, dt: f64) -> Result<usize> {
    let steps = (window_s / dt).round();
    if !(steps >= 1.0) || (steps * dt - window_s).abs() > 1e-9 * window_s.max(1.0) {
        return Err(Error::Config(format!(
            "window {window_s} s is not a whole number of {dt} s steps"
        )));
    }
    Ok(steps as usize)
}

fn diverged(x: &StateVec) -> bool {
    !x.is_finite() || x.iter().map(|v| v * v).sum::<f64>().sqrt() > DIVERGENCE_NORM
}

/// One controlled rollout; returns the accumulated cost, whether it was
/// truncated, and the final state.
fn rollout(
    policy: &dyn Policy,
    problem: &LmdpProblem,
    steps: usize,
    rng_seed: u64,
) -> Result<(f64, bool, StateVec)> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
    let mut x = problem.sample_initial(&mut rng);
    let mut total = 0.0;
    for _ in 0..steps {
        let u = policy.act(&x);
        total += problem.total_cost(&x, &u, policy.cost_matrix())?;
        match problem.dynamics.step_controlled(&x, &u, &mut rng) {
            Ok(next) if !diverged(&next) => x = next,
            Ok(next) => return Ok((total, true, next)),
            Err(Error::NonFiniteDrift { .. }) | Err(Error::NonFinite(_)) => return Ok((total, true, x)),
            Err(e) => return Err(e),
        }
    }
    Ok((total, false, x))
}

/// Mean total cost of `n_starts` rollouts of `window_s` seconds from the
/// initial region. Rollout `r` uses `split_seed(seed, EVAL, r)`.
pub fn evaluate_average_cost(
    policy: &dyn Policy,
    problem: &LmdpProblem,
    window_s: f64,
    n_starts: usize,
    seed_value: u64,
) -> Result<CostEval> {
    let steps = window_steps(window_s, problem.dynamics.dt())?;
    let results: Vec<(f64, bool, StateVec)> = (0..n_starts)
        .into_par_iter()
        .map(|r| rollout(policy, problem, steps, seed::split_seed(seed_value, seed::EVAL, r as u64)))
        .collect::<Result<_>>()?;
    let per_rollout: Vec<f64> = results.iter().map(|r| r.0).collect();
    let diverged = results.iter().filter(|r| r.1).count();
    if diverged > 0 {
        log::warn!("{diverged} of {n_starts} evaluation rollouts diverged and were truncated");
    }
    Ok(CostEval {
        mean_cost: per_rollout.iter().sum::<f64>() / n_starts.max(1) as f64,
        per_rollout,
        diverged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuccessEval {
    pub rate: f64,
    pub successes: usize,
    pub n: usize,
    /// Cases scored early: diverged rollouts, or logs shorter than the horizon.
    pub flagged: usize,
}

impl SuccessEval {
    fn from_outcomes(outcomes: &[(bool, bool)]) -> Self {
        let successes = outcomes.iter().filter(|o| o.0).count();
        let n = outcomes.len();
        Self {
            rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
            successes,
            n,
            flagged: outcomes.iter().filter(|o| o.1).count(),
        }
    }
}

/// Fraction of simulated merges that end with the ego between follower and
/// leader after `horizon_s`. Start `r` uses `split_seed(seed, SUCCESS, r)`.
pub fn evaluate_merge_success(
    policy: &dyn Policy,
    problem: &LmdpProblem,
    n_starts: usize,
    horizon_s: f64,
    seed_value: u64,
) -> Result<SuccessEval> {
    let steps = window_steps(horizon_s, problem.dynamics.dt())?;
    let outcomes: Vec<(bool, bool)> = (0..n_starts)
        .into_par_iter()
        .map(|r| {
            let (_, truncated, x) =
                rollout(policy, problem, steps, seed::split_seed(seed_value, seed::SUCCESS, r as u64))?;
            Ok((!truncated && MergeState::from_slice(&x).merged(), truncated))
        })
        .collect::<Result<_>>()?;
    Ok(SuccessEval::from_outcomes(&outcomes))
}

/// Replay scoring: follower and leader follow each log while the ego starts
/// from the logged state and moves under the policy through the noiseless
/// control dynamics `dx12' = dv12 + b0 u`, `dv12' = b1 u`. A log shorter
/// than the horizon is scored at its last row and flagged.
pub fn evaluate_merge_replay(
    policy: &dyn Policy,
    problem: &LmdpProblem,
    logs: &[TrajectoryLog],
    horizon_s: f64,
) -> Result<SuccessEval> {
    let dt = problem.dynamics.dt();
    let steps = window_steps(horizon_s, dt)?;
    let b = problem.dynamics.input_gain();
    if problem.dynamics.state_dim() != 4 || b.ncols() != 1 {
        return Err(Error::Config("replay scoring needs the merge problem".into()));
    }
    let outcomes: Vec<(bool, bool)> = logs
        .par_iter()
        .map(|log| {
            if log.is_empty() {
                return (false, true);
            }
            let end = steps.min(log.len() - 1);
            let short = end < steps;
            let mut ego = [log.x[0][0], log.x[0][1]];
            for k in 0..end {
                let x = [ego[0], ego[1], log.x[k][2], log.x[k][3]];
                let u = policy.act(&x)[0];
                ego = [
                    ego[0] + (ego[1] + b[(0, 0)] * u) * dt,
                    ego[1] + b[(1, 0)] * u * dt,
                ];
                if !ego[0].is_finite() || !ego[1].is_finite() {
                    return (false, true);
                }
            }
            let last = MergeState {
                dx12: ego[0],
                dv12: ego[1],
                dx02: log.x[end][2],
                dv02: log.x[end][3],
            };
            (last.merged(), short)
        })
        .collect();
    Ok(SuccessEval::from_outcomes(&outcomes))
}
