//! The training loop: sample a passive transition, update the critic, then
//! the actor.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::actor::{actor_td, update_s, ActorState, ValueModel};
use crate::critic::{CriticState, RateSchedule};
use crate::domains::Domain;
use crate::error::{Error, Result};
use crate::lmdp::{ControlCostMatrix, LmdpProblem, PassiveSample};
use crate::policy::GreedyPolicy;

use super::config::{EvalCostMatrix, ExperimentConfig};
use super::methods::{approximator_registry, method_registry, Method};
use super::seed;

/// Critic, actor and the method that decides how `S` is obtained.
#[derive(Clone)]
pub struct Learner {
    pub critic: CriticState,
    pub actor: ActorState,
    pub method: Arc<dyn Method>,
    /// `S` of methods that do not learn it.
    pub fixed_s: Option<ControlCostMatrix>,
}

impl Learner {
    pub fn new(cfg: &ExperimentConfig, domain: &dyn Domain, problem: &LmdpProblem) -> Result<Self> {
        let method = method_registry().get(&cfg.method)?;
        let factory = approximator_registry().get(&cfg.approximator)?;
        let range = cfg.approx.range.clone().unwrap_or_else(|| domain.sample_region());
        let mut rng = seed::stream_rng(cfg.seed, seed::INIT, 0);
        let approx = factory.build(domain, cfg, &range, &mut rng)?;
        let schedule = |rate: f64, decay: Option<f64>| match decay {
            Some(tau) => RateSchedule::decaying(rate, tau),
            None => RateSchedule::constant(rate),
        };
        let critic = CriticState::new(
            approx,
            cfg.critic.z_avg,
            schedule(cfg.critic.alpha1, cfg.critic.decay),
            schedule(cfg.critic.alpha2, cfg.critic.decay),
            cfg.critic.c,
        )?;
        let m = problem.dynamics.action_dim();
        let s0 = ControlCostMatrix::new(nalgebra::DMatrix::identity(m, m) * cfg.actor.s0)?;
        let actor = ActorState::with_initial(s0, schedule(cfg.actor.beta, cfg.actor.decay), cfg.actor.mode);
        let fixed_s = method.fixed_s(problem)?;
        Ok(Self {
            critic,
            actor,
            method,
            fixed_s,
        })
    }

    /// `S` used by the policy.
    pub fn s(&self) -> &ControlCostMatrix {
        self.fixed_s.as_ref().unwrap_or(&self.actor.s_hat)
    }

    /// Frozen greedy policy on a copy of the current critic.
    pub fn policy(&self, problem: &LmdpProblem, limit: Option<f64>, pricing: EvalCostMatrix) -> Result<GreedyPolicy> {
        let value: Arc<dyn ValueModel> = Arc::new(self.critic.clone());
        let policy = GreedyPolicy::new(value, self.s().clone(), problem.dynamics.input_gain().clone(), limit);
        Ok(match pricing {
            EvalCostMatrix::Own => policy,
            EvalCostMatrix::True => {
                let d = &problem.dynamics;
                policy.priced_with(crate::lmdp::true_control_cost_matrix(d.input_gain(), d.noise())?)
            }
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct TrainStats {
    pub iterations: u64,
    /// Actor updates skipped because the value model failed at a state.
    pub actor_skips: u64,
}

/// Iterations at which the policy is evaluated: 0, then `checkpoints`
/// evenly spaced points ending at `iterations`.
pub fn checkpoint_schedule(iterations: u64, checkpoints: u64) -> Vec<u64> {
    let k = checkpoints.max(1);
    let mut out = vec![0];
    for i in 1..=k {
        let it = (iterations as u128 * i as u128 / k as u128) as u64;
        if it > *out.last().expect("non-empty") {
            out.push(it);
        }
    }
    out
}

fn param_norm(p: &[f64]) -> f64 {
    p.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Runs iterations `learner.critic.iteration .. until`, drawing samples
/// uniformly from `samples`.
pub fn train_until(
    cfg: &ExperimentConfig,
    learner: &mut Learner,
    problem: &LmdpProblem,
    samples: &[PassiveSample],
    until: u64,
    rng: &mut ChaCha8Rng,
    stats: &mut TrainStats,
    mut trace: Option<&mut dyn Write>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InsufficientData {
            what: "training samples",
            needed: 1,
            got: 0,
        });
    }
    let b = problem.dynamics.input_gain().clone();
    let dt = problem.dynamics.dt();
    let learns_s = learner.method.learns_s();
    while learner.critic.iteration < until {
        let i = learner.critic.iteration;
        let sample = &samples[rng.random_range(0..samples.len())];
        let td = learner.critic.step(sample).map_err(|e| Error::TrainingAborted {
            iteration: i,
            diagnostics: format!(
                "sample x = {:?}, x_next = {:?}, q = {}; z_avg = {}; |params| = {}; S = {:?}",
                sample.x.0,
                sample.x_next.0,
                sample.q,
                learner.critic.z_avg,
                param_norm(learner.critic.approx.params()),
                learner.actor.s_hat.entries()
            ),
            source: Box::new(e),
        })?;
        let mut d = f64::NAN;
        if learns_s && i >= cfg.actor.warmup {
            match actor_td(&learner.actor, &learner.critic, sample, &b, dt) {
                Ok(atd) => {
                    d = atd.d;
                    update_s(&mut learner.actor, &atd, &b, dt);
                }
                Err(_) => stats.actor_skips += 1,
            }
        }
        stats.iterations += 1;
        if cfg.trace_every > 0 && i % cfg.trace_every == 0 {
            if let Some(w) = trace.as_deref_mut() {
                writeln!(
                    w,
                    "{i},{:?},{:?},{:?},{:?}",
                    td.e,
                    learner.critic.z_avg,
                    d,
                    learner.actor.s_hat.matrix()[(0, 0)]
                )
                .map_err(|e| Error::io("<trace>", e))?;
            }
        }
    }
    Ok(())
}

pub const TRACE_HEADER: &str = "iteration,critic_td,z_avg,actor_td,s00";

/// Trains a fresh learner for `cfg.iterations` iterations.
pub fn train(
    cfg: &ExperimentConfig,
    domain: &dyn Domain,
    problem: &LmdpProblem,
    samples: &[PassiveSample],
) -> Result<(Learner, TrainStats)> {
    let mut learner = Learner::new(cfg, domain, problem)?;
    let mut rng = seed::stream_rng(cfg.seed, seed::TRAIN, 0);
    let mut stats = TrainStats::default();
    train_until(cfg, &mut learner, problem, samples, cfg.iterations, &mut rng, &mut stats, None)?;
    Ok((learner, stats))
}
