//! Registries of learning methods and value-function approximators.

use std::sync::Arc;

use rand::RngCore;

use crate::approx::{MlpZ, OutputActivation, RbfZ, TabularZ, ZApproximator, DEFAULT_HIDDEN};
use crate::domains::Domain;
use crate::error::Result;
use crate::lmdp::{true_control_cost_matrix, ControlCostMatrix, LmdpProblem};
use crate::registry::Registry;

use super::config::ExperimentConfig;

/// How the control-cost matrix behind the policy is obtained.
pub trait Method: Send + Sync {
    fn name(&self) -> &'static str;
    /// Whether the actor learns `S` from TD errors.
    fn learns_s(&self) -> bool;
    /// `S` for methods that do not learn it.
    fn fixed_s(&self, problem: &LmdpProblem) -> Result<Option<ControlCostMatrix>>;
}

/// Passive actor-critic: critic plus an actor that learns `S`.
pub struct Pac;

/// Critic only, with `S` from the known `B` and sigma.
pub struct ZLearning;

impl Method for Pac {
    fn name(&self) -> &'static str {
        "pac"
    }
    fn learns_s(&self) -> bool {
        true
    }
    fn fixed_s(&self, _problem: &LmdpProblem) -> Result<Option<ControlCostMatrix>> {
        Ok(None)
    }
}

impl Method for ZLearning {
    fn name(&self) -> &'static str {
        "zlearning"
    }
    fn learns_s(&self) -> bool {
        false
    }
    fn fixed_s(&self, problem: &LmdpProblem) -> Result<Option<ControlCostMatrix>> {
        let d = &problem.dynamics;
        true_control_cost_matrix(d.input_gain(), d.noise()).map(Some)
    }
}

pub fn method_registry() -> Registry<dyn Method> {
    let mut r: Registry<dyn Method> = Registry::new("method");
    r.register("pac", Arc::new(Pac)).register("zlearning", Arc::new(ZLearning));
    r
}

pub trait ApproxFactory: Send + Sync {
    fn build(
        &self,
        domain: &dyn Domain,
        cfg: &ExperimentConfig,
        range: &[(f64, f64)],
        rng: &mut dyn RngCore,
    ) -> Result<Box<dyn ZApproximator>>;
}

struct RbfFactory;
struct MlpFactory;
struct TabularFactory;

/// Angle dimensions whose range is exactly one turn `[-pi, pi]`.
fn full_turn_dims(domain: &dyn Domain, cfg: &ExperimentConfig, range: &[(f64, f64)]) -> Vec<usize> {
    let problem = domain.problem(cfg.cost_repair);
    problem
        .dynamics
        .angle_dims()
        .iter()
        .copied()
        .filter(|&d| {
            range.get(d).is_some_and(|&(lo, hi)| {
                (lo + std::f64::consts::PI).abs() < 1e-9 && (hi - std::f64::consts::PI).abs() < 1e-9
            })
        })
        .collect()
}

impl ApproxFactory for RbfFactory {
    fn build(
        &self,
        domain: &dyn Domain,
        cfg: &ExperimentConfig,
        range: &[(f64, f64)],
        _rng: &mut dyn RngCore,
    ) -> Result<Box<dyn ZApproximator>> {
        let counts = cfg.approx.rbf_counts.clone().unwrap_or_else(|| domain.rbf_counts());
        let rbf = RbfZ::build_grid(range, &counts, cfg.critic.c)?;
        Ok(Box::new(rbf.with_periodic_dims(&full_turn_dims(domain, cfg, range))?))
    }
}

impl ApproxFactory for TabularFactory {
    fn build(
        &self,
        domain: &dyn Domain,
        cfg: &ExperimentConfig,
        range: &[(f64, f64)],
        _rng: &mut dyn RngCore,
    ) -> Result<Box<dyn ZApproximator>> {
        let counts = cfg.approx.rbf_counts.clone().unwrap_or_else(|| domain.rbf_counts());
        Ok(Box::new(TabularZ::new(range, &counts, cfg.critic.c)?))
    }
}

impl ApproxFactory for MlpFactory {
    fn build(
        &self,
        domain: &dyn Domain,
        cfg: &ExperimentConfig,
        range: &[(f64, f64)],
        rng: &mut dyn RngCore,
    ) -> Result<Box<dyn ZApproximator>> {
        let hidden = cfg.approx.mlp_hidden.clone().unwrap_or_else(|| DEFAULT_HIDDEN.to_vec());
        let output = match &cfg.approx.mlp_output {
            Some(name) => OutputActivation::from_name(name)?,
            None => domain.mlp_output(),
        };
        Ok(Box::new(MlpZ::new(range, &hidden, output, rng)?))
    }
}

pub fn approximator_registry() -> Registry<dyn ApproxFactory> {
    let mut r: Registry<dyn ApproxFactory> = Registry::new("approximator");
    r.register("rbf", Arc::new(RbfFactory))
        .register("mlp", Arc::new(MlpFactory))
        .register("tabular", Arc::new(TabularFactory));
    r
}
