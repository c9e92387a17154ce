//! Experiment configuration, read from TOML.
//!
//! ```toml
//! domain = "pendulum"        # car_on_hill | pendulum | merge | double_well
//! approximator = "rbf"       # rbf | mlp | tabular
//! method = "pac"             # pac | zlearning | zlearning_est
//! seed = 1
//! iterations = 200000
//! checkpoints = 20
//!
//! [critic]
//! alpha1 = 1.0
//! alpha2 = 1.0
//! decay = 50000              # optional 1 / (1 + i / decay) schedule
//!
//! [actor]
//! beta = 0.01
//! mode = "full"              # full | semi
//!
//! [data]
//! source = "simulator"       # simulator | trajectories | replay
//! buffer = 100000
//!
//! [eval]
//! starts = 100
//! ```
//!
//! Every key except `domain` has a default; see the field docs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::actor::GradientMode;
use crate::domains::CostRepair;
use crate::error::{Error, Result};
use crate::ingest::{Reconstruction, ScriptedMerge, TrajectorySchema};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: String,
    #[serde(default = "default_approximator")]
    pub approximator: String,
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    /// Evaluations along training, besides iteration 0.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: u64,
    /// Write a parameter snapshot at every checkpoint.
    #[serde(default)]
    pub save_checkpoints: bool,
    /// Trace CSV of TD errors every this many iterations (0 = off).
    #[serde(default)]
    pub trace_every: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub cost_repair: CostRepair,
    #[serde(default)]
    pub critic: CriticConfig,
    #[serde(default)]
    pub actor: ActorConfig,
    #[serde(default)]
    pub approx: ApproxConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_approximator() -> String {
    "rbf".into()
}
fn default_method() -> String {
    "pac".into()
}
fn default_iterations() -> u64 {
    100_000
}
fn default_checkpoints() -> u64 {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub decay: Option<f64>,
    /// Integral of `Z` for linear models.
    pub c: f64,
    pub z_avg: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            decay: None,
            c: 1.0,
            z_avg: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActorConfig {
    pub beta: f64,
    pub decay: Option<f64>,
    pub mode: GradientMode,
    /// Initial `S = s0 I`.
    pub s0: f64,
    /// Actor updates start after this many iterations.
    pub warmup: u64,
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            decay: None,
            mode: GradientMode::Full,
            s0: 1.0,
            warmup: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ApproxConfig {
    /// Input range; defaults to the domain's sample region.
    pub range: Option<Vec<(f64, f64)>>,
    pub rbf_counts: Option<Vec<usize>>,
    pub mlp_hidden: Option<Vec<usize>>,
    /// `exp_neg_tanh` or `exp_neg_softplus`.
    pub mlp_output: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Simulator,
    Trajectories,
    Replay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Passive samples gathered from the simulator.
    pub buffer: usize,
    /// Passive rollouts restart after this many steps.
    pub reset_steps: usize,
    /// Rollouts restart on leaving this box; defaults to the domain's sample region.
    pub region: Option<Vec<(f64, f64)>>,
    pub path: Option<PathBuf>,
    pub schema: Option<TrajectorySchema>,
    pub reconstruction: Reconstruction,
    /// Rebalance ingested samples to this many by nearest-neighbour draws.
    pub resample: Option<usize>,
    /// Use the simulator's passive successors instead of reconstruction
    /// (replay source only).
    pub direct_passive: bool,
    pub replay_trajectories: usize,
    pub replay_steps: usize,
    pub replay_controller: ScriptedMerge,
    /// Cross-validation folds over trajectories (0 = off).
    pub folds: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Simulator,
            buffer: 100_000,
            reset_steps: 500,
            region: None,
            path: None,
            schema: None,
            reconstruction: Reconstruction::Corrected,
            resample: None,
            direct_passive: false,
            replay_trajectories: 200,
            replay_steps: 300,
            replay_controller: ScriptedMerge::default(),
            folds: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalCostMatrix {
    /// The method's own estimate of `S`.
    #[default]
    Own,
    /// `S` computed from the true `B` and sigma.
    True,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Rollout length; defaults to the domain's window.
    pub window_s: Option<f64>,
    pub starts: usize,
    /// Start states for the merge success rate.
    pub success_starts: usize,
    pub action_limit: Option<f64>,
    pub cost_matrix: EvalCostMatrix,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window_s: None,
            starts: 100,
            success_starts: 125,
            action_limit: None,
            cost_matrix: EvalCostMatrix::Own,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Minimal config for `domain` with defaults elsewhere.
    pub fn for_domain(domain: &str) -> Self {
        Self::from_toml(&format!("domain = \"{domain}\"")).expect("default config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations < 1 {
            return bad("iterations must be >= 1".into());
        }
        for (name, v) in [
            ("critic.alpha1", self.critic.alpha1),
            ("critic.alpha2", self.critic.alpha2),
            ("actor.beta", self.actor.beta),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(self.critic.c > 0.0) {
            return bad("critic.c must be > 0".into());
        }
        if !(self.critic.z_avg > 0.0 && self.critic.z_avg <= 1.0) {
            return bad("critic.z_avg must be in (0, 1]".into());
        }
        if !(self.actor.s0 > 0.0) {
            return bad("actor.s0 must be > 0".into());
        }
        if let Some(w) = self.eval.window_s {
            if !(w > 0.0) {
                return bad("eval.window_s must be > 0".into());
            }
        }
        if self.eval.starts == 0 {
            return bad("eval.starts must be >= 1".into());
        }
        if self.data.source == DataSource::Trajectories && self.data.path.is_none() {
            return bad("data.path is required for trajectory data".into());
        }
        if self.data.folds == 1 {
            return bad("data.folds must be 0 or >= 2".into());
        }
        Ok(())
    }
}
