//! Benchmark problems: Car-on-a-Hill, Pendulum, the three-car freeway merge,
//! and a one-dimensional double well used by the discretized oracle.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::approx::OutputActivation;
use crate::error::{Error, Result};
use crate::lmdp::{DynamicsModel, LmdpProblem};
use crate::registry::Registry;

/// How the Car-on-a-Hill and Pendulum cost formulas, which are `<= 0` as
/// written, are made nonnegative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostRepair {
    /// `max(q, 0)`. Identically zero for these two formulas.
    Clamp,
    /// `q - inf q`; the wells become cost peaks.
    Offset,
    /// `max(0, -q - 4)`: the wells become zero-cost targets.
    #[default]
    Mirror,
}

impl CostRepair {
    fn apply(self, raw: f64, infimum: f64, single_well_peak: f64) -> f64 {
        match self {
            CostRepair::Clamp => raw,
            CostRepair::Offset => raw - infimum,
            CostRepair::Mirror => (single_well_peak - raw).max(0.0),
        }
    }
}

fn hill_shape(xp: f64) -> f64 {
    0.5 * xp * (-xp * xp).exp()
}

fn hill_drift(x: &[f64], out: &mut [f64]) {
    let (xp, xv) = (x[0], x[1]);
    let s = hill_shape(xp);
    out[0] = xv * (1.0 + s).powf(-0.5);
    out[1] = if s == 0.0 {
        0.0
    } else {
        -9.8 * xp.signum() * (1.0 + s.powi(-2)).powf(-0.5)
    };
}

pub fn hill_raw_cost(x: &[f64]) -> f64 {
    let (xp, xv) = (x[0], x[1]);
    4.0 * ((-0.5 * (xp - 1.0).powi(2) - (xv + 1.0).powi(2)).exp()
        + (-0.5 * (xp + 1.0).powi(2) - (xv - 1.0).powi(2)).exp()
        - 2.0)
}

pub fn pendulum_raw_cost(x: &[f64]) -> f64 {
    let xv = x[1];
    4.0 * ((-(xv - 3.0).powi(2)).exp() + (-(xv + 3.0).powi(2)).exp() - 2.0)
}

pub fn make_car_on_hill() -> LmdpProblem {
    make_car_on_hill_with(CostRepair::default())
}

pub fn make_car_on_hill_with(repair: CostRepair) -> LmdpProblem {
    let dynamics = DynamicsModel::new(
        hill_drift,
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        vec![0.0, 1.0],
        0.01,
    )
    .expect("static model");
    LmdpProblem::new(
        "car_on_hill",
        dynamics,
        move |x| repair.apply(hill_raw_cost(x), -8.0, -4.0),
        vec![(-2.0 * PI, 2.0 * PI), (-PI, PI)],
    )
    .expect("static problem")
}

pub fn make_pendulum() -> LmdpProblem {
    make_pendulum_with(CostRepair::default())
}

pub fn make_pendulum_with(repair: CostRepair) -> LmdpProblem {
    let dynamics = DynamicsModel::new(
        |x, out| {
            out[0] = x[1];
            out[1] = x[0].sin();
        },
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        vec![0.0, 2.0],
        0.01,
    )
    .expect("static model")
    .with_angle_dims(vec![0]);
    LmdpProblem::new(
        "pendulum",
        dynamics,
        move |x| repair.apply(pendulum_raw_cost(x), -8.0, -4.0),
        vec![(-2.0 * PI, 2.0 * PI), (-PI, PI)],
    )
    .expect("static problem")
}

// ---------------------------------------------------------------------------
// freeway merge

pub const LEADER_SPEED: f64 = 30.0;
pub const MERGE_DT: f64 = 0.1;
/// Bound on the ambient follower's acceleration (m/s^2).
pub const FOLLOWER_ACCEL_LIMIT: f64 = 8.0;
/// Smallest gap (m) used by the follower model inside the simulator.
pub const MIN_FOLLOW_GAP: f64 = 1.0;

/// `[dx12, dv12, dx02, dv02]`: car 1 is the merging ego vehicle, car 0 the
/// follower and car 2 the leader; `dxij`/`dvij` are signed distance and
/// relative velocity of car `i` with respect to car `j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeState {
    pub dx12: f64,
    pub dv12: f64,
    pub dx02: f64,
    pub dv02: f64,
}

impl MergeState {
    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            dx12: x[0],
            dv12: x[1],
            dx02: x[2],
            dv02: x[3],
        }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.dx12, self.dv12, self.dx02, self.dv02]
    }

    /// Ego speed relative to the follower.
    pub fn dv10(&self) -> f64 {
        self.dv12 - self.dv02
    }

    /// Ego strictly between follower and leader.
    pub fn merged(&self) -> bool {
        self.dx02 < self.dx12 && self.dx12 < 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CarFollowingParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub v2: f64,
}

impl CarFollowingParams {
    /// Parameter set for the follower's relative speed.
    pub fn for_relative_speed(dv02: f64) -> Self {
        if dv02 < 0.0 {
            Self {
                alpha: 1.55,
                beta: 1.08,
                gamma: 1.65,
                v2: LEADER_SPEED,
            }
        } else {
            Self {
                alpha: 2.15,
                beta: -1.65,
                gamma: -0.89,
                v2: LEADER_SPEED,
            }
        }
    }
}

fn follower_accel(gap: f64, dv02: f64, p: &CarFollowingParams) -> f64 {
    let a = p.alpha * p.v2.powf(p.beta) * (-dv02) / gap.powf(p.gamma);
    a.clamp(-FOLLOWER_ACCEL_LIMIT, FOLLOWER_ACCEL_LIMIT)
}

/// `a0 = alpha v2^beta (-dv02) / (-dx02)^gamma`, clamped to
/// `+-FOLLOWER_ACCEL_LIMIT`.
pub fn car_following_accel(state: &MergeState, params: &CarFollowingParams) -> Result<f64> {
    if !(state.dx02 < 0.0) {
        return Err(Error::FollowerAhead { dx02: state.dx02 });
    }
    Ok(follower_accel(-state.dx02, state.dv02, params))
}

fn merge_drift(x: &[f64], out: &mut [f64]) {
    let s = MergeState::from_slice(x);
    let p = CarFollowingParams::for_relative_speed(s.dv02);
    let a0 = follower_accel((-s.dx02).max(MIN_FOLLOW_GAP), s.dv02, &p);
    out[0] = s.dv12;
    out[1] = 0.0;
    out[2] = s.dv02 + 0.5 * a0 * MERGE_DT;
    out[3] = a0;
}

pub fn merge_cost(x: &[f64]) -> f64 {
    let s = MergeState::from_slice(x);
    let (k1, k2, k3) = if s.merged() {
        (1.0, 10.0, 10.0)
    } else {
        (10.0, 10.0, 0.0)
    };
    let r = 1.0 - 2.0 * s.dx12 / s.dx02;
    if !r.is_finite() {
        return k1;
    }
    k1 - k1 * (-k2 * r * r - k3 * s.dv10().powi(2)).exp()
}

pub fn make_merge() -> LmdpProblem {
    let dynamics = DynamicsModel::new(
        merge_drift,
        DMatrix::from_column_slice(4, 1, &[0.5 * MERGE_DT, 1.0, 0.0, 0.0]),
        vec![0.0, 2.5, 0.0, 2.5],
        MERGE_DT,
    )
    .expect("static model");
    LmdpProblem::new(
        "merge",
        dynamics,
        merge_cost,
        vec![(-100.0, 100.0), (-10.0, 10.0), (-100.0, -5.0), (-10.0, 10.0)],
    )
    .expect("static problem")
}

// ---------------------------------------------------------------------------
// one-dimensional double well

pub fn double_well_cost(x: &[f64]) -> f64 {
    1.0 - (-2.0 * (x[0] - 1.0).powi(2)).exp()
}

/// `dx = (x - x^3) dt + u dt + dw`, cheap near `x = 1`.
pub fn make_double_well() -> LmdpProblem {
    let dynamics = DynamicsModel::new(
        |x, out| out[0] = x[0] - x[0].powi(3),
        DMatrix::from_element(1, 1, 1.0),
        vec![1.0],
        0.1,
    )
    .expect("static model");
    LmdpProblem::new("double_well", dynamics, double_well_cost, vec![(-2.0, 2.0)])
        .expect("static problem")
}

// ---------------------------------------------------------------------------
// registry

/// A benchmark problem plus the settings the harness needs to run it.
pub trait Domain: Send + Sync {
    fn name(&self) -> &'static str;
    fn problem(&self, repair: CostRepair) -> LmdpProblem;
    /// Length of one evaluation rollout in seconds.
    fn eval_window_s(&self) -> f64;
    /// Passive rollouts restart when they leave this box.
    fn sample_region(&self) -> Vec<(f64, f64)>;
    fn rbf_counts(&self) -> Vec<usize>;
    fn mlp_output(&self) -> OutputActivation {
        OutputActivation::ExpNegSoftplus
    }
    /// Terminal success test, for domains that define one.
    fn success(&self, _x: &[f64]) -> Option<bool> {
        None
    }
}

struct CarOnHill;
struct Pendulum;
struct Merge;
struct DoubleWell;

impl Domain for CarOnHill {
    fn name(&self) -> &'static str {
        "car_on_hill"
    }
    fn problem(&self, repair: CostRepair) -> LmdpProblem {
        make_car_on_hill_with(repair)
    }
    fn eval_window_s(&self) -> f64 {
        10.0
    }
    fn sample_region(&self) -> Vec<(f64, f64)> {
        vec![(-2.0 * PI, 2.0 * PI), (-PI, PI)]
    }
    fn rbf_counts(&self) -> Vec<usize> {
        vec![20, 20]
    }
    fn mlp_output(&self) -> OutputActivation {
        OutputActivation::ExpNegTanh
    }
}

impl Domain for Pendulum {
    fn name(&self) -> &'static str {
        "pendulum"
    }
    fn problem(&self, repair: CostRepair) -> LmdpProblem {
        make_pendulum_with(repair)
    }
    fn eval_window_s(&self) -> f64 {
        10.0
    }
    fn sample_region(&self) -> Vec<(f64, f64)> {
        vec![(-PI, PI), (-6.0, 6.0)]
    }
    fn rbf_counts(&self) -> Vec<usize> {
        vec![20, 20]
    }
}

impl Domain for Merge {
    fn name(&self) -> &'static str {
        "merge"
    }
    fn problem(&self, _repair: CostRepair) -> LmdpProblem {
        make_merge()
    }
    fn eval_window_s(&self) -> f64 {
        30.0
    }
    fn sample_region(&self) -> Vec<(f64, f64)> {
        vec![(-100.0, 100.0), (-10.0, 10.0), (-100.0, 0.0), (-10.0, 10.0)]
    }
    fn rbf_counts(&self) -> Vec<usize> {
        vec![8, 8, 8, 8]
    }
    fn success(&self, x: &[f64]) -> Option<bool> {
        Some(MergeState::from_slice(x).merged())
    }
}

impl Domain for DoubleWell {
    fn name(&self) -> &'static str {
        "double_well"
    }
    fn problem(&self, _repair: CostRepair) -> LmdpProblem {
        make_double_well()
    }
    fn eval_window_s(&self) -> f64 {
        10.0
    }
    fn sample_region(&self) -> Vec<(f64, f64)> {
        vec![(-2.5, 2.5)]
    }
    fn rbf_counts(&self) -> Vec<usize> {
        vec![21]
    }
}

pub fn domain_registry() -> Registry<dyn Domain> {
    let mut r: Registry<dyn Domain> = Registry::new("domain");
    r.register("car_on_hill", Arc::new(CarOnHill))
        .register("pendulum", Arc::new(Pendulum))
        .register("merge", Arc::new(Merge))
        .register("double_well", Arc::new(DoubleWell));
    r
}
