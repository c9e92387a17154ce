//! Actor: learns the control-cost matrix `S` by SGD on the squared Bellman
//! TD error `d_k`, using the critic's value estimate and the known input gain.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::critic::{CriticState, RateSchedule};
use crate::error::{Error, Result};
use crate::lmdp::{policy, project_to_action, ActionVec, ControlCostMatrix, PassiveSample, StateVec};

/// Floor for the eigenvalues of the estimated `S`.
pub const S_FLOOR: f64 = 1e-6;

/// Anything that provides `V(x)`, `dV/dx` and `V_avg`.
pub trait ValueModel: Send + Sync {
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
    fn v_avg(&self) -> f64;
}

impl ValueModel for CriticState {
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.v_and_grad(x)
    }

    fn v_avg(&self) -> f64 {
        CriticState::v_avg(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Differentiates through `u_hat` and `x_tilde` as well.
    #[default]
    Full,
    /// Control-cost term only.
    Semi,
}

#[derive(Debug)]
pub struct ActorState {
    pub s_hat: ControlCostMatrix,
    pub beta: RateSchedule,
    pub mode: GradientMode,
    pub iteration: u64,
    underflows: AtomicU64,
}

impl Clone for ActorState {
    fn clone(&self) -> Self {
        Self {
            s_hat: self.s_hat.clone(),
            beta: self.beta,
            mode: self.mode,
            iteration: self.iteration,
            underflows: AtomicU64::new(self.underflows()),
        }
    }
}

/// Bellman TD error of one sample under the current estimate of `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorTd {
    pub d: f64,
    pub u_hat: ActionVec,
    pub x_tilde: StateVec,
    /// `dV/dx` at `x_k`.
    pub grad_v: Vec<f64>,
    /// `dV/dx` at `x_tilde`.
    pub grad_v_tilde: Vec<f64>,
}

impl ActorState {
    /// Starts from the identity.
    pub fn new(m: usize, beta: RateSchedule, mode: GradientMode) -> Self {
        Self::with_initial(ControlCostMatrix::identity(m), beta, mode)
    }

    pub fn with_initial(s_hat: ControlCostMatrix, beta: RateSchedule, mode: GradientMode) -> Self {
        Self {
            s_hat,
            beta,
            mode,
            iteration: 0,
            underflows: AtomicU64::new(0),
        }
    }

    pub fn underflows(&self) -> u64 {
        self.underflows.load(Ordering::Relaxed)
    }
}

/// `d = q_k + 0.5 g'B S B'g dt + V(x_tilde) - V_avg - V(x_k)` with
/// `u_hat = -S B' g` and `x_tilde = x_{k+1} + B u_hat dt`.
pub fn actor_td(
    actor: &ActorState,
    critic: &dyn ValueModel,
    sample: &PassiveSample,
    b: &DMatrix<f64>,
    dt: f64,
) -> Result<ActorTd> {
    let (v_k, g) = critic.value_and_grad(&sample.x)?;
    let u_hat = policy(&actor.s_hat, b, &g)?;
    let x_tilde: Vec<f64> = sample
        .x_next
        .iter()
        .enumerate()
        .map(|(i, xn)| {
            xn + (0..b.ncols()).map(|j| b[(i, j)] * u_hat[j]).sum::<f64>() * dt
        })
        .collect();
    let (v_tilde, g_tilde) = critic.value_and_grad(&x_tilde)?;
    let btg = project_to_action(b, &g);
    let s = actor.s_hat.matrix();
    let mut quad = 0.0;
    for i in 0..btg.len() {
        for j in 0..btg.len() {
            quad += btg[i] * s[(i, j)] * btg[j];
        }
    }
    let d = sample.q + 0.5 * quad * dt + v_tilde - critic.v_avg() - v_k;
    if !d.is_finite() {
        return Err(Error::NonFinite("actor TD error"));
    }
    Ok(ActorTd {
        d,
        u_hat,
        x_tilde: StateVec(x_tilde),
        grad_v: g,
        grad_v_tilde: g_tilde,
    })
}

/// `d d / d S` (symmetric).
pub fn td_gradient(mode: GradientMode, td: &ActorTd, b: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let btg = nalgebra::DVector::from_vec(project_to_action(b, &td.grad_v));
    let mut g = &btg * btg.transpose() * (0.5 * dt);
    if mode == GradientMode::Full {
        let btt = nalgebra::DVector::from_vec(project_to_action(b, &td.grad_v_tilde));
        let cross = &btt * btg.transpose();
        g -= (&cross + cross.transpose()) * (0.5 * dt);
    }
    g
}

/// `S <- psd(S - 2 beta d dd/dS)`.
pub fn update_s(actor: &mut ActorState, td: &ActorTd, b: &DMatrix<f64>, dt: f64) {
    let beta = actor.beta.at(actor.iteration);
    actor.iteration += 1;
    if td.d == 0.0 {
        return;
    }
    let grad = td_gradient(actor.mode, td, b, dt);
    let next = actor.s_hat.matrix() - grad * (2.0 * beta * td.d);
    if next.iter().all(|v| v.is_finite()) {
        actor.s_hat = ControlCostMatrix::project_psd(next, S_FLOOR);
    }
}

/// `u = -S B' dV/dx`, optionally clamped elementwise to `[-limit, limit]`.
/// Underflow of `Z` yields the zero action and bumps `underflows`.
pub fn greedy_action(
    s: &ControlCostMatrix,
    critic: &dyn ValueModel,
    x: &[f64],
    b: &DMatrix<f64>,
    limit: Option<f64>,
    underflows: &AtomicU64,
) -> ActionVec {
    let u = critic
        .value_and_grad(x)
        .and_then(|(_, g)| policy(s, b, &g));
    match u {
        Ok(mut u) => {
            if let Some(l) = limit {
                u.0.iter_mut().for_each(|v| *v = v.clamp(-l, l));
            }
            u
        }
        Err(_) => {
            underflows.fetch_add(1, Ordering::Relaxed);
            ActionVec::zeros(b.ncols())
        }
    }
}

pub fn act(
    actor: &ActorState,
    critic: &dyn ValueModel,
    x: &[f64],
    b: &DMatrix<f64>,
    limit: Option<f64>,
) -> ActionVec {
    greedy_action(&actor.s_hat, critic, x, b, limit, &actor.underflows)
}
