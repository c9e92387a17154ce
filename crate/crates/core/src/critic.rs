//! Critic: TD learning of `(Z, Z_avg)` on the linearized Bellman equation
//! `Z_avg Z(x) = exp(-q dt) E[Z(x')]` from passive samples.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::approx::{v_and_grad, UpdateRule, ZApproximator};
use crate::error::{Error, Result};
use crate::lmdp::PassiveSample;

/// Lower clamp for `Z_avg`.
pub const Z_AVG_FLOOR: f64 = 1e-8;
const PROJECTION_MAX_ITERS: usize = 100;

/// Learning rate `initial / (1 + i / tau)`; constant when `tau` is absent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    pub initial: f64,
    pub decay_tau: Option<f64>,
}

impl RateSchedule {
    pub fn constant(rate: f64) -> Self {
        Self {
            initial: rate,
            decay_tau: None,
        }
    }

    pub fn decaying(rate: f64, tau: f64) -> Self {
        Self {
            initial: rate,
            decay_tau: Some(tau),
        }
    }

    pub fn at(&self, iteration: u64) -> f64 {
        match self.decay_tau {
            Some(tau) if tau > 0.0 => self.initial / (1.0 + iteration as f64 / tau),
            _ => self.initial,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CriticState {
    pub approx: Box<dyn ZApproximator>,
    pub z_avg: f64,
    pub alpha1: RateSchedule,
    pub alpha2: RateSchedule,
    pub c: f64,
    pub iteration: u64,
}

/// TD error of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticTd {
    pub e: f64,
    pub z_k: f64,
    pub z_next: f64,
    /// `min(1, exp(-q_k) Z(x_{k+1}))`.
    pub target: f64,
}

impl CriticState {
    pub fn new(
        approx: Box<dyn ZApproximator>,
        z_avg: f64,
        alpha1: RateSchedule,
        alpha2: RateSchedule,
        c: f64,
    ) -> Result<Self> {
        if !(z_avg > 0.0 && z_avg <= 1.0) {
            return Err(Error::Config(format!("z_avg must be in (0, 1], got {z_avg}")));
        }
        if !(alpha1.initial >= 0.0 && alpha2.initial >= 0.0 && c > 0.0) {
            return Err(Error::Config("critic rates must be >= 0 and C > 0".into()));
        }
        Ok(Self {
            approx,
            z_avg,
            alpha1,
            alpha2,
            c,
            iteration: 0,
        })
    }

    /// `V_avg = -ln Z_avg`.
    pub fn v_avg(&self) -> f64 {
        -self.z_avg.ln()
    }

    pub fn v_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        v_and_grad(self.approx.as_ref(), x)
    }

    /// One full critic iteration: TD error, parameter update, `Z_avg` update.
    pub fn step(&mut self, sample: &PassiveSample) -> Result<CriticTd> {
        let td = critic_td(self, sample)?;
        update_params(self, sample, &td)?;
        update_z_avg(self, &td);
        if self.approx.update_rule() == UpdateRule::ConstrainedLinear {
            // keep Z(x_k) Z_avg <= 1 after Z_avg moves
            let z_new = self.approx.value(&sample.x);
            if z_new * self.z_avg > 1.0 {
                self.z_avg = (1.0 / z_new).max(Z_AVG_FLOOR);
            }
        }
        self.iteration += 1;
        Ok(td)
    }
}

pub fn critic_td(state: &CriticState, sample: &PassiveSample) -> Result<CriticTd> {
    let z_k = state.approx.value(&sample.x);
    let z_next = state.approx.value(&sample.x_next);
    if !z_k.is_finite() || !z_next.is_finite() {
        return Err(Error::NonFinite("approximator output"));
    }
    let target = ((-sample.q).exp() * z_next).min(1.0);
    Ok(CriticTd {
        e: state.z_avg * z_k - target,
        z_k,
        z_next,
        target,
    })
}

/// `Z_avg <- clamp(Z_avg - 2 alpha1 e Z_k, floor, 1)`.
pub fn update_z_avg(state: &mut CriticState, td: &CriticTd) {
    let a1 = state.alpha1.at(state.iteration);
    let z = state.z_avg - 2.0 * a1 * td.e * td.z_k;
    state.z_avg = if z.is_nan() { state.z_avg } else { z.clamp(Z_AVG_FLOOR, 1.0) };
}

pub fn update_params(state: &mut CriticState, sample: &PassiveSample, td: &CriticTd) -> Result<()> {
    match state.approx.update_rule() {
        UpdateRule::ConstrainedLinear => update_params_rbf(state, sample, td),
        UpdateRule::Unconstrained => update_params_nn(state, sample, td),
    }
}

/// Gradient step `nu <- nu - 2 alpha2 e Z_avg dZ_k/dnu`; no integral
/// constraint.
pub fn update_params_nn(state: &mut CriticState, sample: &PassiveSample, td: &CriticTd) -> Result<()> {
    if td.e == 0.0 {
        return Ok(());
    }
    let a2 = state.alpha2.at(state.iteration);
    let g = state.approx.grad_params(&sample.x);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter gradient"));
    }
    let scale = 2.0 * a2 * td.e * state.z_avg;
    for (p, gi) in state.approx.params_mut().iter_mut().zip(&g) {
        *p -= scale * gi;
    }
    Ok(())
}

/// Gradient step followed by projection onto `nu >= 0`, `sum nu = C`,
/// `Z(x_k) <= 1 / Z_avg`.
pub fn update_params_rbf(state: &mut CriticState, sample: &PassiveSample, td: &CriticTd) -> Result<()> {
    let a2 = state.alpha2.at(state.iteration);
    let f = state.approx.grad_params(&sample.x);
    let scale = 2.0 * a2 * td.e * state.z_avg;
    let tilde: Vec<f64> = state
        .approx
        .params()
        .iter()
        .zip(&f)
        .map(|(p, fi)| p - scale * fi)
        .collect();
    if tilde.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter step"));
    }
    let proj = project_feasible(&tilde, &f, state.c, 1.0 / state.z_avg)?;
    state.approx.params_mut().copy_from_slice(&proj.nu);
    Ok(())
}

/// Result of the constrained projection
/// `nu = tilde + lambda1 1 + lambda2 + lambda3 f`.
#[derive(Clone, Debug)]
pub struct Projection {
    pub nu: Vec<f64>,
    pub lambda1: f64,
    /// `<= 0`; nonzero only when the upper bound was active.
    pub lambda3: f64,
}

/// Euclidean projection onto `{nu >= 0, sum nu = c}`.
/// Returns the projection and the uniform shift `theta` (`nu = max(v - theta, 0)`).
pub fn project_simplex(v: &[f64], c: f64) -> (Vec<f64>, f64) {
    let n = v.len() as f64;
    let theta = (v.iter().sum::<f64>() - c) / n;
    if v.iter().all(|x| x - theta >= 0.0) {
        return (v.iter().map(|x| x - theta).collect(), theta);
    }
    let mut u = v.to_vec();
    u.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - c) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    (v.iter().map(|x| (x - theta).max(0.0)).collect(), theta)
}

/// Projects `tilde` onto `{nu >= 0, sum nu = c, f' nu <= bound}`.
///
/// Clamp-and-shift gives the simplex projection; if the upper bound is then
/// violated, `lambda3 <= 0` along `f` is found by bracketing and bisection
/// so that the bound holds with the simplex constraints re-imposed.
pub fn project_feasible(tilde: &[f64], f: &[f64], c: f64, bound: f64) -> Result<Projection> {
    let (nu, theta) = project_simplex(tilde, c);
    let dot = |nu: &[f64]| nu.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
    if dot(&nu) <= bound {
        return Ok(Projection {
            nu,
            lambda1: -theta,
            lambda3: 0.0,
        });
    }
    let f_min = f.iter().cloned().fold(f64::INFINITY, f64::min);
    if c * f_min > bound {
        return Err(Error::ProjectionFailed {
            iterations: 0,
            detail: format!("upper bound {bound} below c * min f = {}", c * f_min),
        });
    }
    let shifted = |lam: f64| -> (Vec<f64>, f64) {
        let v: Vec<f64> = tilde.iter().zip(f).map(|(t, fi)| t - lam * fi).collect();
        project_simplex(&v, c)
    };
    let ff: f64 = f.iter().map(|v| v * v).sum();
    let mut lo = 0.0;
    let mut hi = ((dot(&nu) - bound) / ff.max(f64::MIN_POSITIVE)).max(f64::MIN_POSITIVE);
    let mut iters = 0;
    let mut best = loop {
        iters += 1;
        let (cand, th) = shifted(hi);
        if dot(&cand) <= bound {
            break (cand, th);
        }
        if iters >= PROJECTION_MAX_ITERS {
            return Err(Error::ProjectionFailed {
                iterations: iters,
                detail: format!(
                    "upper bound {bound} unreachable with sum {c}: f'nu = {}",
                    dot(&cand)
                ),
            });
        }
        lo = hi;
        hi *= 2.0;
    };
    while iters < PROJECTION_MAX_ITERS && hi - lo > 1e-14 * hi {
        iters += 1;
        let mid = 0.5 * (lo + hi);
        let (cand, th) = shifted(mid);
        if dot(&cand) <= bound {
            hi = mid;
            best = (cand, th);
        } else {
            lo = mid;
        }
    }
    Ok(Projection {
        nu: best.0,
        lambda1: -best.1,
        lambda3: -hi,
    })
}
