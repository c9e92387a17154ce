//! Problem definition for continuous linearly-solvable MDPs.
//!
//! Dynamics follow the Euler-Maruyama form
//! `x' = x + A(x) dt + B u dt + diag(sigma) dw`, `dw ~ N(0, I dt)`.
//! The running cost is `q(x) dt` plus the KL control cost
//! `0.5 u' S^-1 u dt` with `S^-1 = B' diag(sigma^2)^-1 B`.

use std::fmt;
use std::ops::Deref;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// States live on a dyadic lattice with this spacing so that adding and
/// subtracting a (lattice-rounded) control increment is exact.
pub const STATE_QUANTUM: f64 = 1.0 / 4_294_967_296.0; // 2^-32

/// Beyond this magnitude lattice values are no longer exactly representable.
const LATTICE_LIMIT: f64 = 1_048_576.0; // 2^20

#[inline]
pub fn quantize(v: f64) -> f64 {
    if v.abs() < LATTICE_LIMIT {
        (v / STATE_QUANTUM).round() * STATE_QUANTUM
    } else {
        v
    }
}

#[inline]
pub fn wrap_angle(v: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    if (-PI..PI).contains(&v) {
        v
    } else {
        (v + PI).rem_euclid(TAU) - PI
    }
}

macro_rules! real_vec {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Default)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn zeros(dim: usize) -> Self {
                Self(vec![0.0; dim])
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }

        impl From<&[f64]> for $name {
            fn from(v: &[f64]) -> Self {
                Self(v.to_vec())
            }
        }
    };
}

real_vec!(
    /// A point in the n-dimensional state space.
    StateVec
);
real_vec!(
    /// A point in the m-dimensional action space.
    ActionVec
);

pub type DriftFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
pub type CostFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// One Brownian increment `dw ~ N(0, I dt)`, drawn for every dimension
/// (including noiseless ones) so the random stream does not depend on sigma.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw(pub Vec<f64>);

#[derive(Clone)]
pub struct DynamicsModel {
    drift: Arc<DriftFn>,
    input_gain: DMatrix<f64>,
    noise: Vec<f64>,
    dt: f64,
    angle_dims: Vec<usize>,
}

impl fmt::Debug for DynamicsModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicsModel")
            .field("input_gain", &self.input_gain)
            .field("noise", &self.noise)
            .field("dt", &self.dt)
            .field("angle_dims", &self.angle_dims)
            .finish_non_exhaustive()
    }
}

impl DynamicsModel {
    pub fn new<F>(drift: F, input_gain: DMatrix<f64>, noise: Vec<f64>, dt: f64) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        if let Some(s) = noise.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("noise entries must be >= 0, got {s}")));
        }
        if input_gain.nrows() != noise.len() {
            return Err(Error::DimensionMismatch {
                expected: noise.len(),
                got: input_gain.nrows(),
                context: "input gain rows",
            });
        }
        Ok(Self {
            drift: Arc::new(drift),
            input_gain,
            noise,
            dt,
            angle_dims: Vec::new(),
        })
    }

    /// Marks dimensions that are angles; they are wrapped into `[-pi, pi)`.
    pub fn with_angle_dims(mut self, dims: Vec<usize>) -> Self {
        self.angle_dims = dims;
        self
    }

    /// Test hook: the same model with all noise removed.
    #[doc(hidden)]
    pub fn without_noise(&self) -> Self {
        let mut m = self.clone();
        m.noise.iter_mut().for_each(|s| *s = 0.0);
        m
    }

    /// Test hook: the same model with the drift replaced.
    #[doc(hidden)]
    pub fn with_drift<F>(&self, drift: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        let mut m = self.clone();
        m.drift = Arc::new(drift);
        m
    }

    pub fn state_dim(&self) -> usize {
        self.noise.len()
    }

    pub fn action_dim(&self) -> usize {
        self.input_gain.ncols()
    }

    pub fn input_gain(&self) -> &DMatrix<f64> {
        &self.input_gain
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn angle_dims(&self) -> &[usize] {
        &self.angle_dims
    }

    /// Passive drift `A(x)`.
    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        let mut out = vec![0.0; self.state_dim()];
        (self.drift)(x, &mut out);
        if let Some(dim) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteDrift { dim });
        }
        Ok(out)
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseDraw {
        let sdt = self.dt.sqrt();
        NoiseDraw(
            (0..self.state_dim())
                .map(|_| sdt * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
    }

    /// One passive step with an explicit noise draw.
    pub fn passive_from(&self, x: &[f64], noise: &NoiseDraw) -> Result<StateVec> {
        let a = self.drift(x)?;
        let next = x
            .iter()
            .zip(&a)
            .zip(&self.noise)
            .zip(&noise.0)
            .map(|(((xi, ai), si), wi)| quantize(xi + ai * self.dt + si * wi))
            .collect();
        Ok(self.wrap(next))
    }

    /// Lattice-rounded control effect `B u dt`.
    pub fn control_increment(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.action_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.action_dim(),
                got: u.len(),
                context: "action",
            });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("action"));
        }
        Ok((0..self.state_dim())
            .map(|i| {
                let bu: f64 = (0..self.action_dim())
                    .map(|j| self.input_gain[(i, j)] * u[j])
                    .sum();
                quantize(bu * self.dt)
            })
            .collect())
    }

    /// One controlled step with an explicit noise draw: the passive step plus
    /// `B u dt`.
    pub fn controlled_from(&self, x: &[f64], u: &[f64], noise: &NoiseDraw) -> Result<StateVec> {
        let c = self.control_increment(u)?;
        let mut next = self.passive_from(x, noise)?;
        next.0.iter_mut().zip(&c).for_each(|(p, ci)| *p += ci);
        Ok(self.wrap(next.0))
    }

    pub fn step_passive<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<StateVec> {
        let w = self.draw_noise(rng);
        self.passive_from(x, &w)
    }

    pub fn step_controlled<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        u: &[f64],
        rng: &mut R,
    ) -> Result<StateVec> {
        let w = self.draw_noise(rng);
        self.controlled_from(x, u, &w)
    }

    /// Difference `b - a` respecting angle dimensions.
    pub fn state_difference(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut d: Vec<f64> = b.iter().zip(a).map(|(b, a)| b - a).collect();
        for &i in &self.angle_dims {
            d[i] = wrap_angle(d[i]);
        }
        d
    }

    fn wrap(&self, mut x: Vec<f64>) -> StateVec {
        for &i in &self.angle_dims {
            let w = wrap_angle(x[i]);
            if w != x[i] {
                x[i] = quantize(w);
            }
        }
        StateVec(x)
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(),
                got: x.len(),
                context: "state",
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state"));
        }
        Ok(())
    }
}

/// An L-MDP: dynamics, a nonnegative state cost, and the region initial
/// states are drawn from.
#[derive(Clone)]
pub struct LmdpProblem {
    pub name: String,
    pub dynamics: DynamicsModel,
    cost: Arc<CostFn>,
    pub init_region: Vec<(f64, f64)>,
    clamp_hits: Arc<AtomicU64>,
}

impl fmt::Debug for LmdpProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LmdpProblem")
            .field("name", &self.name)
            .field("dynamics", &self.dynamics)
            .field("init_region", &self.init_region)
            .finish_non_exhaustive()
    }
}

impl LmdpProblem {
    pub fn new<F>(
        name: impl Into<String>,
        dynamics: DynamicsModel,
        cost: F,
        init_region: Vec<(f64, f64)>,
    ) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        if init_region.len() != dynamics.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: dynamics.state_dim(),
                got: init_region.len(),
                context: "init region",
            });
        }
        check_region(&init_region)?;
        Ok(Self {
            name: name.into(),
            dynamics,
            cost: Arc::new(cost),
            init_region,
            clamp_hits: Arc::new(AtomicU64::new(0)),
        })
    }

    /// Raw cost formula before clamping.
    pub fn raw_state_cost(&self, x: &[f64]) -> f64 {
        (self.cost)(x)
    }

    /// `q(x) >= 0`; negative raw values are clamped and counted.
    pub fn state_cost(&self, x: &[f64]) -> f64 {
        let q = (self.cost)(x);
        if q < 0.0 {
            if self.clamp_hits.fetch_add(1, Ordering::Relaxed) == 0 {
                log::warn!("{}: negative state cost {q} clamped to 0", self.name);
            }
            0.0
        } else {
            q
        }
    }

    pub fn clamp_hits(&self) -> u64 {
        self.clamp_hits.load(Ordering::Relaxed)
    }

    /// Per-step cost increment `q(x) dt`.
    pub fn cost_increment(&self, x: &[f64]) -> f64 {
        self.state_cost(x) * self.dynamics.dt()
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> StateVec {
        sample_box(&self.init_region, rng)
    }

    /// State plus control cost of one step.
    pub fn total_cost(&self, x: &[f64], u: &[f64], s: &ControlCostMatrix) -> Result<f64> {
        Ok(self.cost_increment(x) + control_cost(u, s, self.dynamics.dt())?)
    }
}

pub fn check_region(region: &[(f64, f64)]) -> Result<()> {
    for (dim, &(low, high)) in region.iter().enumerate() {
        if !(low < high) || !low.is_finite() || !high.is_finite() {
            return Err(Error::DegenerateRange { dim, low, high });
        }
    }
    Ok(())
}

pub fn sample_box<R: Rng + ?Sized>(region: &[(f64, f64)], rng: &mut R) -> StateVec {
    StateVec(
        region
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect(),
    )
}

/// A passive transition `(x_k, x_{k+1}, q_k)` with `q_k = q(x_k) dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct PassiveSample {
    pub x: StateVec,
    pub x_next: StateVec,
    pub q: f64,
}

impl PassiveSample {
    pub fn new(x: StateVec, x_next: StateVec, q: f64) -> Result<Self> {
        if x.dim() != x_next.dim() {
            return Err(Error::DimensionMismatch {
                expected: x.dim(),
                got: x_next.dim(),
                context: "passive sample next state",
            });
        }
        if !(q >= 0.0) {
            return Err(Error::Config(format!("sample cost must be >= 0, got {q}")));
        }
        Ok(Self { x, x_next, q })
    }
}

/// Symmetric positive-semidefinite `m x m` matrix `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlCostMatrix(DMatrix<f64>);

impl ControlCostMatrix {
    pub fn new(s: DMatrix<f64>) -> Result<Self> {
        if !s.is_square() {
            return Err(Error::InvalidControlCost(format!(
                "not square: {}x{}",
                s.nrows(),
                s.ncols()
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidControlCost("non-finite entry".into()));
        }
        let asym = (&s - s.transpose()).amax();
        if asym > 1e-12 {
            return Err(Error::InvalidControlCost(format!("asymmetry {asym:e}")));
        }
        let min_eig = s.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-12 {
            return Err(Error::InvalidControlCost(format!(
                "negative eigenvalue {min_eig}"
            )));
        }
        Ok(Self(s))
    }

    pub fn scalar(s: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, s))
    }

    pub fn identity(m: usize) -> Self {
        Self(DMatrix::identity(m, m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        self.0
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(Error::SingularControlCost)
    }

    pub fn entries(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }

    /// Projection onto symmetric matrices with eigenvalues `>= floor`.
    pub fn project_psd(m: DMatrix<f64>, floor: f64) -> Self {
        if m.nrows() == 1 {
            return Self(DMatrix::from_element(1, 1, m[(0, 0)].max(floor)));
        }
        let sym = (&m + m.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let clamped = eig.eigenvalues.map(|l| l.max(floor));
        let v = &eig.eigenvectors;
        let mut out = v * DMatrix::from_diagonal(&clamped) * v.transpose();
        // exact symmetry
        let t = out.transpose();
        out = (&out + t) * 0.5;
        Self(out)
    }
}

/// `S = (sum_i b_i b_i' / sigma_i^2)^-1` over dimensions with `sigma_i > 0`,
/// `b_i` being row `i` of `B`.
pub fn true_control_cost_matrix(b: &DMatrix<f64>, sigma: &[f64]) -> Result<ControlCostMatrix> {
    if b.nrows() != sigma.len() {
        return Err(Error::DimensionMismatch {
            expected: sigma.len(),
            got: b.nrows(),
            context: "input gain rows",
        });
    }
    let m = b.ncols();
    let mut s_inv = DMatrix::<f64>::zeros(m, m);
    for (i, &s) in sigma.iter().enumerate() {
        if s > 0.0 {
            let row = b.row(i);
            s_inv += row.transpose() * row / (s * s);
        }
    }
    let s = s_inv
        .cholesky()
        .filter(|c| c.l().diagonal().iter().all(|d| *d > 1e-12))
        .ok_or(Error::ControlNotObservable)?
        .inverse();
    let t = s.transpose();
    ControlCostMatrix::new((&s + t) * 0.5)
}

/// KL control cost `0.5 u' S^-1 u dt`.
pub fn control_cost(u: &[f64], s: &ControlCostMatrix, dt: f64) -> Result<f64> {
    if u.len() != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: s.dim(),
            got: u.len(),
            context: "action",
        });
    }
    if u.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let inv = s.inverse()?;
    let mut acc = 0.0;
    for i in 0..u.len() {
        for j in 0..u.len() {
            acc += u[i] * inv[(i, j)] * u[j];
        }
    }
    Ok((0.5 * acc * dt).max(0.0))
}

/// `B' g` for a state-space vector `g`.
pub fn project_to_action(b: &DMatrix<f64>, g: &[f64]) -> Vec<f64> {
    (0..b.ncols())
        .map(|j| (0..b.nrows()).map(|i| b[(i, j)] * g[i]).sum())
        .collect()
}

/// Optimal-control formula `u = -S B' grad V`.
pub fn policy(s: &ControlCostMatrix, b: &DMatrix<f64>, grad_v: &[f64]) -> Result<ActionVec> {
    if grad_v.len() != b.nrows() {
        return Err(Error::DimensionMismatch {
            expected: b.nrows(),
            got: grad_v.len(),
            context: "value gradient",
        });
    }
    if s.dim() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: b.ncols(),
            got: s.dim(),
            context: "control-cost matrix",
        });
    }
    let btg = project_to_action(b, grad_v);
    let sm = s.matrix();
    Ok(ActionVec(
        (0..sm.nrows())
            .map(|i| -(0..sm.ncols()).map(|j| sm[(i, j)] * btg[j]).sum::<f64>())
            .collect(),
    ))
}
