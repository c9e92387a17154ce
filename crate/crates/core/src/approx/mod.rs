//! Z-value function approximators.
//!
//! Every approximator exposes `Z(x; nu) > 0` together with its gradient with
//! respect to the parameters (for the critic) and the input (for the policy
//! via `V = -ln Z`).

mod mlp;
mod rbf;
mod snapshot;
mod tabular;

use std::fmt::Debug;

use serde_json::Value;

use crate::error::{Error, Result};

pub use mlp::{InputNormalizer, MlpZ, OutputActivation, DEFAULT_HIDDEN};
pub use rbf::RbfZ;
pub use snapshot::{load_snapshot, read_snapshot, save_snapshot, write_snapshot};
pub use tabular::TabularZ;

/// Values below this count as underflow when only `Z` itself is available.
pub const Z_FLOOR: f64 = 1e-300;

/// Value and analytic derivatives of `Z` at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct ZQuery {
    pub value: f64,
    pub grad_params: Vec<f64>,
    pub grad_input: Vec<f64>,
}

/// How the critic keeps the parameters feasible after a gradient step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateRule {
    /// Linear model `Z = nu' f(x)`: project onto `nu >= 0`, `sum nu = C`,
    /// `Z(x_k) <= 1 / Z_avg`.
    ConstrainedLinear,
    /// Plain gradient step; positivity comes from the output activation.
    Unconstrained,
}

pub trait ZApproximator: Debug + Send + Sync {
    fn kind(&self) -> &'static str;
    fn input_dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn update_rule(&self) -> UpdateRule;

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn value(&self, x: &[f64]) -> f64;

    /// `d Z / d nu` only.
    fn grad_params(&self, x: &[f64]) -> Vec<f64> {
        self.query(x).grad_params
    }

    fn query(&self, x: &[f64]) -> ZQuery;

    /// `(ln Z(x), d ln Z / dx)`. Implementations that can work in the log
    /// domain override this to avoid underflow far from the data.
    fn log_value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let q = self.query(x);
        if !(q.value > Z_FLOOR) {
            return Err(Error::ZUnderflow { state: x.to_vec() });
        }
        let g = q.grad_input.iter().map(|g| g / q.value).collect();
        Ok((q.value.ln(), g))
    }

    /// Architecture or grid description written into parameter snapshots.
    fn metadata(&self) -> Value;

    fn clone_box(&self) -> Box<dyn ZApproximator>;
}

impl Clone for Box<dyn ZApproximator> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// `(V, dV/dx)` with `V = -ln Z`.
pub fn v_and_grad(approx: &dyn ZApproximator, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (ln_z, g) = approx.log_value_and_grad(x)?;
    if !ln_z.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::ZUnderflow { state: x.to_vec() });
    }
    Ok((-ln_z, g.into_iter().map(|v| -v).collect()))
}

/// `(V, dV/dx)` from an already computed query.
pub fn v_and_grad_from_query(q: &ZQuery, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    if !(q.value > Z_FLOOR) {
        return Err(Error::ZUnderflow { state: x.to_vec() });
    }
    Ok((
        -q.value.ln(),
        q.grad_input.iter().map(|g| -g / q.value).collect(),
    ))
}
