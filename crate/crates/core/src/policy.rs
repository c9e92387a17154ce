//! Controllers that can be rolled out by the harness.

use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::actor::{greedy_action, ValueModel};
use crate::lmdp::{ActionVec, ControlCostMatrix};

pub trait Policy: Send + Sync {
    fn act(&self, x: &[f64]) -> ActionVec;
    /// Matrix used to price actions during evaluation.
    fn cost_matrix(&self) -> &ControlCostMatrix;
    fn underflows(&self) -> u64 {
        0
    }
}

/// `u = -S B' dV/dx` on a frozen value model.
pub struct GreedyPolicy {
    value: Arc<dyn ValueModel>,
    s: ControlCostMatrix,
    b: DMatrix<f64>,
    limit: Option<f64>,
    pricing: Option<ControlCostMatrix>,
    underflows: AtomicU64,
}

impl GreedyPolicy {
    pub fn new(
        value: Arc<dyn ValueModel>,
        s: ControlCostMatrix,
        b: DMatrix<f64>,
        limit: Option<f64>,
    ) -> Self {
        Self {
            value,
            s,
            b,
            limit,
            pricing: None,
            underflows: AtomicU64::new(0),
        }
    }

    /// Prices actions with `s` instead of the matrix that generates them.
    pub fn priced_with(mut self, s: ControlCostMatrix) -> Self {
        self.pricing = Some(s);
        self
    }

    pub fn value_model(&self) -> &Arc<dyn ValueModel> {
        &self.value
    }
}

impl Policy for GreedyPolicy {
    fn act(&self, x: &[f64]) -> ActionVec {
        greedy_action(&self.s, self.value.as_ref(), x, &self.b, self.limit, &self.underflows)
    }

    fn cost_matrix(&self) -> &ControlCostMatrix {
        self.pricing.as_ref().unwrap_or(&self.s)
    }

    fn underflows(&self) -> u64 {
        self.underflows.load(std::sync::atomic::Ordering::Relaxed)
    }
}

/// Always returns the zero action.
pub struct ZeroPolicy {
    m: usize,
    s: ControlCostMatrix,
}

impl ZeroPolicy {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            s: ControlCostMatrix::identity(m),
        }
    }
}

impl Policy for ZeroPolicy {
    fn act(&self, _x: &[f64]) -> ActionVec {
        ActionVec::zeros(self.m)
    }

    fn cost_matrix(&self) -> &ControlCostMatrix {
        &self.s
    }
}

/// Wraps a closure, for scripted controllers and tests.
pub struct FnPolicy<F> {
    f: F,
    s: ControlCostMatrix,
}

impl<F: Fn(&[f64]) -> ActionVec + Send + Sync> FnPolicy<F> {
    pub fn new(f: F, s: ControlCostMatrix) -> Self {
        Self { f, s }
    }
}

impl<F: Fn(&[f64]) -> ActionVec + Send + Sync> Policy for FnPolicy<F> {
    fn act(&self, x: &[f64]) -> ActionVec {
        (self.f)(x)
    }

    fn cost_matrix(&self) -> &ControlCostMatrix {
        &self.s
    }
}
