use serde_json::{json, Value};

use super::{UpdateRule, ZApproximator, ZQuery};
use crate::error::{Error, Result};

/// Bandwidth as a fraction of the spacing between adjacent centers.
pub const BANDWIDTH_RATIO: f64 = 0.7;

/// Linear model over normalized Gaussian bases on a uniform tensor grid.
///
/// Each basis integrates to one over `R^n`, so `integral Z = sum nu`.
/// Centers are enumerated row-major with the last dimension fastest.
#[derive(Clone, Debug)]
pub struct RbfZ {
    low: Vec<f64>,
    high: Vec<f64>,
    counts: Vec<usize>,
    periodic: Vec<bool>,
    spacing: Vec<f64>,
    bandwidth: Vec<f64>,
    log_norm: f64,
    weights: Vec<f64>,
}

impl RbfZ {
    /// Uniform grid over `range` with `counts[i]` centers per dimension and
    /// all weights set to `c / (number of centers)`.
    pub fn build_grid(range: &[(f64, f64)], counts: &[usize], c: f64) -> Result<Self> {
        if range.len() != counts.len() {
            return Err(Error::DimensionMismatch {
                expected: range.len(),
                got: counts.len(),
                context: "rbf counts",
            });
        }
        for (dim, &(low, high)) in range.iter().enumerate() {
            if !(low < high) {
                return Err(Error::DegenerateRange { dim, low, high });
            }
        }
        if let Some(k) = counts.iter().find(|&&k| k < 2) {
            return Err(Error::Config(format!(
                "rbf grid needs at least 2 centers per dimension, got {k}"
            )));
        }
        let spacing: Vec<f64> = range
            .iter()
            .zip(counts)
            .map(|(&(lo, hi), &k)| (hi - lo) / (k - 1) as f64)
            .collect();
        let bandwidth: Vec<f64> = spacing.iter().map(|s| BANDWIDTH_RATIO * s).collect();
        let log_norm = -bandwidth
            .iter()
            .map(|h| (h * (2.0 * std::f64::consts::PI).sqrt()).ln())
            .sum::<f64>();
        let total: usize = counts.iter().product();
        Ok(Self {
            low: range.iter().map(|r| r.0).collect(),
            high: range.iter().map(|r| r.1).collect(),
            counts: counts.to_vec(),
            periodic: vec![false; counts.len()],
            spacing,
            bandwidth,
            log_norm,
            weights: vec![c / total as f64; total],
        })
    }

    /// Treats the listed dimensions as angles: centers cover `[low, high)`
    /// evenly and distances wrap around the period.
    pub fn with_periodic_dims(mut self, dims: &[usize]) -> Result<Self> {
        for &d in dims {
            if d >= self.counts.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.counts.len(),
                    got: d + 1,
                    context: "rbf periodic dimension",
                });
            }
            self.periodic[d] = true;
            self.spacing[d] = (self.high[d] - self.low[d]) / self.counts[d] as f64;
            self.bandwidth[d] = BANDWIDTH_RATIO * self.spacing[d];
        }
        self.log_norm = -self
            .bandwidth
            .iter()
            .map(|h| (h * (2.0 * std::f64::consts::PI).sqrt()).ln())
            .sum::<f64>();
        Ok(self)
    }

    pub fn periodic(&self) -> &[bool] {
        &self.periodic
    }

    pub fn num_centers(&self) -> usize {
        self.weights.len()
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn range(&self) -> Vec<(f64, f64)> {
        self.low.iter().copied().zip(self.high.iter().copied()).collect()
    }

    /// Basis value at its own center.
    pub fn peak(&self) -> f64 {
        self.log_norm.exp()
    }

    pub fn center(&self, index: usize) -> Vec<f64> {
        let mut rem = index;
        let mut c = vec![0.0; self.counts.len()];
        for d in (0..self.counts.len()).rev() {
            let i = rem % self.counts[d];
            rem /= self.counts[d];
            c[d] = self.low[d] + i as f64 * self.spacing[d];
        }
        c
    }

    /// Per-dimension Gaussian exponents `-(x_d - c)^2 / (2 h_d^2)` and
    /// derivative factors `-(x_d - c) / h_d^2` for every center coordinate.
    fn factors(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut expo = Vec::with_capacity(x.len());
        let mut dfac = Vec::with_capacity(x.len());
        for d in 0..x.len() {
            let h2 = self.bandwidth[d] * self.bandwidth[d];
            let (e, f): (Vec<f64>, Vec<f64>) = (0..self.counts[d])
                .map(|i| {
                    let mut diff = x[d] - (self.low[d] + i as f64 * self.spacing[d]);
                    if self.periodic[d] {
                        let span = self.high[d] - self.low[d];
                        diff -= span * (diff / span).round();
                    }
                    (-0.5 * diff * diff / h2, -diff / h2)
                })
                .unzip();
            expo.push(e);
            dfac.push(f);
        }
        (expo, dfac)
    }

    /// Visits every center with its multi-index, in storage order.
    fn for_each_center(&self, mut f: impl FnMut(usize, &[usize])) {
        let n = self.counts.len();
        let mut idx = vec![0usize; n];
        for j in 0..self.weights.len() {
            f(j, &idx);
            for d in (0..n).rev() {
                idx[d] += 1;
                if idx[d] < self.counts[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }

    fn basis_values(&self, x: &[f64]) -> Vec<f64> {
        let (expo, _) = self.factors(x);
        let lin: Vec<Vec<f64>> = expo
            .iter()
            .map(|e| e.iter().map(|v| v.exp()).collect())
            .collect();
        let norm = self.peak();
        let mut out = vec![0.0; self.weights.len()];
        self.for_each_center(|j, idx| {
            out[j] = norm * idx.iter().enumerate().map(|(d, &i)| lin[d][i]).product::<f64>();
        });
        out
    }
}

impl ZApproximator for RbfZ {
    fn kind(&self) -> &'static str {
        "rbf"
    }

    fn input_dim(&self) -> usize {
        self.counts.len()
    }

    fn params(&self) -> &[f64] {
        &self.weights
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn update_rule(&self) -> UpdateRule {
        UpdateRule::ConstrainedLinear
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.basis_values(x)
            .iter()
            .zip(&self.weights)
            .map(|(f, w)| f * w)
            .sum()
    }

    fn grad_params(&self, x: &[f64]) -> Vec<f64> {
        self.basis_values(x)
    }

    fn query(&self, x: &[f64]) -> ZQuery {
        let n = x.len();
        let (_, dfac) = self.factors(x);
        let f = self.basis_values(x);
        let mut value = 0.0;
        let mut grad_input = vec![0.0; n];
        self.for_each_center(|j, idx| {
            let wf = self.weights[j] * f[j];
            value += wf;
            for d in 0..n {
                grad_input[d] += wf * dfac[d][idx[d]];
            }
        });
        ZQuery {
            value,
            grad_params: f,
            grad_input,
        }
    }

    fn log_value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = x.len();
        let (expo, dfac) = self.factors(x);
        let mut logs = vec![f64::NEG_INFINITY; self.weights.len()];
        let mut max = f64::NEG_INFINITY;
        self.for_each_center(|j, idx| {
            let w = self.weights[j];
            if w > 0.0 {
                let l = w.ln() + idx.iter().enumerate().map(|(d, &i)| expo[d][i]).sum::<f64>();
                logs[j] = l;
                max = max.max(l);
            }
        });
        if !max.is_finite() {
            return Err(Error::ZUnderflow { state: x.to_vec() });
        }
        let mut total = 0.0;
        let mut grad = vec![0.0; n];
        self.for_each_center(|j, idx| {
            if logs[j].is_finite() {
                let w = (logs[j] - max).exp();
                total += w;
                for d in 0..n {
                    grad[d] += w * dfac[d][idx[d]];
                }
            }
        });
        grad.iter_mut().for_each(|g| *g /= total);
        Ok((self.log_norm + max + total.ln(), grad))
    }

    fn metadata(&self) -> Value {
        json!({
            "kind": "rbf",
            "low": self.low,
            "high": self.high,
            "counts": self.counts,
            "periodic": self.periodic,
        })
    }

    fn clone_box(&self) -> Box<dyn ZApproximator> {
        Box::new(self.clone())
    }
}
