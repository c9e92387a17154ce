use serde_json::{json, Value};

use super::{UpdateRule, ZApproximator, ZQuery};
use crate::error::{Error, Result};

/// One weight per grid point; `Z(x)` is the weight of the nearest point.
///
/// This is the zero-bandwidth limit of the RBF model and represents a
/// finite-state Z-vector exactly.
#[derive(Clone, Debug)]
pub struct TabularZ {
    low: Vec<f64>,
    spacing: Vec<f64>,
    counts: Vec<usize>,
    weights: Vec<f64>,
}

impl TabularZ {
    pub fn new(range: &[(f64, f64)], counts: &[usize], c: f64) -> Result<Self> {
        if range.len() != counts.len() {
            return Err(Error::DimensionMismatch {
                expected: range.len(),
                got: counts.len(),
                context: "tabular counts",
            });
        }
        for (dim, &(low, high)) in range.iter().enumerate() {
            if !(low < high) {
                return Err(Error::DegenerateRange { dim, low, high });
            }
        }
        if counts.iter().any(|&k| k < 2) {
            return Err(Error::Config("tabular grid needs >= 2 points per dimension".into()));
        }
        let total: usize = counts.iter().product();
        Ok(Self {
            low: range.iter().map(|r| r.0).collect(),
            spacing: range
                .iter()
                .zip(counts)
                .map(|(&(lo, hi), &k)| (hi - lo) / (k - 1) as f64)
                .collect(),
            counts: counts.to_vec(),
            weights: vec![c / total as f64; total],
        })
    }

    pub fn index_of(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for d in 0..self.counts.len() {
            let i = ((x[d] - self.low[d]) / self.spacing[d]).round();
            let i = i.clamp(0.0, (self.counts[d] - 1) as f64) as usize;
            idx = idx * self.counts[d] + i;
        }
        idx
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn range(&self) -> Vec<(f64, f64)> {
        self.low
            .iter()
            .zip(self.spacing.iter().zip(&self.counts))
            .map(|(lo, (s, k))| (*lo, lo + s * (*k - 1) as f64))
            .collect()
    }
}

impl ZApproximator for TabularZ {
    fn kind(&self) -> &'static str {
        "tabular"
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
        self.weights[self.index_of(x)]
    }

    fn query(&self, x: &[f64]) -> ZQuery {
        let j = self.index_of(x);
        let mut grad_params = vec![0.0; self.weights.len()];
        grad_params[j] = 1.0;
        ZQuery {
            value: self.weights[j],
            grad_params,
            grad_input: vec![0.0; self.counts.len()],
        }
    }

    fn metadata(&self) -> Value {
        let range = self.range();
        json!({
            "kind": "tabular",
            "low": range.iter().map(|r| r.0).collect::<Vec<_>>(),
            "high": range.iter().map(|r| r.1).collect::<Vec<_>>(),
            "counts": self.counts,
        })
    }

    fn clone_box(&self) -> Box<dyn ZApproximator> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_point_lookup() {
        let t = TabularZ::new(&[(-1.0, 1.0)], &[5], 1.0).unwrap();
        assert_eq!(t.index_of(&[-1.0]), 0);
        assert_eq!(t.index_of(&[0.26]), 3);
        assert_eq!(t.index_of(&[9.0]), 4);
        assert!((t.value(&[0.0]) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_underflows() {
        let mut t = TabularZ::new(&[(0.0, 1.0)], &[2], 1.0).unwrap();
        t.params_mut()[0] = 0.0;
        assert!(matches!(
            super::super::v_and_grad(&t, &[0.0]),
            Err(Error::ZUnderflow { .. })
        ));
    }
}
