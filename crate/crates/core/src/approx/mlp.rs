use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{UpdateRule, ZApproximator, ZQuery};
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: [usize; 3] = [200, 200, 50];

/// Output nonlinearity mapping the last pre-activation `a` to `Z > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    /// `exp(-tanh(a))`, range `[1/e, e]`.
    ExpNegTanh,
    /// `exp(-softplus(a))`, range `(0, 1)`.
    ExpNegSoftplus,
}

impl OutputActivation {
    /// `(phi(a), phi'(a))` where `Z = exp(-phi(a))`.
    fn phi(self, a: f64) -> (f64, f64) {
        match self {
            OutputActivation::ExpNegTanh => {
                let t = a.tanh();
                (t, 1.0 - t * t)
            }
            OutputActivation::ExpNegSoftplus => {
                let sp = if a > 30.0 { a + (-a).exp().ln_1p() } else { a.exp().ln_1p() };
                let sig = 1.0 / (1.0 + (-a).exp());
                (sp, sig)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OutputActivation::ExpNegTanh => "exp_neg_tanh",
            OutputActivation::ExpNegSoftplus => "exp_neg_softplus",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "exp_neg_tanh" => Ok(OutputActivation::ExpNegTanh),
            "exp_neg_softplus" => Ok(OutputActivation::ExpNegSoftplus),
            other => Err(Error::Config(format!("unknown output activation `{other}`"))),
        }
    }
}

/// Per-dimension affine map of the data range onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNormalizer {
    low: Vec<f64>,
    scale: Vec<f64>,
}

impl InputNormalizer {
    pub fn new(range: &[(f64, f64)]) -> Result<Self> {
        for (dim, &(low, high)) in range.iter().enumerate() {
            if !(low < high) {
                return Err(Error::DegenerateRange { dim, low, high });
            }
        }
        Ok(Self {
            low: range.iter().map(|r| r.0).collect(),
            scale: range.iter().map(|r| 1.0 / (r.1 - r.0)).collect(),
        })
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.low.iter().zip(&self.scale))
            .map(|(x, (lo, s))| (x - lo) * s)
            .collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.low.iter().zip(&self.scale))
            .map(|(y, (lo, s))| y / s + lo)
            .collect()
    }

    pub fn range(&self) -> Vec<(f64, f64)> {
        self.low
            .iter()
            .zip(&self.scale)
            .map(|(lo, s)| (*lo, lo + 1.0 / s))
            .collect()
    }
}

/// Fully connected ReLU network with a single exponentiated output.
///
/// Parameters are stored layer by layer: the weight matrix (row-major,
/// `out x in`) followed by the bias vector.
#[derive(Clone, Debug)]
pub struct MlpZ {
    sizes: Vec<usize>,
    output: OutputActivation,
    normalizer: InputNormalizer,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

struct Forward {
    /// Post-activation values per layer; `acts[0]` is the normalized input.
    acts: Vec<Vec<f64>>,
    /// Final pre-activation.
    out: f64,
}

fn layer_offsets(sizes: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(sizes.len() - 1);
    let mut total = 0;
    for w in sizes.windows(2) {
        offsets.push(total);
        total += w[0] * w[1] + w[1];
    }
    (offsets, total)
}

impl MlpZ {
    /// Layer sizes `[n, hidden..., 1]`; weights uniform in
    /// `+-sqrt(6 / fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(
        range: &[(f64, f64)],
        hidden: &[usize],
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        let normalizer = InputNormalizer::new(range)?;
        let mut sizes = vec![range.len()];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let (offsets, total) = layer_offsets(&sizes);
        let mut params = vec![0.0; total];
        for (l, w) in sizes.windows(2).enumerate() {
            let limit = (6.0 / w[0] as f64).sqrt();
            let start = offsets[l];
            for p in &mut params[start..start + w[0] * w[1]] {
                *p = rng.random_range(-limit..limit);
            }
        }
        Ok(Self {
            sizes,
            output,
            normalizer,
            params,
            offsets,
        })
    }

    pub fn from_parts(
        sizes: Vec<usize>,
        output: OutputActivation,
        range: &[(f64, f64)],
        params: Vec<f64>,
    ) -> Result<Self> {
        if sizes.len() < 2 || *sizes.last().unwrap() != 1 || sizes[0] != range.len() {
            return Err(Error::Snapshot(format!("bad layer sizes {sizes:?}")));
        }
        let (offsets, total) = layer_offsets(&sizes);
        if params.len() != total {
            return Err(Error::Snapshot(format!(
                "expected {total} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            sizes,
            output,
            normalizer: InputNormalizer::new(range)?,
            params,
            offsets,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn normalizer(&self) -> &InputNormalizer {
        &self.normalizer
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers);
        acts.push(self.normalizer.normalize(x));
        let mut out = 0.0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[self.offsets[l]..self.offsets[l] + n_in * n_out];
            let b = &self.params[self.offsets[l] + n_in * n_out..self.offsets[l] + n_in * n_out + n_out];
            let input = &acts[l];
            let mut z: Vec<f64> = w
                .chunks_exact(n_in)
                .zip(b)
                .map(|(row, bi)| row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + bi)
                .collect();
            if l + 1 == layers {
                out = z[0];
            } else {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
                acts.push(z);
            }
        }
        Forward { acts, out }
    }

    /// Backpropagates `d out / d (.)`; returns the parameter gradient (if
    /// requested) and the gradient with respect to the raw input.
    fn backward(&self, fwd: &Forward, want_params: bool) -> (Option<Vec<f64>>, Vec<f64>) {
        let layers = self.sizes.len() - 1;
        let mut gp = if want_params {
            Some(vec![0.0; self.params.len()])
        } else {
            None
        };
        let mut delta = vec![1.0];
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let woff = self.offsets[l];
            let w = &self.params[woff..woff + n_in * n_out];
            let input = &fwd.acts[l];
            if let Some(gp) = gp.as_mut() {
                for o in 0..n_out {
                    let d = delta[o];
                    if d != 0.0 {
                        let row = &mut gp[woff + o * n_in..woff + (o + 1) * n_in];
                        row.iter_mut().zip(input).for_each(|(g, a)| *g = d * a);
                    }
                    gp[woff + n_in * n_out + o] = d;
                }
            }
            let mut prev = vec![0.0; n_in];
            for (o, row) in w.chunks_exact(n_in).enumerate() {
                let d = delta[o];
                if d != 0.0 {
                    prev.iter_mut().zip(row).for_each(|(p, wv)| *p += d * wv);
                }
            }
            if l > 0 {
                // ReLU derivative of the layer that produced `input`
                prev.iter_mut()
                    .zip(input)
                    .for_each(|(p, a)| if *a <= 0.0 { *p = 0.0 });
            }
            delta = prev;
        }
        let grad_x = delta
            .iter()
            .zip(&self.normalizer.scale)
            .map(|(d, s)| d * s)
            .collect();
        (gp, grad_x)
    }
}

impl ZApproximator for MlpZ {
    fn kind(&self) -> &'static str {
        "mlp"
    }

    fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn update_rule(&self) -> UpdateRule {
        UpdateRule::Unconstrained
    }

    fn value(&self, x: &[f64]) -> f64 {
        let fwd = self.forward(x);
        (-self.output.phi(fwd.out).0).exp()
    }

    fn grad_params(&self, x: &[f64]) -> Vec<f64> {
        self.query(x).grad_params
    }

    fn query(&self, x: &[f64]) -> ZQuery {
        let fwd = self.forward(x);
        let (phi, dphi) = self.output.phi(fwd.out);
        let value = (-phi).exp();
        let dz_da = -dphi * value;
        let (gp, gx) = self.backward(&fwd, true);
        ZQuery {
            value,
            grad_params: gp.unwrap().into_iter().map(|g| g * dz_da).collect(),
            grad_input: gx.into_iter().map(|g| g * dz_da).collect(),
        }
    }

    fn log_value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let fwd = self.forward(x);
        let (phi, dphi) = self.output.phi(fwd.out);
        let (_, gx) = self.backward(&fwd, false);
        Ok((-phi, gx.into_iter().map(|g| -dphi * g).collect()))
    }

    fn metadata(&self) -> Value {
        json!({
            "kind": "mlp",
            "sizes": self.sizes,
            "output": self.output.name(),
            "low": self.normalizer.range().iter().map(|r| r.0).collect::<Vec<_>>(),
            "high": self.normalizer.range().iter().map(|r| r.1).collect::<Vec<_>>(),
        })
    }

    fn clone_box(&self) -> Box<dyn ZApproximator> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(output: OutputActivation) -> MlpZ {
        MlpZ::new(
            &[(-1.0, 1.0), (0.0, 4.0)],
            &[7, 5],
            output,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap()
    }

    #[test]
    fn output_ranges() {
        let m = small(OutputActivation::ExpNegSoftplus);
        for x in [[-50.0, 3.0], [0.0, 0.0], [80.0, -100.0]] {
            let z = m.value(&x);
            assert!(z > 0.0 && z <= 1.0);
        }
        let m = small(OutputActivation::ExpNegTanh);
        for x in [[-50.0, 3.0], [0.0, 0.0], [80.0, -100.0]] {
            let z = m.value(&x);
            let e = std::f64::consts::E;
            assert!(z >= 1.0 / e - 1e-15 && z <= e + 1e-15);
        }
    }

    #[test]
    fn parameter_count_default_architecture() {
        let m = MlpZ::new(
            &[(0.0, 1.0); 4],
            &DEFAULT_HIDDEN,
            OutputActivation::ExpNegSoftplus,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(m.sizes(), &[4, 200, 200, 50, 1]);
        assert_eq!(m.num_params(), 4 * 200 + 200 + 200 * 200 + 200 + 200 * 50 + 50 + 50 + 1);
    }

    #[test]
    fn log_query_matches_query() {
        let m = small(OutputActivation::ExpNegTanh);
        let x = [0.2, 1.7];
        let q = m.query(&x);
        let (lz, g) = m.log_value_and_grad(&x).unwrap();
        assert!((lz - q.value.ln()).abs() < 1e-13);
        for d in 0..2 {
            assert!((g[d] - q.grad_input[d] / q.value).abs() < 1e-12);
        }
    }

    #[test]
    fn normalizer_round_trip() {
        let n = InputNormalizer::new(&[(-100.0, 100.0), (-10.0, 10.0)]).unwrap();
        let x = [37.25, -9.5];
        let y = n.normalize(&x);
        assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        let back = n.denormalize(&y);
        for d in 0..2 {
            assert!((back[d] - x[d]).abs() < 1e-12);
        }
    }
}
