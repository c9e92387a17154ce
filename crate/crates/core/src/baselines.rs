//! Z-learning (critic only, `S` from known `B` and sigma), a residual noise
//! estimator, and a grid discretization solved by power iteration that serves
//! as ground truth for the critic.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::actor::ValueModel;
use crate::error::{Error, Result};
use crate::lmdp::{true_control_cost_matrix, LmdpProblem, PassiveSample};
use crate::policy::GreedyPolicy;

/// Gaussian transition weights are truncated at this many standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 4.0;
pub const MAX_POWER_ITERS: usize = 100_000;
/// Fewest samples accepted by [`estimate_sigma_residual`].
pub const MIN_SIGMA_SAMPLES: usize = 1000;
const MIN_CELL_SAMPLES: usize = 10;

/// Z-learning: the critic's value model with `S` computed from `B` and sigma.
pub fn zlearning_policy(
    critic: Arc<dyn ValueModel>,
    b: &DMatrix<f64>,
    sigma: &[f64],
    limit: Option<f64>,
) -> Result<GreedyPolicy> {
    let s = true_control_cost_matrix(b, sigma)?;
    Ok(GreedyPolicy::new(critic, s, b.clone(), limit))
}

/// Tensor grid; flat index is row-major with the last dimension fastest.
/// Periodic dimensions omit the upper endpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub counts: Vec<usize>,
    pub periodic: Vec<bool>,
}

impl Grid {
    pub fn new(range: &[(f64, f64)], counts: &[usize], periodic: Vec<bool>) -> Result<Self> {
        crate::lmdp::check_region(range)?;
        if counts.len() != range.len() || periodic.len() != range.len() {
            return Err(Error::DimensionMismatch {
                expected: range.len(),
                got: counts.len(),
                context: "grid counts",
            });
        }
        if counts.iter().any(|&c| c < 2) {
            return Err(Error::Config("grid needs at least 2 points per dimension".into()));
        }
        Ok(Self {
            low: range.iter().map(|r| r.0).collect(),
            high: range.iter().map(|r| r.1).collect(),
            counts: counts.to_vec(),
            periodic,
        })
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, d: usize) -> f64 {
        let span = self.high[d] - self.low[d];
        if self.periodic[d] {
            span / self.counts[d] as f64
        } else {
            span / (self.counts[d] - 1) as f64
        }
    }

    pub fn coord(&self, d: usize, i: usize) -> f64 {
        self.low[d] + i as f64 * self.spacing(d)
    }

    pub fn point(&self, mut flat: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        for d in (0..self.dim()).rev() {
            x[d] = self.coord(d, flat % self.counts[d]);
            flat /= self.counts[d];
        }
        x
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.counts).fold(0, |acc, (i, n)| acc * n + i)
    }

    /// Signed offset from grid point `i` to `m` in dimension `d`.
    fn offset(&self, d: usize, i: usize, m: f64) -> f64 {
        let diff = m - self.coord(d, i);
        if self.periodic[d] {
            let span = self.high[d] - self.low[d];
            diff - span * (diff / span).round()
        } else {
            diff
        }
    }

    /// Transition weights in one dimension for next-state mean `m` and
    /// standard deviation `s`.
    fn weights_1d(&self, d: usize, m: f64, s: f64) -> Vec<(usize, f64)> {
        let h = self.spacing(d);
        let n = self.counts[d];
        if s >= 0.5 * h {
            let mut w: Vec<(usize, f64)> = (0..n)
                .filter_map(|i| {
                    let z = self.offset(d, i, m) / s;
                    (z.abs() <= TRUNCATION_SIGMAS).then(|| (i, (-0.5 * z * z).exp()))
                })
                .collect();
            let total: f64 = w.iter().map(|p| p.1).sum();
            if total > 0.0 {
                w.iter_mut().for_each(|p| p.1 /= total);
                return w;
            }
        }
        // linear interpolation between the neighbouring points
        let mut pos = (m - self.low[d]) / h;
        if self.periodic[d] {
            pos = pos.rem_euclid(n as f64);
            let i0 = pos.floor() as usize % n;
            let t = pos - pos.floor();
            let i1 = (i0 + 1) % n;
            return if t == 0.0 { vec![(i0, 1.0)] } else { vec![(i0, 1.0 - t), (i1, t)] };
        }
        let pos = pos.clamp(0.0, (n - 1) as f64);
        let i0 = (pos.floor() as usize).min(n - 2);
        let t = pos - i0 as f64;
        if t == 0.0 {
            vec![(i0, 1.0)]
        } else if t == 1.0 {
            vec![(i0 + 1, 1.0)]
        } else {
            vec![(i0, 1.0 - t), (i0 + 1, t)]
        }
    }
}

/// Finite-state L-MDP: row-stochastic passive matrix and per-state `q dt`.
#[derive(Clone, Debug)]
pub struct DiscretizedLmdp {
    pub states: Vec<Vec<f64>>,
    /// Sparse rows `(column, probability)`.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub costs: Vec<f64>,
    pub grid: Option<Grid>,
}

impl DiscretizedLmdp {
    /// Builds from a dense matrix, checking stochasticity and costs.
    pub fn from_dense(p: &DMatrix<f64>, costs: Vec<f64>) -> Result<Self> {
        let n = p.nrows();
        if p.ncols() != n || costs.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: costs.len(),
                context: "discretized problem",
            });
        }
        let rows = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| p[(i, j)] != 0.0)
                    .map(|j| (j, p[(i, j)]))
                    .collect()
            })
            .collect();
        let d = Self {
            states: (0..n).map(|i| vec![i as f64]).collect(),
            rows,
            costs,
            grid: None,
        };
        d.validate()?;
        Ok(d)
    }

    /// Discretizes the passive dynamics of `problem` on a grid over `range`.
    /// Each dimension moves independently with weight proportional to the
    /// Gaussian density at grid points, or by linear interpolation where the
    /// noise is narrower than half a grid cell.
    pub fn from_problem(problem: &LmdpProblem, range: &[(f64, f64)], counts: &[usize]) -> Result<Self> {
        let dyn_ = &problem.dynamics;
        let periodic = (0..range.len())
            .map(|d| dyn_.angle_dims().contains(&d))
            .collect::<Vec<_>>();
        for (d, &p) in periodic.iter().enumerate() {
            if p && ((range[d].0 + PI).abs() > 1e-12 || (range[d].1 - PI).abs() > 1e-12) {
                return Err(Error::Config(format!(
                    "angle dimension {d} must span [-pi, pi)"
                )));
            }
        }
        let grid = Grid::new(range, counts, periodic)?;
        if grid.dim() != dyn_.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: dyn_.state_dim(),
                got: grid.dim(),
                context: "grid dimension",
            });
        }
        let dt = dyn_.dt();
        let mut states = Vec::with_capacity(grid.len());
        let mut rows = Vec::with_capacity(grid.len());
        let mut costs = Vec::with_capacity(grid.len());
        for flat in 0..grid.len() {
            let x = grid.point(flat);
            let a = dyn_.drift(&x)?;
            let per_dim: Vec<Vec<(usize, f64)>> = (0..grid.dim())
                .map(|d| grid.weights_1d(d, x[d] + a[d] * dt, dyn_.noise()[d] * dt.sqrt()))
                .collect();
            let mut row = vec![(0usize, 1.0)];
            for (d, w) in per_dim.iter().enumerate() {
                let mut next = Vec::with_capacity(row.len() * w.len());
                for &(base, p) in &row {
                    for &(i, q) in w {
                        next.push((base * grid.counts[d] + i, p * q));
                    }
                }
                row = next;
            }
            let total: f64 = row.iter().map(|p| p.1).sum();
            row.iter_mut().for_each(|p| p.1 /= total);
            row.sort_by_key(|p| p.0);
            costs.push(problem.cost_increment(&x));
            states.push(x);
            rows.push(row);
        }
        let d = Self {
            states,
            rows,
            costs,
            grid: Some(grid),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            let s: f64 = row.iter().map(|p| p.1).sum();
            if (s - 1.0).abs() > 1e-12 || row.iter().any(|p| p.1 < 0.0) {
                return Err(Error::Config(format!("row {i} is not stochastic (sum {s})")));
            }
        }
        if let Some(i) = self.costs.iter().position(|&c| !(c >= 0.0)) {
            return Err(Error::Config(format!("cost of state {i} is negative")));
        }
        Ok(())
    }

    /// Draws a successor of state `i`.
    pub fn sample_next<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> usize {
        let mut r: f64 = rng.random();
        let row = &self.rows[i];
        for &(j, p) in row {
            if r < p {
                return j;
            }
            r -= p;
        }
        row.last().map(|p| p.0).unwrap_or(i)
    }

    /// `diag(exp(-q)) P z`.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.costs)
            .map(|(row, q)| (-q).exp() * row.iter().map(|&(j, p)| p * z[j]).sum::<f64>())
            .collect()
    }

    /// First state not mutually reachable with state 0, if any.
    pub fn irreducibility_witness(&self) -> Option<usize> {
        let n = self.len();
        let mut reverse = vec![Vec::new(); n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, p) in row {
                if p > 0.0 {
                    reverse[j].push(i);
                }
            }
        }
        let forward: Vec<Vec<usize>> = self
            .rows
            .iter()
            .map(|r| r.iter().filter(|p| p.1 > 0.0).map(|p| p.0).collect())
            .collect();
        for adj in [&forward, &reverse] {
            let mut seen = vec![false; n];
            let mut queue = VecDeque::from([0usize]);
            seen[0] = true;
            while let Some(i) = queue.pop_front() {
                for &j in &adj[i] {
                    if !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            if let Some(i) = seen.iter().position(|s| !s) {
                return Some(i);
            }
        }
        None
    }
}

/// Principal eigenpair of `diag(exp(-q)) P`.
#[derive(Clone, Debug)]
pub struct Eigenpair {
    pub z_avg: f64,
    /// Positive, scaled to unit maximum.
    pub z: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Power iteration on the lazy operator `(I + M) / 2`, which has the same
/// principal eigenvector and is aperiodic.
pub fn solve_principal_eigenpair(d: &DiscretizedLmdp, tol: f64) -> Result<Eigenpair> {
    if d.is_empty() {
        return Err(Error::Config("empty discretized problem".into()));
    }
    if let Some(state) = d.irreducibility_witness() {
        return Err(Error::NotIrreducible { state });
    }
    let n = d.len();
    let mut z = vec![1.0; n];
    let mut residual = f64::INFINITY;
    for it in 1..=MAX_POWER_ITERS {
        let mz = d.apply(&z);
        let lambda = mz.iter().sum::<f64>() / z.iter().sum::<f64>();
        residual = mz
            .iter()
            .zip(&z)
            .map(|(a, b)| (lambda * b - a).abs())
            .fold(0.0, f64::max);
        if residual <= tol {
            return Ok(Eigenpair {
                z_avg: lambda,
                z,
                iterations: it,
                residual,
            });
        }
        let mut next: Vec<f64> = z.iter().zip(&mz).map(|(a, b)| 0.5 * (a + b)).collect();
        let max = next.iter().cloned().fold(0.0, f64::max);
        if !(max > 0.0) || !max.is_finite() {
            return Err(Error::NonFinite("power iteration"));
        }
        next.iter_mut().for_each(|v| *v /= max);
        z = next;
    }
    Err(Error::NoConvergence {
        iterations: MAX_POWER_ITERS,
        residual,
    })
}

/// Writes `x0..,q_dt,z` rows for a solved problem.
pub fn write_oracle_csv<W: Write>(mut out: W, d: &DiscretizedLmdp, pair: &Eigenpair) -> Result<()> {
    let dim = d.states.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(&mut out);
    let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    header.push("q_dt".into());
    header.push("z".into());
    w.write_record(&header)?;
    for ((x, q), z) in d.states.iter().zip(&d.costs).zip(&pair.z) {
        let mut rec: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{q:?}"));
        rec.push(format!("{z:?}"));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<oracle csv>", e))?;
    Ok(())
}

pub fn save_oracle_csv(path: &Path, d: &DiscretizedLmdp, pair: &Eigenpair) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_oracle_csv(std::io::BufWriter::new(f), d, pair)
}

/// Value `V = -ln z` of an oracle, interpolated multilinearly between grid
/// points. Non-periodic dimensions are held constant outside the grid.
pub struct GridValue {
    grid: Grid,
    v: Vec<f64>,
    v_avg: f64,
}

impl GridValue {
    pub fn from_eigenpair(d: &DiscretizedLmdp, pair: &Eigenpair) -> Result<Self> {
        let grid = match &d.grid {
            Some(g) => g.clone(),
            None => Grid::new(&[(0.0, (d.len() - 1) as f64)], &[d.len()], vec![false])?,
        };
        if pair.z.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: pair.z.len(),
                context: "grid value",
            });
        }
        Ok(Self {
            grid,
            v: pair.z.iter().map(|z| -z.ln()).collect(),
            v_avg: -pair.z_avg.ln(),
        })
    }

    /// Lower index, upper index, fraction and d(fraction)/dx in dimension `d`.
    fn bracket(&self, d: usize, x: f64) -> (usize, usize, f64, f64) {
        let g = &self.grid;
        let n = g.counts[d];
        let h = g.spacing(d);
        let pos = (x - g.low[d]) / h;
        if g.periodic[d] {
            let pos = pos.rem_euclid(n as f64);
            let i0 = (pos.floor() as usize).min(n - 1);
            return (i0, (i0 + 1) % n, pos - i0 as f64, 1.0 / h);
        }
        if pos <= 0.0 {
            return (0, 1, 0.0, 0.0);
        }
        if pos >= (n - 1) as f64 {
            return (n - 2, n - 1, 1.0, 0.0);
        }
        let i0 = (pos.floor() as usize).min(n - 2);
        (i0, i0 + 1, pos - i0 as f64, 1.0 / h)
    }
}

impl ValueModel for GridValue {
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let dim = self.grid.dim();
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.len(),
                context: "grid value input",
            });
        }
        let br: Vec<_> = (0..dim).map(|d| self.bracket(d, x[d])).collect();
        let mut value = 0.0;
        let mut grad = vec![0.0; dim];
        let mut idx = vec![0usize; dim];
        for corner in 0..(1usize << dim) {
            let mut w = 1.0;
            for (d, &(i0, i1, t, _)) in br.iter().enumerate() {
                let hi = corner >> d & 1 == 1;
                idx[d] = if hi { i1 } else { i0 };
                w *= if hi { t } else { 1.0 - t };
            }
            let v = self.v[self.grid.flat(&idx)];
            value += w * v;
            for (d, g) in grad.iter_mut().enumerate() {
                let dt = br[d].3;
                let hi = corner >> d & 1 == 1;
                let rest: f64 = br
                    .iter()
                    .enumerate()
                    .filter(|&(e, _)| e != d)
                    .map(|(e, &(_, _, te, _))| if corner >> e & 1 == 1 { te } else { 1.0 - te })
                    .product();
                *g += v * rest * if hi { dt } else { -dt };
            }
        }
        Ok((value, grad))
    }

    fn v_avg(&self) -> f64 {
        self.v_avg
    }
}

/// Per-dimension noise estimate
/// `sigma_i = std(x'_i - x_i - A_i(x) dt) / sqrt(dt)`, with `A` replaced by
/// the mean increment of the sample's cell on a uniform grid over the data.
///
/// This is a simple stand-in for a nonparametric drift regression; cells
/// with fewer than ten samples are skipped.
pub fn estimate_sigma_residual(
    samples: &[PassiveSample],
    dt: f64,
    angle_dims: &[usize],
) -> Result<Vec<f64>> {
    if samples.len() < MIN_SIGMA_SAMPLES {
        return Err(Error::InsufficientData {
            what: "sigma estimation samples",
            needed: MIN_SIGMA_SAMPLES,
            got: samples.len(),
        });
    }
    let n = samples[0].x.dim();
    let bins = ((samples.len() as f64 / 100.0).powf(1.0 / n as f64).floor() as usize).clamp(1, 32);
    let mut low = vec![f64::INFINITY; n];
    let mut high = vec![f64::NEG_INFINITY; n];
    for s in samples {
        for d in 0..n {
            low[d] = low[d].min(s.x[d]);
            high[d] = high[d].max(s.x[d]);
        }
    }
    let cell_of = |x: &[f64]| -> usize {
        (0..n).fold(0, |acc, d| {
            let w = high[d] - low[d];
            let i = if w > 0.0 {
                (((x[d] - low[d]) / w * bins as f64) as usize).min(bins - 1)
            } else {
                0
            };
            acc * bins + i
        })
    };
    let increment = |s: &PassiveSample| -> Vec<f64> {
        let mut d: Vec<f64> = s.x_next.iter().zip(s.x.iter()).map(|(b, a)| b - a).collect();
        for &i in angle_dims {
            d[i] = crate::lmdp::wrap_angle(d[i]);
        }
        d
    };
    let cells = bins.pow(n as u32);
    let mut count = vec![0usize; cells];
    let mut sum = vec![vec![0.0; n]; cells];
    let mut incs = Vec::with_capacity(samples.len());
    let mut ids = Vec::with_capacity(samples.len());
    for s in samples {
        let c = cell_of(&s.x);
        let inc = increment(s);
        count[c] += 1;
        sum[c].iter_mut().zip(&inc).for_each(|(a, b)| *a += b);
        incs.push(inc);
        ids.push(c);
    }
    let mut sq = vec![0.0; n];
    let mut used = 0usize;
    for (inc, &c) in incs.iter().zip(&ids) {
        if count[c] < MIN_CELL_SAMPLES {
            continue;
        }
        used += 1;
        for d in 0..n {
            let r = inc[d] - sum[c][d] / count[c] as f64;
            sq[d] += r * r;
        }
    }
    let used_cells = count.iter().filter(|&&k| k >= MIN_CELL_SAMPLES).count();
    if used_cells == 0 {
        return Err(Error::InsufficientData {
            what: "samples per cell",
            needed: MIN_CELL_SAMPLES,
            got: count.iter().copied().max().unwrap_or(0),
        });
    }
    let dof = used - used_cells;
    Ok(sq.iter().map(|s| (s / dof as f64).sqrt() / dt.sqrt()).collect())
}
