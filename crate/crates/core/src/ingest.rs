//! Recorded trajectories: CSV load/save, passive-transition reconstruction,
//! balanced nearest-neighbour resampling, k-fold splits, and a synthetic
//! replay dataset generated from the merge simulator.
//!
//! Trajectory CSV layout (one row per time step):
//!
//! ```text
//! traj,t,x0,...,x{n-1},u0,...,u{m-1}
//! ```
//!
//! `traj` is optional; without it the whole file is one trajectory. Column
//! names are configurable through [`TrajectorySchema`].

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmdp::{wrap_angle, ActionVec, LmdpProblem, NoiseDraw, PassiveSample, StateVec};

/// Allowed deviation of consecutive timestamps from the sampling period.
pub const DT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySchema {
    #[serde(default)]
    pub id_column: Option<String>,
    pub time_column: String,
    pub state_columns: Vec<String>,
    pub action_columns: Vec<String>,
    pub dt: f64,
}

impl TrajectorySchema {
    /// `traj,t,x0..,u0..`.
    pub fn standard(n: usize, m: usize, dt: f64) -> Self {
        Self {
            id_column: Some("traj".into()),
            time_column: "t".into(),
            state_columns: (0..n).map(|i| format!("x{i}")).collect(),
            action_columns: (0..m).map(|i| format!("u{i}")).collect(),
            dt,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryLog {
    pub id: String,
    pub dt: f64,
    pub t: Vec<f64>,
    pub x: Vec<StateVec>,
    pub u: Vec<ActionVec>,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadedLogs {
    pub logs: Vec<TrajectoryLog>,
    /// Rows discarded for non-finite entries.
    pub dropped_rows: usize,
}

pub fn load_trajectories(path: &Path, schema: &TrajectorySchema) -> Result<LoadedLogs> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trajectories(f, schema)
}

/// Parses a trajectory CSV. A dropped row ends the current trajectory; the
/// remaining rows continue as `<id>#<k>`.
pub fn read_trajectories<R: Read>(input: R, schema: &TrajectorySchema) -> Result<LoadedLogs> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = schema.id_column.as_deref().map(col).transpose()?;
    let t_col = col(&schema.time_column)?;
    let x_cols = schema.state_columns.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let u_cols = schema.action_columns.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;

    let mut out = LoadedLogs::default();
    let mut segments: BTreeMap<String, usize> = BTreeMap::new();
    let mut open: BTreeMap<String, Option<usize>> = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        let id = id_col.map_or_else(|| "0".to_string(), |c| rec.get(c).unwrap_or("").trim().to_string());
        let parse = |c: usize| -> Result<f64> {
            let s = rec.get(c).unwrap_or("").trim();
            s.parse::<f64>().map_err(|_| Error::BadRow {
                row,
                detail: format!("cannot parse `{s}`"),
            })
        };
        let t = parse(t_col)?;
        let x = x_cols.iter().map(|&c| parse(c)).collect::<Result<Vec<_>>>()?;
        let u = u_cols.iter().map(|&c| parse(c)).collect::<Result<Vec<_>>>()?;
        if !t.is_finite() || x.iter().chain(&u).any(|v| !v.is_finite()) {
            out.dropped_rows += 1;
            open.insert(id, None);
            continue;
        }
        let slot = match open.get(&id).copied().flatten() {
            Some(i) => {
                let log: &TrajectoryLog = &out.logs[i];
                let prev = *log.t.last().expect("open logs are non-empty");
                if !(t > prev) {
                    return Err(Error::BadRow {
                        row,
                        detail: format!("time {t} not after {prev} in trajectory `{id}`"),
                    });
                }
                if (t - prev - schema.dt).abs() > DT_TOLERANCE {
                    return Err(Error::BadRow {
                        row,
                        detail: format!("time step {} differs from dt {}", t - prev, schema.dt),
                    });
                }
                i
            }
            None => {
                let k = segments.entry(id.clone()).or_insert(0);
                let name = if *k == 0 { id.clone() } else { format!("{id}#{k}") };
                *k += 1;
                out.logs.push(TrajectoryLog {
                    id: name,
                    dt: schema.dt,
                    t: Vec::new(),
                    x: Vec::new(),
                    u: Vec::new(),
                });
                open.insert(id.clone(), Some(out.logs.len() - 1));
                out.logs.len() - 1
            }
        };
        let log = &mut out.logs[slot];
        log.t.push(t);
        log.x.push(StateVec(x));
        log.u.push(ActionVec(u));
    }
    if out.dropped_rows > 0 {
        log::warn!("dropped {} rows with non-finite entries", out.dropped_rows);
    }
    Ok(out)
}

/// Writes logs with shortest round-trip formatting, so reloading is exact.
pub fn write_trajectories<W: Write>(out: W, logs: &[TrajectoryLog], schema: &TrajectorySchema) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = Vec::new();
    if let Some(id) = &schema.id_column {
        header.push(id);
    }
    header.push(&schema.time_column);
    header.extend(schema.state_columns.iter().map(String::as_str));
    header.extend(schema.action_columns.iter().map(String::as_str));
    w.write_record(&header)?;
    for log in logs {
        for k in 0..log.len() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            if schema.id_column.is_some() {
                rec.push(log.id.clone());
            }
            rec.push(format!("{:?}", log.t[k]));
            rec.extend(log.x[k].iter().map(|v| format!("{v:?}")));
            rec.extend(log.u[k].iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("<trajectory csv>", e))?;
    Ok(())
}

pub fn save_trajectories(path: &Path, logs: &[TrajectoryLog], schema: &TrajectorySchema) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trajectories(std::io::BufWriter::new(f), logs, schema)
}

/// Writes `x0..,next_x0..,q_dt` rows.
pub fn write_passive_samples<W: Write>(out: W, samples: &[PassiveSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = samples.first().map_or(0, |s| s.x.dim());
    let mut header: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    header.extend((0..n).map(|i| format!("next_x{i}")));
    header.push("q_dt".into());
    w.write_record(&header)?;
    for s in samples {
        let mut rec: Vec<String> = s.x.iter().chain(s.x_next.iter()).map(|v| format!("{v:?}")).collect();
        rec.push(format!("{:?}", s.q));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<passive csv>", e))?;
    Ok(())
}

pub fn save_passive_samples(path: &Path, samples: &[PassiveSample]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_passive_samples(std::io::BufWriter::new(f), samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reconstruction {
    /// `x_{k+1} - B u_k dt`.
    #[default]
    Corrected,
    /// `x_{k+1} - B u_k`, without the time step.
    AsPrinted,
}

/// Removes the known control effect from each logged transition.
pub fn reconstruct_passive(
    log: &TrajectoryLog,
    problem: &LmdpProblem,
    mode: Reconstruction,
) -> Result<Vec<PassiveSample>> {
    let dynamics = &problem.dynamics;
    let (n, m) = (dynamics.state_dim(), dynamics.action_dim());
    let mut out = Vec::with_capacity(log.len().saturating_sub(1));
    for k in 0..log.len().saturating_sub(1) {
        let (x, u, xd) = (&log.x[k], &log.u[k], &log.x[k + 1]);
        if x.dim() != n || xd.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x.dim(),
                context: "logged state",
            });
        }
        if u.dim() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: u.dim(),
                context: "logged action",
            });
        }
        let effect = match mode {
            Reconstruction::Corrected => dynamics.control_increment(u)?,
            Reconstruction::AsPrinted => (0..n)
                .map(|i| (0..m).map(|j| dynamics.input_gain()[(i, j)] * u[j]).sum())
                .collect(),
        };
        let mut next: Vec<f64> = xd.iter().zip(&effect).map(|(a, b)| a - b).collect();
        for &i in dynamics.angle_dims() {
            next[i] = wrap_angle(next[i]);
        }
        out.push(PassiveSample::new(
            x.clone(),
            StateVec(next),
            problem.cost_increment(x),
        )?);
    }
    Ok(out)
}

/// Exact nearest-neighbour index over bucketed, box-normalized coordinates.
pub struct NearestIndex<'a> {
    points: &'a [PassiveSample],
    low: Vec<f64>,
    high: Vec<f64>,
    scale: Vec<f64>,
    bins: usize,
    buckets: Vec<Vec<usize>>,
}

impl<'a> NearestIndex<'a> {
    pub fn new(points: &'a [PassiveSample]) -> Result<Self> {
        let first = points.first().ok_or(Error::InsufficientData {
            what: "samples to index",
            needed: 1,
            got: 0,
        })?;
        let n = first.x.dim();
        let mut low = vec![f64::INFINITY; n];
        let mut high = vec![f64::NEG_INFINITY; n];
        for p in points {
            for d in 0..n {
                low[d] = low[d].min(p.x[d]);
                high[d] = high[d].max(p.x[d]);
            }
        }
        let scale: Vec<f64> = low
            .iter()
            .zip(&high)
            .map(|(l, h)| if h > l { 1.0 / (h - l) } else { 1.0 })
            .collect();
        let bins = ((points.len() as f64 / 2.0).powf(1.0 / n as f64).ceil() as usize).clamp(1, 64);
        let mut idx = Self {
            points,
            low,
            high,
            scale,
            bins,
            buckets: vec![Vec::new(); bins.pow(n as u32)],
        };
        for (i, p) in points.iter().enumerate() {
            let c = idx.cell(&idx.normalize(&p.x));
            let flat = idx.flat(&c);
            idx.buckets[flat].push(i);
        }
        Ok(idx)
    }

    /// Data bounding box.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.low.iter().copied().zip(self.high.iter().copied()).collect()
    }

    fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.low)
            .zip(&self.scale)
            .map(|((v, l), s)| (v - l) * s)
            .collect()
    }

    fn cell(&self, y: &[f64]) -> Vec<isize> {
        y.iter()
            .map(|v| ((v * self.bins as f64).floor() as isize).clamp(0, self.bins as isize - 1))
            .collect()
    }

    fn flat(&self, c: &[isize]) -> usize {
        c.iter().fold(0, |acc, &i| acc * self.bins + i as usize)
    }

    /// Index of the sample whose `x` is nearest to `x` (ties go to the lower index).
    pub fn nearest(&self, x: &[f64]) -> usize {
        let y = self.normalize(x);
        let home = self.cell(&y);
        let n = home.len();
        let w = 1.0 / self.bins as f64;
        let mut best = (f64::INFINITY, usize::MAX);
        let max_r = self.bins as isize;
        for r in 0..=max_r {
            // every cell at Chebyshev distance r from home
            let mut off = vec![-r; n];
            loop {
                if off.iter().any(|o| o.abs() == r) {
                    let c: Vec<isize> = home.iter().zip(&off).map(|(h, o)| h + o).collect();
                    if c.iter().all(|&i| i >= 0 && i < self.bins as isize) {
                        for &i in &self.buckets[self.flat(&c)] {
                            let d2: f64 = self
                                .normalize(&self.points[i].x)
                                .iter()
                                .zip(&y)
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum();
                            if d2 < best.0 || (d2 == best.0 && i < best.1) {
                                best = (d2, i);
                            }
                        }
                    }
                }
                let mut d = 0;
                while d < n {
                    off[d] += 1;
                    if off[d] <= r {
                        break;
                    }
                    off[d] = -r;
                    d += 1;
                }
                if d == n {
                    break;
                }
            }
            // cells beyond ring r are at least r * w away
            if best.1 != usize::MAX && best.0.sqrt() <= r as f64 * w {
                break;
            }
        }
        best.1
    }
}

/// Draws `count` uniform states in the data bounding box and returns the
/// nearest sample to each.
pub fn resample_balanced<R: Rng + ?Sized>(
    samples: &[PassiveSample],
    count: usize,
    rng: &mut R,
) -> Result<Vec<PassiveSample>> {
    let index = NearestIndex::new(samples)?;
    let bounds = index.bounds();
    Ok((0..count)
        .map(|_| {
            let q: Vec<f64> = bounds
                .iter()
                .map(|&(l, h)| if h > l { l + (h - l) * rng.random::<f64>() } else { l })
                .collect();
            samples[index.nearest(&q)].clone()
        })
        .collect())
}

/// Trajectory id to fold index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_ids(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.assignments.values().for_each(|&f| sizes[f] += 1);
        sizes
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["trajectory", "fold"])?;
        for (id, f) in &self.assignments {
            w.write_record([id.as_str(), &f.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<fold csv>", e))?;
        Ok(())
    }
}

/// Shuffles trajectories and deals them round-robin into `k` folds.
pub fn kfold_split<R: Rng + ?Sized>(logs: &[TrajectoryLog], k: usize, rng: &mut R) -> Result<FoldSplit> {
    if k == 0 || logs.len() < k {
        return Err(Error::InsufficientData {
            what: "trajectories for the fold count",
            needed: k.max(1),
            got: logs.len(),
        });
    }
    let mut ids: Vec<&str> = logs.iter().map(|l| l.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != logs.len() {
        return Err(Error::Config("duplicate trajectory ids".into()));
    }
    ids.shuffle(rng);
    Ok(FoldSplit {
        k,
        assignments: ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id.to_string(), i % k))
            .collect(),
    })
}

/// PD gains of the scripted merge controller used to generate replay data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedMerge {
    pub kp: f64,
    pub kd: f64,
    pub limit: f64,
}

impl Default for ScriptedMerge {
    fn default() -> Self {
        Self {
            kp: 0.3,
            kd: 1.2,
            limit: 4.0,
        }
    }
}

impl ScriptedMerge {
    /// Steers the ego toward the gap midpoint at the follower's speed.
    pub fn action(&self, x: &[f64]) -> f64 {
        let (dx12, dv12, dx02, dv02) = (x[0], x[1], x[2], x[3]);
        let u = -self.kp * (dx12 - 0.5 * dx02) - self.kd * (dv12 - dv02);
        u.clamp(-self.limit, self.limit)
    }
}

/// Controlled merge rollouts together with the noise behind each step.
#[derive(Clone, Debug)]
pub struct ReplayDataset {
    pub logs: Vec<TrajectoryLog>,
    pub noise: Vec<Vec<NoiseDraw>>,
}

impl ReplayDataset {
    /// Passive successors of every logged state under the recorded noise.
    pub fn direct_passive(&self, problem: &LmdpProblem) -> Result<Vec<PassiveSample>> {
        let mut out = Vec::new();
        for (log, noise) in self.logs.iter().zip(&self.noise) {
            for k in 0..log.len().saturating_sub(1) {
                let x = &log.x[k];
                out.push(PassiveSample::new(
                    x.clone(),
                    problem.dynamics.passive_from(x, &noise[k])?,
                    problem.cost_increment(x),
                )?);
            }
        }
        Ok(out)
    }
}

/// Rolls out `count` controlled trajectories of `steps` transitions from the
/// problem's initial region.
pub fn generate_replay<R: Rng + ?Sized>(
    problem: &LmdpProblem,
    controller: &ScriptedMerge,
    count: usize,
    steps: usize,
    rng: &mut R,
) -> Result<ReplayDataset> {
    let dynamics = &problem.dynamics;
    let dt = dynamics.dt();
    let mut logs = Vec::with_capacity(count);
    let mut noise = Vec::with_capacity(count);
    for id in 0..count {
        let mut x = problem.sample_initial(rng);
        x.0.iter_mut().for_each(|v| *v = crate::lmdp::quantize(*v));
        let mut log = TrajectoryLog {
            id: format!("{id:04}"),
            dt,
            t: Vec::with_capacity(steps + 1),
            x: Vec::with_capacity(steps + 1),
            u: Vec::with_capacity(steps + 1),
        };
        let mut draws = Vec::with_capacity(steps);
        for k in 0..=steps {
            let u = ActionVec(vec![controller.action(&x)]);
            log.t.push(k as f64 * dt);
            log.x.push(x.clone());
            log.u.push(u.clone());
            if k < steps {
                let w = dynamics.draw_noise(rng);
                x = dynamics.controlled_from(&x, &u, &w)?;
                draws.push(w);
            }
        }
        logs.push(log);
        noise.push(draws);
    }
    Ok(ReplayDataset { logs, noise })
}
