//! Parameter snapshot format.
//!
//! ```text
//! # pac-params v1
//! # {"kind":"rbf","low":[..],"high":[..],"counts":[..],"extra":{..}}
//! <one parameter per line, shortest round-trip decimal>
//! ```
//!
//! `kind` is `rbf`, `tabular` (`low`, `high`, `counts`) or `mlp` (`sizes`,
//! `output`, `low`, `high`). `extra` carries caller-defined values such as
//! `z_avg` and the control-cost matrix.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use super::{MlpZ, OutputActivation, RbfZ, TabularZ, ZApproximator};
use crate::error::{Error, Result};

const MAGIC: &str = "# pac-params v1";

pub fn write_snapshot<W: Write>(
    mut out: W,
    approx: &dyn ZApproximator,
    extra: &Value,
) -> std::io::Result<()> {
    let mut meta = approx.metadata();
    if let Value::Object(map) = &mut meta {
        map.insert("extra".into(), extra.clone());
    }
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "# {meta}")?;
    for p in approx.params() {
        writeln!(out, "{p:?}")?;
    }
    Ok(())
}

pub fn save_snapshot(path: &Path, approx: &dyn ZApproximator, extra: &Value) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_snapshot(&mut w, approx, extra).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn ranges(meta: &Value) -> Result<Vec<(f64, f64)>> {
    let get = |k: &str| -> Result<Vec<f64>> {
        serde_json::from_value(meta.get(k).cloned().unwrap_or(Value::Null))
            .map_err(|_| Error::Snapshot(format!("missing `{k}`")))
    };
    let (low, high) = (get("low")?, get("high")?);
    if low.len() != high.len() {
        return Err(Error::Snapshot("low/high length mismatch".into()));
    }
    Ok(low.into_iter().zip(high).collect())
}

fn counts(meta: &Value) -> Result<Vec<usize>> {
    serde_json::from_value(meta.get("counts").cloned().unwrap_or(Value::Null))
        .map_err(|_| Error::Snapshot("missing `counts`".into()))
}

/// Reads a snapshot, returning the approximator and the `extra` object.
pub fn read_snapshot<R: Read>(input: R) -> Result<(Box<dyn ZApproximator>, Value)> {
    let mut lines = BufReader::new(input).lines();
    let mut next = || -> Result<Option<String>> {
        lines
            .next()
            .transpose()
            .map_err(|e| Error::Snapshot(e.to_string()))
    };
    if next()?.as_deref() != Some(MAGIC) {
        return Err(Error::Snapshot("missing header line".into()));
    }
    let meta_line = next()?.ok_or_else(|| Error::Snapshot("missing metadata line".into()))?;
    let meta: Value = serde_json::from_str(
        meta_line
            .strip_prefix("# ")
            .ok_or_else(|| Error::Snapshot("bad metadata line".into()))?,
    )?;
    let mut params = Vec::new();
    while let Some(line) = next()? {
        if line.trim().is_empty() {
            continue;
        }
        params.push(
            line.trim()
                .parse::<f64>()
                .map_err(|e| Error::Snapshot(format!("parameter {}: {e}", params.len())))?,
        );
    }
    let extra = meta.get("extra").cloned().unwrap_or(Value::Null);
    let kind = meta.get("kind").and_then(Value::as_str).unwrap_or("");
    let mut approx: Box<dyn ZApproximator> = match kind {
        "rbf" => {
            let periodic: Vec<bool> = meta
                .get("periodic")
                .map(|v| serde_json::from_value(v.clone()))
                .transpose()
                .map_err(|_| Error::Snapshot("bad `periodic`".into()))?
                .unwrap_or_default();
            let dims: Vec<usize> = (0..periodic.len()).filter(|&d| periodic[d]).collect();
            Box::new(RbfZ::build_grid(&ranges(&meta)?, &counts(&meta)?, 1.0)?.with_periodic_dims(&dims)?)
        }
        "tabular" => Box::new(TabularZ::new(&ranges(&meta)?, &counts(&meta)?, 1.0)?),
        "mlp" => {
            let sizes: Vec<usize> =
                serde_json::from_value(meta.get("sizes").cloned().unwrap_or(Value::Null))
                    .map_err(|_| Error::Snapshot("missing `sizes`".into()))?;
            let output = OutputActivation::from_name(
                meta.get("output").and_then(Value::as_str).unwrap_or(""),
            )?;
            return Ok((
                Box::new(MlpZ::from_parts(sizes, output, &ranges(&meta)?, params)?),
                extra,
            ));
        }
        other => return Err(Error::Snapshot(format!("unknown kind `{other}`"))),
    };
    if approx.num_params() != params.len() {
        return Err(Error::Snapshot(format!(
            "expected {} parameters, got {}",
            approx.num_params(),
            params.len()
        )));
    }
    approx.params_mut().copy_from_slice(&params);
    Ok((approx, extra))
}

pub fn load_snapshot(path: &Path) -> Result<(Box<dyn ZApproximator>, Value)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_snapshot(f)
}
