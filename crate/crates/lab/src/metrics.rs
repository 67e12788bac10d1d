//! Metrics JSONL, loss CSV and the merged comparison CSV.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use flashgrpo_core::grpo::{MetricsRecord, Method};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Appends one JSON object per line, flushed after every line so that an
/// interrupted run leaves a readable prefix.
pub struct JsonlWriter {
    file: File,
    path: PathBuf,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| LabError::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let mut line = serde_json::to_vec(value)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| LabError::io(&self.path, e))?;
        self.file.flush().map_err(|e| LabError::io(&self.path, e))
    }
}

/// Reads metrics records. A final line without its newline (a write cut
/// short) is ignored.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| LabError::io(path, e))?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        out.push(serde_json::from_str(line.trim_end())?);
    }
    Ok(out)
}

/// Writes `iteration,loss` rows.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let (_, loss): (usize, f64) = row?;
        out.push(loss);
    }
    Ok(out)
}

/// One row of the comparison CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub iteration: usize,
    pub wall_ms: f64,
    pub method: Method,
    pub mean_reward: f64,
    pub grad_norm: f64,
}

impl From<&MetricsRecord> for ComparisonRow {
    fn from(r: &MetricsRecord) -> Self {
        Self {
            iteration: r.iter,
            wall_ms: r.wall_ms,
            method: r.method,
            mean_reward: r.mean_reward,
            grad_norm: r.grad_norm,
        }
    }
}

const CHECKPOINT_PREFIX: &str = "# checkpoint=";

/// Writes the merged comparison: a `# checkpoint=<sha256>` comment line,
/// then a header row and one row per iteration of every run.
pub fn write_comparison(path: &Path, checkpoint_sha: &str, rows: &[ComparisonRow]) -> Result<()> {
    let mut file = File::create(path).map_err(|e| LabError::io(path, e))?;
    writeln!(file, "{CHECKPOINT_PREFIX}{checkpoint_sha}").map_err(|e| LabError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

/// Reads a comparison CSV back: the starting checkpoint hash and the rows.
pub fn read_comparison(path: &Path) -> Result<(String, Vec<ComparisonRow>)> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let sha = first
        .strip_prefix(CHECKPOINT_PREFIX)
        .ok_or_else(|| LabError::Parse {
            path: path.to_path_buf(),
            message: "missing checkpoint line".into(),
        })?
        .to_string();
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let rows = r.deserialize().collect::<std::result::Result<Vec<ComparisonRow>, _>>()?;
    Ok((sha, rows))
}

/// Coefficient of variation (population std over mean).
pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}
