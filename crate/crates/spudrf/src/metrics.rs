//! Evaluation metrics and run artifacts: MAE, cumulative score, the
//! entropy-versus-target histogram, and the trace/summary writers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::forest::{forest_entropy, ForestModel};

/// Mean absolute error.
pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_pairs(predictions, targets)?;
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Cumulative score: percentage of predictions within `level` of the target
/// (inclusive boundary).
pub fn cumulative_score(predictions: &[f64], targets: &[f64], level: f64) -> Result<f64> {
    check_pairs(predictions, targets)?;
    if !level.is_finite() || level < 0.0 {
        return Err(Error::Usage(format!(
            "cumulative-score level must be finite and >= 0, got {level}"
        )));
    }
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| (*p - *t).abs() <= level)
        .count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

fn check_pairs(predictions: &[f64], targets: &[f64]) -> Result<()> {
    if predictions.is_empty() {
        return Err(Error::Usage("metrics need at least one sample".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Usage(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::Usage("metrics need finite values".into()));
    }
    Ok(())
}

/// One bar of the entropy-versus-target histogram.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyBin {
    /// Midpoint of the bin's target interval.
    pub center: f64,
    /// Samples falling in the bin.
    pub count: usize,
    /// Their average predictive-entropy bound.
    pub mean_entropy: f64,
}

/// Bucket the dataset by target into `bin_width`-wide bins spanning the
/// observed range and average the model's entropy bound per bin. Empty bins
/// are omitted; the top edge belongs to the last bin.
pub fn entropy_by_target_bin(
    model: &ForestModel,
    dataset: &Dataset,
    bin_width: f64,
) -> Result<Vec<EntropyBin>> {
    if dataset.is_empty() {
        return Err(Error::Usage("entropy histogram needs samples".into()));
    }
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(Error::Usage(format!(
            "bin width must be positive and finite, got {bin_width}"
        )));
    }
    let targets = dataset.targets();
    let min = targets.iter().copied().fold(f64::INFINITY, f64::min);
    let max = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bin_count = (((max - min) / bin_width).ceil() as usize).max(1);
    let mut counts = vec![0usize; bin_count];
    let mut sums = vec![0.0; bin_count];
    for sample in &dataset.samples {
        let idx = (((sample.target - min) / bin_width).floor() as usize).min(bin_count - 1);
        counts[idx] += 1;
        sums[idx] += forest_entropy(model, &sample.features)?;
    }
    Ok((0..bin_count)
        .filter(|&i| counts[i] > 0)
        .map(|i| EntropyBin {
            center: min + (i as f64 + 0.5) * bin_width,
            count: counts[i],
            mean_entropy: sums[i] / counts[i] as f64,
        })
        .collect())
}

/// One row of the per-pace training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub pace: usize,
    pub lambda: f64,
    /// Absent under hard weighting; written as NaN in the CSV.
    pub lambda_prime: Option<f64>,
    pub gamma: f64,
    pub n_selected: usize,
    pub n_soft: usize,
    pub n_zero: usize,
    pub train_mae: f64,
    pub test_mae: f64,
    pub test_cs: f64,
    pub mean_entropy: f64,
    pub score_shift: f64,
}

/// Fixed column layout of trace.csv.
pub const TRACE_HEADER: &str = "pace,lambda,lambda_prime,gamma,n_selected,n_soft,n_zero,\
train_mae,test_mae,test_cs,mean_entropy,score_shift";

/// Write the per-pace trace CSV. Floats print in shortest-roundtrip form, so
/// identical runs emit identical bytes.
pub fn emit_trace(records: &[TraceRecord], path: &Path) -> Result<()> {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in records {
        let lambda_prime = r.lambda_prime.unwrap_or(f64::NAN);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.pace,
            r.lambda,
            lambda_prime,
            r.gamma,
            r.n_selected,
            r.n_soft,
            r.n_zero,
            r.train_mae,
            r.test_mae,
            r.test_cs,
            r.mean_entropy,
            r.score_shift
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read back a trace CSV written by [`emit_trace`].
pub fn parse_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == TRACE_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("trace header must be '{TRACE_HEADER}'"),
            })
        }
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 12 fields, found {}", fields.len()),
            });
        }
        let int = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid integer '{s}'"),
            })
        };
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid number '{s}'"),
            })
        };
        let lambda_prime = num(fields[2])?;
        records.push(TraceRecord {
            pace: int(fields[0])?,
            lambda: num(fields[1])?,
            lambda_prime: if lambda_prime.is_nan() {
                None
            } else {
                Some(lambda_prime)
            },
            gamma: num(fields[3])?,
            n_selected: int(fields[4])?,
            n_soft: int(fields[5])?,
            n_zero: int(fields[6])?,
            train_mae: num(fields[7])?,
            test_mae: num(fields[8])?,
            test_cs: num(fields[9])?,
            mean_entropy: num(fields[10])?,
            score_shift: num(fields[11])?,
        });
    }
    Ok(records)
}

/// Write any serializable report as pretty JSON.
pub fn emit_summary<T: Serialize>(summary: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Input(format!("summary serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
