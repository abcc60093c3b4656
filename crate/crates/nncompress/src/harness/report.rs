//! Compression accounting, inference timing, and report emission.
//!
//! Compression rates count nonzero entries of the convolution/dense weight
//! tensors (the compressible parameter store; pruned entries are exact zeros
//! after mask application). Biases and BatchNorm parameters stay in the
//! `total_params` inventory but do not enter the rate, which is what makes
//! composed pipeline rates multiply exactly: pruning a quarter of the weights
//! scales the count by exactly 4, and an architecture swap scales it by the
//! weight-count ratio.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::nn::Model;

/// Per-step traces suitable for plotting sparsity/loss evolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Traces {
    pub loss: Vec<f64>,
    pub target_sparsity: Vec<f64>,
    pub measured_sparsity: Vec<f64>,
}

/// One measured compression result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub method: String,
    pub total_params: u64,
    pub nonzero_params: u64,
    pub disk_bytes: u64,
    pub compression_rate: f64,
    pub inference_seconds: f64,
    pub speedup: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub traces: Option<Traces>,
}

/// Nonzero entries across the model's conv/dense weight tensors.
pub fn count_nonzero_weights(model: &Model) -> u64 {
    model
        .weight_tensors()
        .iter()
        .map(|(_, t)| t.data().iter().filter(|&&v| v != 0.0).count() as u64)
        .sum()
}

/// Baseline nonzero weight count divided by the compressed model's. Pruned
/// entries must already be zeroed (the mask application contract).
pub fn compression_rate(baseline: &Model, compressed: &Model) -> f64 {
    count_nonzero_weights(baseline) as f64 / count_nonzero_weights(compressed) as f64
}

/// Median wall-clock seconds of `repeats` full-dataset forward passes.
pub fn measure_inference(model: &Model, data: &Dataset, repeats: usize) -> Result<f64> {
    if repeats < 3 {
        return Err(Error::Parameter(format!(
            "timing needs at least 3 repeats for a stable median, got {repeats}"
        )));
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let mut pos = 0;
        while pos < data.len() {
            let end = (pos + 256).min(data.len());
            let idx: Vec<usize> = (pos..end).collect();
            let batch = data.gather_images(&idx)?;
            let _ = model.forward(&batch)?;
            pos = end;
        }
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    })
}

/// Write reports as a JSON array with stable key order.
pub fn emit_report(reports: &[CompressionReport], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, reports)
        .map_err(|e| Error::Format(format!("report serialization failed: {e}")))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Parse a report file back (round-trips all numeric fields exactly).
pub fn read_reports(path: &Path) -> Result<Vec<CompressionReport>> {
    let reader = BufReader::new(File::open(path)?);
    serde_json::from_reader(reader)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
