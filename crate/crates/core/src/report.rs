//! Solver traces and the small statistics used to summarize them.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bome::BomeStepTrace;
use crate::error::Result;

/// Per-epoch means of the step trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_j_c: f64,
    pub mean_j_a: f64,
    pub mean_qhat: f64,
    pub mean_lambda: f64,
    pub max_grad_ja_norm: f64,
}

/// The full per-step record of one generator training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub traces: Vec<BomeStepTrace>,
}

impl RunReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, trace: BomeStepTrace) {
        self.traces.push(trace);
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn j_c_series(&self) -> Vec<f64> {
        self.traces.iter().map(|t| t.j_c).collect()
    }

    pub fn grad_norm_series(&self) -> Vec<f64> {
        self.traces.iter().map(|t| t.grad_ja_norm).collect()
    }

    /// Largest pre-clipping attacker-gradient norm.
    pub fn max_grad_ja_norm_raw(&self) -> f64 {
        self.traces.iter().map(|t| t.grad_ja_norm_raw).fold(0.0, f64::max)
    }

    pub fn max_grad_ja_norm(&self) -> f64 {
        self.traces.iter().map(|t| t.grad_ja_norm).fold(0.0, f64::max)
    }

    pub fn degenerate_steps(&self) -> usize {
        self.traces.iter().filter(|t| t.degenerate).count()
    }

    pub fn epoch_summaries(&self) -> Vec<EpochSummary> {
        let mut out: Vec<EpochSummary> = Vec::new();
        for chunk in self.traces.chunk_by(|a, b| a.epoch == b.epoch) {
            let n = chunk.len() as f64;
            let mean = |f: fn(&BomeStepTrace) -> f64| chunk.iter().map(f).sum::<f64>() / n;
            out.push(EpochSummary {
                epoch: chunk[0].epoch,
                steps: chunk.len(),
                mean_j_c: mean(|t| t.j_c),
                mean_j_a: mean(|t| t.j_a),
                mean_qhat: mean(|t| t.qhat),
                mean_lambda: mean(|t| t.lambda),
                max_grad_ja_norm: chunk.iter().map(|t| t.grad_ja_norm).fold(0.0, f64::max),
            });
        }
        out
    }

    pub fn write_csv_to(&self, sink: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        if self.traces.is_empty() {
            w.write_record(TRACE_COLUMNS)?;
        }
        for t in &self.traces {
            w.serialize(t)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.write_csv_to(std::fs::File::create(path)?)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let traces = r.deserialize().collect::<std::result::Result<Vec<BomeStepTrace>, _>>()?;
        Ok(Self { traces })
    }
}

const TRACE_COLUMNS: [&str; 11] = [
    "step",
    "epoch",
    "j_c",
    "j_c_after",
    "j_a",
    "qhat",
    "lambda",
    "grad_ja_norm",
    "grad_ja_norm_raw",
    "grad_q_norm",
    "degenerate",
];

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Population variances of the first and last quarter of a series.
pub fn quartile_variances(xs: &[f64]) -> (f64, f64) {
    let q = (xs.len() / 4).max(1);
    let var = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / s.len() as f64
    };
    (var(&xs[..q.min(xs.len())]), var(&xs[xs.len().saturating_sub(q)..]))
}
