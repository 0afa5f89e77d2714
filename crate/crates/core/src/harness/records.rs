//! Metrics and gate-trace CSV files.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the metrics CSV.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub ce: f64,
    pub cons: f64,
    pub flops: f64,
    pub total: f64,
    pub mean_gate: f64,
    pub skip_pct: f64,
    pub lr: f64,
    pub prog: f64,
}

pub const METRICS_HEADER: [&str; 11] = [
    "epoch",
    "train_acc",
    "test_acc",
    "ce",
    "cons",
    "flops",
    "total",
    "mean_gate",
    "skip_pct",
    "lr",
    "prog",
];

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map_err(|e| Error::io(path, e))
}

fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn export_metrics_csv(metrics: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    w.write_record(METRICS_HEADER)?;
    for m in metrics {
        w.serialize(m)?;
    }
    finish(w, path)
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::Format {
            format: "metrics CSV",
            detail: format!("unexpected header {header:?}"),
        });
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceMode {
    Train,
    Eval,
}

/// Gate telemetry of one block on one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTraceRecord {
    pub epoch: usize,
    pub batch: usize,
    pub block: usize,
    pub mode: TraceMode,
    pub cir: Vec<f64>,
    /// Relaxed gate in training, hard gate in evaluation.
    pub gate: Vec<f64>,
}

#[derive(Serialize)]
struct TraceRow {
    epoch: usize,
    batch: usize,
    block: usize,
    sample: usize,
    cir: f64,
    gate_value: f64,
    mode: TraceMode,
}

/// Writes one CSV row per (record, sample).
pub fn dump_gate_trace(records: &[GateTraceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    w.write_record(["epoch", "batch", "block", "sample", "cir", "gate_value", "mode"])?;
    for r in records {
        for (sample, (&cir, &gate_value)) in r.cir.iter().zip(&r.gate).enumerate() {
            w.serialize(TraceRow {
                epoch: r.epoch,
                batch: r.batch,
                block: r.block,
                sample,
                cir,
                gate_value,
                mode: r.mode,
            })?;
        }
    }
    finish(w, path)
}

/// Plain-text diagnostic of the gate state, written when training hits a
/// non-finite loss.
pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    create(path)?.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_metrics_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        export_metrics_csv(&[], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, format!("{}\n", METRICS_HEADER.join(",")));
        assert!(read_metrics_csv(&p).unwrap().is_empty());
    }

    #[test]
    fn metrics_roundtrip_and_line_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/m.csv");
        let rows: Vec<EpochMetrics> = (0..160)
            .map(|e| EpochMetrics {
                epoch: e,
                train_acc: 50.0 + e as f64 * 0.1,
                mean_gate: 0.715,
                skip_pct: 28.5,
                lr: 0.1 / (e + 1) as f64,
                prog: 1.0 / 3.0,
                ..EpochMetrics::default()
            })
            .collect();
        export_metrics_csv(&rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 161);
        assert!(text.ends_with('\n'));
        let back = read_metrics_csv(&p).unwrap();
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.epoch, b.epoch);
            assert!((a.lr - b.lr).abs() < 1e-6 && (a.prog - b.prog).abs() < 1e-6);
        }
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, b"x").unwrap();
        assert!(export_metrics_csv(&[], file.join("m.csv")).is_err());
        assert!(dump_gate_trace(&[], file.join("t.csv")).is_err());
    }

    #[test]
    fn trace_rows_per_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rec = GateTraceRecord {
            epoch: 1,
            batch: 2,
            block: 3,
            mode: TraceMode::Eval,
            cir: vec![0.5, 1.5],
            gate: vec![1.0, 0.0],
        };
        dump_gate_trace(&[rec], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,batch,block,sample,cir,gate_value,mode");
        assert_eq!(lines[1], "1,2,3,0,0.5,1.0,eval");
        assert_eq!(lines.len(), 3);
    }
}
