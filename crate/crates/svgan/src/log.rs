//! CSV files: the per-step training log and per-patient metrics.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svgan_core::losses::LossBreakdown;
use svgan_core::metrics::MetricsReport;
use svgan_core::trainer::{StepRecord, TrainObserver, TrainState};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

pub const LOSS_TERMS: [&str; 5] = ["adv_d", "adv_g", "seg_ce", "cls_l1", "total"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRow {
    pub step: usize,
    pub adv_d: f64,
    pub adv_g: f64,
    pub seg_ce: f64,
    pub cls_l1: f64,
    pub total: f64,
}

impl LogRow {
    pub fn from_record(r: &StepRecord) -> Self {
        let l = r.losses;
        Self {
            step: r.step,
            adv_d: l.adv_d,
            adv_g: l.adv_g,
            seg_ce: l.seg_ce,
            cls_l1: l.cls_l1,
            total: l.total,
        }
    }

    pub fn losses(&self) -> LossBreakdown {
        LossBreakdown {
            adv_d: self.adv_d,
            adv_g: self.adv_g,
            seg_ce: self.seg_ce,
            cls_l1: self.cls_l1,
            total: self.total,
        }
    }

    pub fn term(&self, name: &str) -> f64 {
        match name {
            "adv_d" => self.adv_d,
            "adv_g" => self.adv_g,
            "seg_ce" => self.seg_ce,
            "cls_l1" => self.cls_l1,
            _ => self.total,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Csv {
        path: path.into(),
        line,
        detail: e.to_string(),
    }
}

/// Streams log rows to a CSV as training proceeds.
pub struct LogWriter {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.into(),
            inner: csv::Writer::from_writer(BufWriter::new(f)),
        })
    }

    pub fn write(&mut self, row: &LogRow) -> Result<()> {
        self.inner.serialize(row).map_err(|e| csv_err(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl<T> TrainObserver<T> for LogWriter {
    fn on_step(&mut self, r: &StepRecord) -> svgan_core::Result<()> {
        self.write(&LogRow::from_record(r))
            .map_err(|e| svgan_core::Error::Observer(format!("log write failed: {e}")))
    }

    fn on_finish(&mut self, _: &TrainState<T>) -> svgan_core::Result<()> {
        self.flush()
            .map_err(|e| svgan_core::Error::Observer(format!("log flush failed: {e}")))
    }
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Parses a training log; rejects empty logs and non-finite values.
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{:?}", other)),
    })?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["step", "adv_d", "adv_g", "seg_ce", "cls_l1", "total"] {
        return Err(Error::Csv {
            path: path.into(),
            line: 1,
            detail: format!("unexpected header {:?}", headers),
        });
    }
    let mut rows = Vec::new();
    for rec in r.deserialize::<LogRow>() {
        let row = rec.map_err(|e| csv_err(path, e))?;
        if !row.losses().all_finite() {
            return Err(Error::Csv {
                path: path.into(),
                line: rows.len() as u64 + 2,
                detail: "non-finite loss".into(),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Csv {
            path: path.into(),
            line: 1,
            detail: "log has no rows".into(),
        });
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// One row per patient per region.
pub fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let head = [
        "patient",
        "region",
        "dice",
        "hausdorff",
        "sensitivity",
        "disease_true",
        "disease_pred",
    ];
    w.write_record(head).map_err(|e| csv_err(path, e))?;
    for p in &report.patients {
        for r in &p.regions {
            w.write_record([
                p.id.clone(),
                r.region.clone(),
                r.dice.to_string(),
                opt(r.hausdorff),
                opt(r.sensitivity),
                p.disease_true.to_string(),
                p.disease_pred.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Report without the per-patient breakdown, for the JSON summary.
#[derive(Serialize)]
pub struct MetricsSummary<'a> {
    pub accuracy: f64,
    pub mean_foreground_dice: f64,
    pub patients: usize,
    pub regions: &'a [svgan_core::metrics::RegionSummary],
}

impl<'a> MetricsSummary<'a> {
    pub fn of(r: &'a MetricsReport) -> Self {
        Self {
            accuracy: r.accuracy,
            mean_foreground_dice: r.mean_foreground_dice,
            patients: r.patients.len(),
            regions: &r.regions,
        }
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

pub fn flush_stdout() {
    let _ = std::io::stdout().flush();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Vec<LogRow> {
        (0..n)
            .map(|i| LogRow {
                step: i + 1,
                adv_d: 1.0 / (i + 1) as f64,
                adv_g: 0.1 * i as f64,
                seg_ce: 0.3,
                cls_l1: 1.0 / 3.0,
                total: 2.0,
            })
            .collect()
    }

    #[test]
    fn log_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        write_log(&p, &rows(7)).unwrap();
        assert_eq!(read_log(&p).unwrap(), rows(7));
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,adv_d,adv_g,seg_ce,cls_l1,total\n"));
    }

    #[test]
    fn malformed_log_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        std::fs::write(
            &p,
            "step,adv_d,adv_g,seg_ce,cls_l1,total\n1,0.5,0.5,0.5,0.5,2\n2,0.5,oops,0.5,0.5,2\n",
        )
        .unwrap();
        let e = read_log(&p).unwrap_err();
        assert!(matches!(e, Error::Csv { line: 3, .. }), "{e}");
        std::fs::write(&p, "step,adv_d,adv_g,seg_ce,cls_l1,total\n").unwrap();
        assert!(read_log(&p).is_err());
    }

    #[test]
    fn streaming_writer_matches_batch_writer() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        let mut w = LogWriter::create(&a).unwrap();
        for r in rows(4) {
            w.write(&r).unwrap();
        }
        w.flush().unwrap();
        drop(w);
        write_log(&b, &rows(4)).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
