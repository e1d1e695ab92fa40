//! Round reports and their on-disk forms.
//!
//! The metrics stream is JSON lines with fields `round`, `e_t`, `nat_acc`,
//! `adv_acc`, `mean_loss` and one `svcca_l{i}` per probed layer. Accuracies
//! that were not measured are `null`. The summary CSV has the same columns
//! with empty cells in place of `null`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::checkpoint::atomic_write;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub e_t: u32,
    pub nat_acc: Option<f64>,
    pub adv_acc: Option<f64>,
    /// Mean over clients of each client's mean minibatch training loss.
    pub mean_loss: f64,
    pub client_losses: Vec<f64>,
    /// `(layer, mean score over client pairs)` when drift was measured.
    pub svcca: Vec<(usize, f64)>,
    /// Not part of the metrics stream, which must be reproducible.
    pub wall_time: Duration,
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u64,
    pub e_t: u32,
    pub nat_acc: Option<f64>,
    pub adv_acc: Option<f64>,
    pub mean_loss: f64,
    #[serde(flatten)]
    pub svcca: BTreeMap<String, f64>,
}

impl From<&RoundReport> for MetricsRecord {
    fn from(r: &RoundReport) -> Self {
        Self {
            round: r.round,
            e_t: r.e_t,
            nat_acc: r.nat_acc,
            adv_acc: r.adv_acc,
            mean_loss: r.mean_loss,
            svcca: r
                .svcca
                .iter()
                .map(|&(l, s)| (format!("svcca_l{l}"), s))
                .collect(),
        }
    }
}

pub trait MetricsSink {
    fn record(&mut self, report: &RoundReport) -> Result<()>;
}

impl MetricsSink for Vec<RoundReport> {
    fn record(&mut self, report: &RoundReport) -> Result<()> {
        self.push(report.clone());
        Ok(())
    }
}

/// Discards reports.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &RoundReport) -> Result<()> {
        Ok(())
    }
}

/// Streams JSON lines into `<path>.partial`, flushing after every round, and
/// renames it to `path` on [`JsonlSink::finish`]. An aborted run leaves the
/// partial file behind.
pub struct JsonlSink {
    path: PathBuf,
    partial: PathBuf,
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let partial = PathBuf::from(format!("{}.partial", path.display()));
        let file = File::create(&partial).map_err(|e| Error::io(&partial, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            partial,
            out: BufWriter::new(file),
        })
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.partial, e))?;
        self.out
            .get_ref()
            .sync_all()
            .map_err(|e| Error::io(&self.partial, e))?;
        std::fs::rename(&self.partial, &self.path).map_err(|e| Error::io(&self.path, e))
    }
}

impl MetricsSink for JsonlSink {
    fn record(&mut self, report: &RoundReport) -> Result<()> {
        serde_json::to_writer(&mut self.out, &MetricsRecord::from(report))?;
        self.out
            .write_all(b"\n")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.partial, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Summary table with one row per round.
pub fn summary_csv(records: &[MetricsRecord]) -> String {
    let mut layers: Vec<&String> = records.iter().flat_map(|r| r.svcca.keys()).collect();
    layers.sort_by_key(|k| {
        k.trim_start_matches("svcca_l")
            .parse::<usize>()
            .unwrap_or(usize::MAX)
    });
    layers.dedup();
    let mut out = String::from("round,e_t,nat_acc,adv_acc,mean_loss");
    for l in &layers {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.round,
            r.e_t,
            cell(r.nat_acc),
            cell(r.adv_acc),
            r.mean_loss
        ));
        for l in &layers {
            out.push(',');
            out.push_str(&cell(r.svcca.get(*l).copied()));
        }
        out.push('\n');
    }
    out
}

pub fn write_summary_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    atomic_write(path, summary_csv(records).as_bytes())
}
