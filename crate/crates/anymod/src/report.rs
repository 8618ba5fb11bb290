//! Metrics reports and plot data.
//!
//! A report is a CSV with one row per task, sweep point and seed, plus a
//! JSON summary holding mean and sample std over seeds. Plot data is
//! derived from report CSVs only, so it can be regenerated at any time.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anymod_core::eval::Metrics;
use anymod_core::finetune::Task;
use anymod_core::metrics::mean_std;
use anymod_core::modality::DESIGNATED_COMBINATIONS;
use anymod_core::{Error, ModalitySet, Result};
use serde::{Deserialize, Serialize};

use crate::bav::io_error;

pub const REPORT_SCHEMA: u32 = 1;
pub const METRIC_NAMES: [&str; 6] = ["acc", "auc", "f1", "mae", "rmse", "pcc"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// Plain evaluation of one split with every observed modality.
    Evaluate,
    /// Same subjects under each designated combination.
    Robustness,
    /// Finetuning on nested fractions of the training labels.
    LabelEfficiency,
}

/// One CSV row. Metric columns that do not apply to the task are empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub task: Task,
    pub sweep: Sweep,
    /// Combination label, fraction, or split name.
    pub point: String,
    pub seed: u64,
    pub n: usize,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub pcc: Option<f64>,
}

impl ReportRow {
    pub fn new(task: Task, sweep: Sweep, point: impl Into<String>, seed: u64, n: usize, metrics: &Metrics) -> ReportRow {
        let mut row = ReportRow { task, sweep, point: point.into(), seed, n, acc: None, auc: None, f1: None, mae: None, rmse: None, pcc: None };
        match metrics {
            Metrics::Classification(c) => {
                row.acc = Some(c.acc);
                row.auc = Some(c.auc);
                row.f1 = Some(c.f1);
            }
            Metrics::Regression(r) => {
                row.mae = Some(r.mae);
                row.rmse = Some(r.rmse);
                row.pcc = Some(r.pcc);
            }
        }
        row
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "acc" => self.acc,
            "auc" => self.auc,
            "f1" => self.f1,
            "mae" => self.mae,
            "rmse" => self.rmse,
            "pcc" => self.pcc,
            _ => None,
        }
    }
}

pub fn fraction_point(f: f64) -> String {
    format!("{f}")
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        w.write_record(["task", "sweep", "point", "seed", "n", "acc", "auc", "f1", "mae", "rmse", "pcc"])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let expected = ["task", "sweep", "point", "seed", "n", "acc", "auc", "f1", "mae", "rmse", "pcc"];
    let headers = r.headers().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if headers.iter().ne(expected) {
        return Err(Error::Data(format!("{}: report columns {:?} do not match the schema", path.display(), headers)));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub task: Task,
    pub sweep: Sweep,
    pub point: String,
    pub n_seeds: usize,
    pub metrics: BTreeMap<String, MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub schema_version: u32,
    /// Positive class used for ACC/F1/AUC.
    pub positive_class: String,
    pub decision_threshold: f64,
    pub entries: Vec<SummaryEntry>,
    /// Robustness averages: simple mean of the per-combination means.
    pub averages: Vec<SummaryEntry>,
}

fn point_rank(sweep: Sweep, point: &str) -> (usize, u64) {
    match sweep {
        Sweep::Robustness => {
            let idx = ModalitySet::parse(point)
                .ok()
                .and_then(|s| DESIGNATED_COMBINATIONS.iter().position(|c| *c == s))
                .unwrap_or(DESIGNATED_COMBINATIONS.len());
            (idx, 0)
        }
        Sweep::LabelEfficiency => (0, point.parse::<f64>().map(|f| (f * 1e9) as u64).unwrap_or(u64::MAX)),
        Sweep::Evaluate => (0, 0),
    }
}

/// Groups rows by (task, sweep, point) in canonical order: combinations in
/// escalation order, fractions ascending.
fn grouped(rows: &[ReportRow]) -> Vec<((Task, Sweep, String), Vec<&ReportRow>)> {
    let mut groups: BTreeMap<(Task, Sweep, (usize, u64), String), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.task, r.sweep, point_rank(r.sweep, &r.point), r.point.clone())).or_default().push(r);
    }
    groups.into_iter().map(|((t, s, _, p), v)| ((t, s, p), v)).collect()
}

fn summarize(values: &[f64]) -> MeanStd {
    let (mean, std) = mean_std(values);
    MeanStd { mean, std }
}

pub fn summarize_report(rows: &[ReportRow]) -> ReportSummary {
    let mut entries = Vec::new();
    for ((task, sweep, point), group) in grouped(rows) {
        let mut metrics = BTreeMap::new();
        for name in METRIC_NAMES {
            let vals: Vec<f64> = group.iter().filter_map(|r| r.metric(name)).collect();
            if !vals.is_empty() {
                metrics.insert(name.to_string(), summarize(&vals));
            }
        }
        entries.push(SummaryEntry { task, sweep, point, n_seeds: group.len(), metrics });
    }
    let mut averages = Vec::new();
    let mut by_task: BTreeMap<Task, Vec<&SummaryEntry>> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.sweep == Sweep::Robustness) {
        by_task.entry(e.task).or_default().push(e);
    }
    for (task, es) in by_task {
        let mut metrics = BTreeMap::new();
        for name in METRIC_NAMES {
            let vals: Vec<f64> = es.iter().filter_map(|e| e.metrics.get(name).map(|m| m.mean)).collect();
            if !vals.is_empty() {
                metrics.insert(name.to_string(), summarize(&vals));
            }
        }
        averages.push(SummaryEntry { task, sweep: Sweep::Robustness, point: "average".into(), n_seeds: es.iter().map(|e| e.n_seeds).min().unwrap_or(0), metrics });
    }
    ReportSummary {
        schema_version: REPORT_SCHEMA,
        positive_class: "more impaired (AD for CN_vs_AD, MCI for CN_vs_MCI)".into(),
        decision_threshold: anymod_core::metrics::DECISION_THRESHOLD,
        entries,
        averages,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

/// Writes `<stem>.csv` and `<stem>.json` under `dir`.
pub fn write_report(dir: &Path, stem: &str, rows: &[ReportRow]) -> Result<()> {
    write_report_csv(&dir.join(format!("{stem}.csv")), rows)?;
    write_json(&dir.join(format!("{stem}.json")), &summarize_report(rows))
}

/// One line-chart point: x is a combination label or a training fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub task: Task,
    pub sweep: Sweep,
    pub metric: String,
    pub x_index: usize,
    pub x: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub task: Task,
    pub sweep: Sweep,
    pub metric: String,
    pub x: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub schema_version: u32,
    pub series: Vec<PlotSeries>,
}

/// Plot points for the sweep rows of a report; plain evaluations are not
/// plotted.
pub fn plot_points(rows: &[ReportRow]) -> Vec<PlotPoint> {
    let summary = summarize_report(rows);
    let mut counters: BTreeMap<(Task, Sweep, String), usize> = BTreeMap::new();
    let mut out = Vec::new();
    for e in summary.entries.iter().filter(|e| e.sweep != Sweep::Evaluate) {
        for (metric, ms) in &e.metrics {
            let k = counters.entry((e.task, e.sweep, metric.clone())).or_insert(0);
            out.push(PlotPoint { task: e.task, sweep: e.sweep, metric: metric.clone(), x_index: *k, x: e.point.clone(), mean: ms.mean, std: ms.std, n_seeds: e.n_seeds });
            *k += 1;
        }
    }
    out.sort_by(|a, b| (a.task, a.sweep, &a.metric, a.x_index).cmp(&(b.task, b.sweep, &b.metric, b.x_index)));
    out
}

pub fn plot_data(points: &[PlotPoint]) -> PlotData {
    let mut series: Vec<PlotSeries> = Vec::new();
    for p in points {
        match series.last_mut() {
            Some(s) if s.task == p.task && s.sweep == p.sweep && s.metric == p.metric => {
                s.x.push(p.x.clone());
                s.mean.push(p.mean);
                s.std.push(p.std);
            }
            _ => series.push(PlotSeries { task: p.task, sweep: p.sweep, metric: p.metric.clone(), x: vec![p.x.clone()], mean: vec![p.mean], std: vec![p.std] }),
        }
    }
    PlotData { schema_version: REPORT_SCHEMA, series }
}

pub const PLOT_COLUMNS: [&str; 8] = ["task", "sweep", "metric", "x_index", "x", "mean", "std", "n_seeds"];

pub fn write_plot_csv(path: &Path, points: &[PlotPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if points.is_empty() {
        w.write_record(PLOT_COLUMNS).map_err(|e| Error::Data(e.to_string()))?;
    }
    for p in points {
        w.serialize(p).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn read_plot_csv(path: &Path) -> Result<Vec<PlotPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = r.headers().map_err(|e| Error::Data(e.to_string()))?;
    if headers.iter().ne(PLOT_COLUMNS) {
        return Err(Error::Data(format!("{}: plot columns do not match the schema", path.display())));
    }
    r.deserialize().map(|p| p.map_err(|e| Error::Data(format!("{}: {e}", path.display())))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use anymod_core::metrics::ClassificationMetrics;

    fn cls(auc: f64) -> Metrics {
        Metrics::Classification(ClassificationMetrics { acc: 0.5, auc, f1: 0.5 })
    }

    #[test]
    fn combinations_sort_in_escalation_order() {
        let mut rows = Vec::new();
        for seed in 0..2 {
            for c in DESIGNATED_COMBINATIONS.iter().rev() {
                rows.push(ReportRow::new(Task::CnVsAd, Sweep::Robustness, c.label(), seed, 10, &cls(0.5 + c.len() as f64 / 10.0)));
            }
        }
        let pts: Vec<_> = plot_points(&rows).into_iter().filter(|p| p.metric == "auc").collect();
        let xs: Vec<_> = pts.iter().map(|p| p.x.clone()).collect();
        let want: Vec<_> = DESIGNATED_COMBINATIONS.iter().map(|c| c.label()).collect();
        assert_eq!(xs, want);
        let s = summarize_report(&rows);
        assert_eq!(s.averages.len(), 1);
        assert_eq!(s.entries[0].n_seeds, 2);
    }

    #[test]
    fn fractions_sort_numerically() {
        let rows: Vec<_> = [1.0, 0.1, 0.5, 0.2]
            .iter()
            .map(|&f| ReportRow::new(Task::CnVsAd, Sweep::LabelEfficiency, fraction_point(f), 0, 5, &cls(f)))
            .collect();
        let xs: Vec<_> = plot_points(&rows).into_iter().filter(|p| p.metric == "auc").map(|p| p.x).collect();
        assert_eq!(xs, ["0.1", "0.2", "0.5", "1"]);
    }
}
