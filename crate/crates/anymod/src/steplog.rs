//! Pretraining step log (CSV, one row per optimizer step).
//!
//! Columns: `step, epoch, l_mae, l_rcmd, lambda, mu, tau, lr, grad_norm`.
//! Absent values are empty cells; `l_rcmd` is dropped entirely when the
//! run has cross-modal distillation disabled. Floats are written in their
//! shortest round-trip form, so equal logs mean bitwise-equal values.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anymod_core::train::StepLog;
use anymod_core::{Error, Result};

use crate::bav::io_error;

pub fn columns(rcmd: bool) -> Vec<&'static str> {
    let mut c = vec!["step", "epoch", "l_mae"];
    if rcmd {
        c.push("l_rcmd");
    }
    c.extend(["lambda", "mu", "tau", "lr", "grad_norm"]);
    c
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn format_row(l: &StepLog, rcmd: bool) -> String {
    let mut cells = vec![l.step.to_string(), l.epoch.to_string(), opt(l.l_mae)];
    if rcmd {
        cells.push(opt(l.l_rcmd));
    }
    cells.extend([l.lambda.to_string(), l.mu.to_string(), opt(l.tau), l.lr.to_string(), l.grad_norm.to_string()]);
    cells.join(",")
}

pub struct StepLogWriter {
    out: BufWriter<File>,
    rcmd: bool,
    path: std::path::PathBuf,
}

impl StepLogWriter {
    pub fn create(path: &Path, rcmd: bool) -> Result<StepLogWriter> {
        let f = File::create(path).map_err(|e| io_error(path, e))?;
        let mut w = StepLogWriter { out: BufWriter::new(f), rcmd, path: path.to_path_buf() };
        w.line(&columns(rcmd).join(","))?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| io_error(&self.path, e))
    }

    pub fn append(&mut self, l: &StepLog) -> Result<()> {
        let row = format_row(l, self.rcmd);
        self.line(&row)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| io_error(&self.path, e))
    }
}

/// Parsed log: header and raw rows keyed by step.
pub fn read_log(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| Error::Data(e.to_string()))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(String::from).collect());
    }
    Ok((header, rows))
}
