//! Source × target condition tables in CSV and markdown.
//!
//! Matrix CSV schema: header `metric,into,from_<c>...`; one row per
//! `(metric, target condition)` with one column per source condition.
//! Metrics are `psnr`, `ssim`, `baseline_psnr` and `baseline_ssim`, where
//! the baseline renders with the source condition's own code.

use std::fmt::Write as _;

use crate::error::{bail_input, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixCell {
    pub source: String,
    pub target: String,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    /// Images averaged into this cell.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyRow {
    pub source: String,
    pub target: String,
    pub tof: f64,
    pub tss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub conditions: Vec<String>,
    pub cells: Vec<MatrixCell>,
    pub consistency: Vec<ConsistencyRow>,
}

pub const MATRIX_METRICS: [&str; 4] = ["psnr", "ssim", "baseline_psnr", "baseline_ssim"];

fn metric(cell: &MatrixCell, name: &str) -> f64 {
    match name {
        "psnr" => cell.psnr,
        "ssim" => cell.ssim,
        "baseline_psnr" => cell.baseline_psnr,
        _ => cell.baseline_ssim,
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::input(format!("csv: {e}"))
}

impl MetricsReport {
    pub fn cell(&self, source: &str, target: &str) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| c.source == source && c.target == target)
    }

    /// Mean of `f` over cells with `source != target`.
    pub fn off_diagonal_mean(&self, f: impl Fn(&MatrixCell) -> f64) -> f64 {
        let off: Vec<f64> = self.cells.iter().filter(|c| c.source != c.target).map(f).collect();
        off.iter().sum::<f64>() / off.len().max(1) as f64
    }

    pub fn matrix_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["metric".to_string(), "into".to_string()];
        header.extend(self.conditions.iter().map(|c| format!("from_{c}")));
        w.write_record(&header).map_err(csv_err)?;
        for m in MATRIX_METRICS {
            for target in &self.conditions {
                let mut row = vec![m.to_string(), target.clone()];
                for source in &self.conditions {
                    let Some(cell) = self.cell(source, target) else {
                        bail_input!("report has no cell {source} -> {target}");
                    };
                    row.push(format!("{:.6}", metric(cell, m)));
                }
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::input(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Parses [`MetricsReport::matrix_csv`] output back into cells.
    pub fn from_matrix_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        if header.len() < 3 || &header[0] != "metric" || &header[1] != "into" {
            bail_input!("matrix header must start with metric,into");
        }
        let mut conditions = Vec::new();
        for h in header.iter().skip(2) {
            let Some(c) = h.strip_prefix("from_") else {
                bail_input!("matrix column {h:?} lacks the from_ prefix");
            };
            conditions.push(c.to_string());
        }
        let mut cells: Vec<MatrixCell> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let (m, target) = (&rec[0], rec[1].to_string());
            if !MATRIX_METRICS.contains(&m) {
                bail_input!("unknown metric {m:?}");
            }
            for (i, source) in conditions.iter().enumerate() {
                let v: f64 = rec[i + 2].parse().map_err(|_| Error::input(format!("bad number {:?}", &rec[i + 2])))?;
                let idx = match cells.iter().position(|c| c.source == *source && c.target == target) {
                    Some(i) => i,
                    None => {
                        cells.push(MatrixCell {
                            source: source.clone(),
                            target: target.clone(),
                            psnr: 0.0,
                            ssim: 0.0,
                            baseline_psnr: 0.0,
                            baseline_ssim: 0.0,
                            count: 0,
                        });
                        cells.len() - 1
                    }
                };
                let c = &mut cells[idx];
                match m {
                    "psnr" => c.psnr = v,
                    "ssim" => c.ssim = v,
                    "baseline_psnr" => c.baseline_psnr = v,
                    _ => c.baseline_ssim = v,
                }
            }
        }
        Ok(Self {
            conditions,
            cells,
            consistency: Vec::new(),
        })
    }

    /// Header `source,target,tof,tss`.
    pub fn consistency_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["source", "target", "tof", "tss"]).map_err(csv_err)?;
        for r in &self.consistency {
            w.write_record([r.source.clone(), r.target.clone(), format!("{:.6}", r.tof), format!("{:.6}", r.tss)])
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::input(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// PSNR/SSIM matrix (rows: target, columns: source) and consistency table.
    pub fn markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| into \\ from | {} |", self.conditions.join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(self.conditions.len()));
        for target in &self.conditions {
            let cells: Vec<String> = self
                .conditions
                .iter()
                .map(|source| match self.cell(source, target) {
                    Some(c) => format!("{:.2} / {:.3}", c.psnr, c.ssim),
                    None => "-".into(),
                })
                .collect();
            let _ = writeln!(s, "| {target} | {} |", cells.join(" | "));
        }
        if !self.consistency.is_empty() {
            let _ = writeln!(s, "\n| source | target | tOF | tSS (SSIM proxy) |\n|---|---|---|---|");
            for r in &self.consistency {
                let _ = writeln!(s, "| {} | {} | {:.4} | {:.4} |", r.source, r.target, r.tof, r.tss);
            }
        }
        s
    }
}
