//! Rendering evaluation reports as JSON, CSV and Markdown.
//!
//! The summary table has one row per report: for each aspect the columns
//! S, ACC, P, R, F1 (in that order), then the average F1. Values are
//! percentages with one decimal; a missing value is an empty CSV cell or
//! `-` in Markdown.

use std::fmt::Write as _;

use mare_core::eval::RationaleReport;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const METRICS: [&str; 5] = ["S", "ACC", "P", "R", "F1"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectRow {
    pub name: String,
    /// `[S, ACC, P, R, F1]` in percent.
    pub values: [Option<f64>; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub aspects: Vec<AspectRow>,
    pub avg_f1: Option<f64>,
}

/// The machine-readable report: the summary table plus the full metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub table: SummaryTable,
    pub report: RationaleReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            other => Err(format!("unknown report format `{other}` (expected json, csv or md)")),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
            Format::Markdown => "md",
        }
    }
}

fn percent(x: f64) -> f64 {
    (x * 1000.0).round() / 10.0
}

impl SummaryTable {
    pub fn from_report(report: &RationaleReport, names: &[String]) -> Self {
        let aspects = report
            .aspects
            .iter()
            .map(|a| AspectRow {
                name: names.get(a.aspect).cloned().unwrap_or_else(|| format!("aspect{}", a.aspect)),
                values: [
                    Some(a.sparsity),
                    a.accuracy,
                    a.prf.map(|p| p.precision),
                    a.prf.map(|p| p.recall),
                    a.prf.map(|p| p.f1),
                ]
                .map(|v| v.map(percent)),
            })
            .collect();
        Self {
            aspects,
            avg_f1: report.avg_f1().map(percent),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = self
            .aspects
            .iter()
            .flat_map(|a| METRICS.iter().map(move |m| format!("{} {m}", a.name)))
            .collect();
        h.push("Avg F1".into());
        h
    }

    fn cells(&self) -> Vec<Option<f64>> {
        let mut c: Vec<Option<f64>> = self.aspects.iter().flat_map(|a| a.values).collect();
        c.push(self.avg_f1);
        c
    }

    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| CliError::Runtime(e.to_string());
        w.write_record(self.header()).map_err(fail)?;
        w.write_record(self.cells().iter().map(|c| c.map(|v| format!("{v:.1}")).unwrap_or_default()))
            .map_err(fail)?;
        let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| CliError::Runtime(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self, CliError> {
        let bad = |m: String| CliError::Invalid(format!("summary csv: {m}"));
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        let row = r
            .records()
            .next()
            .ok_or_else(|| bad("missing value row".into()))?
            .map_err(|e| bad(e.to_string()))?;
        let n = header.len();
        if n == 0 || (n - 1) % METRICS.len() != 0 || &header[n - 1] != "Avg F1" || row.len() != n {
            return Err(bad(format!("unexpected layout with {n} columns")));
        }
        let parse = |s: &str| -> Result<Option<f64>, CliError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(format!("`{s}` is not a number")))
            }
        };
        let mut aspects = Vec::new();
        for a in 0..(n - 1) / METRICS.len() {
            let first = &header[a * METRICS.len()];
            let name = first
                .strip_suffix(" S")
                .ok_or_else(|| bad(format!("column `{first}` should end in ` S`")))?;
            let mut values = [None; 5];
            for (m, v) in values.iter_mut().enumerate() {
                let col = a * METRICS.len() + m;
                if header[col] != format!("{name} {}", METRICS[m]) {
                    return Err(bad(format!("column `{}` out of order", &header[col])));
                }
                *v = parse(&row[col])?;
            }
            aspects.push(AspectRow {
                name: name.to_string(),
                values,
            });
        }
        Ok(Self {
            aspects,
            avg_f1: parse(&row[n - 1])?,
        })
    }

    pub fn to_markdown(&self) -> String {
        let header = self.header();
        let mut out = String::new();
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(out, "|{}", "---:|".repeat(header.len()));
        let cells: Vec<String> = self
            .cells()
            .iter()
            .map(|c| c.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into()))
            .collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        out
    }
}

impl ReportDocument {
    pub fn new(report: RationaleReport, names: &[String]) -> Self {
        Self {
            table: SummaryTable::from_report(&report, names),
            report,
        }
    }

    pub fn render(&self, format: Format) -> Result<String, CliError> {
        match format {
            Format::Json => serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string())),
            Format::Csv => self.table.to_csv(),
            Format::Markdown => Ok(self.table.to_markdown()),
        }
    }
}
