use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::harness::eval::Report;

/// A metrics report as read from disk. Fields may be missing.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedReport {
    pub name: String,
    pub metrics: IndexMap<String, f64>,
}

impl NamedReport {
    pub fn from_report(name: &str, r: &Report) -> Self {
        let v = serde_json::to_value(r).expect("plain struct");
        Self::from_json(name, &v).expect("report fields are numbers")
    }

    pub fn from_json(name: &str, v: &serde_json::Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Format(format!("report {name} is not a JSON object")))?;
        let mut metrics = IndexMap::new();
        for (k, val) in obj {
            if !Report::METRICS.contains(&k.as_str()) {
                return Err(Error::MetricMismatch(format!("unknown metric {k} in report {name}")));
            }
            let x = val
                .as_f64()
                .ok_or_else(|| Error::Format(format!("metric {k} in report {name} is not a number")))?;
            metrics.insert(k.clone(), x);
        }
        Ok(NamedReport {
            name: name.to_string(),
            metrics,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        Self::from_json(&name, &v)
    }
}

fn higher_is_better(metric: &str) -> bool {
    metric == "lid_acc"
}

/// Relative improvement of `new` over `old` in percent. Positive means better.
pub fn relative_improvement(metric: &str, old: f64, new: f64) -> Option<f64> {
    if old == new {
        return Some(0.0);
    }
    if old == 0.0 {
        return None;
    }
    let gain = if higher_is_better(metric) { new - old } else { old - new };
    Some(100.0 * gain / old)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendRow {
    pub name: String,
    pub values: Vec<Option<f64>>,
    pub improvement: Vec<Option<f64>>,
}

/// Every report relative to the first one.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendTable {
    pub baseline: String,
    pub metrics: Vec<String>,
    pub baseline_values: Vec<Option<f64>>,
    pub rows: Vec<TrendRow>,
}

pub fn compare(reports: &[NamedReport]) -> Result<TrendTable> {
    if reports.len() < 2 {
        return Err(Error::Config(format!("compare needs at least two reports, got {}", reports.len())));
    }
    let metrics: Vec<String> = Report::METRICS.iter().map(|s| s.to_string()).collect();
    let base = &reports[0];
    let baseline_values: Vec<Option<f64>> = metrics.iter().map(|m| base.metrics.get(m).copied()).collect();
    let rows = reports[1..]
        .iter()
        .map(|r| {
            let values: Vec<Option<f64>> = metrics.iter().map(|m| r.metrics.get(m).copied()).collect();
            let improvement = metrics
                .iter()
                .zip(baseline_values.iter().zip(&values))
                .map(|(m, (o, n))| match (o, n) {
                    (Some(o), Some(n)) => relative_improvement(m, *o, *n),
                    _ => None,
                })
                .collect();
            TrendRow {
                name: r.name.clone(),
                values,
                improvement,
            }
        })
        .collect();
    Ok(TrendTable {
        baseline: base.name.clone(),
        metrics,
        baseline_values,
        rows,
    })
}

const GAP: &str = "n/a";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| GAP.to_string(), |x| format!("{x:.4}"))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| GAP.to_string(), |x| format!("{x:.1}%"))
}

impl TrendTable {
    /// Plain-text table: values per metric and relative improvement over
    /// the baseline in parentheses.
    pub fn render(&self) -> String {
        let mut header = vec!["report".to_string()];
        header.extend(self.metrics.iter().cloned());
        let mut lines = vec![header];
        let mut base = vec![format!("{} (baseline)", self.baseline)];
        base.extend(self.baseline_values.iter().map(|&v| cell(v)));
        lines.push(base);
        for r in &self.rows {
            let mut line = vec![r.name.clone()];
            line.extend(r.values.iter().zip(&r.improvement).map(|(&v, &d)| format!("{} ({})", cell(v), pct(d))));
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let row: Vec<String> = l.iter().zip(&widths).map(|(s, &w)| format!("{s:<w$}")).collect();
            let _ = writeln!(out, "{}", row.join("  ").trim_end());
        }
        out
    }

    /// One CSV line per (report, metric) with the relative improvement.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("report,metric,baseline,value,relative_improvement_pct\n");
        for r in &self.rows {
            for (i, m) in self.metrics.iter().enumerate() {
                let f = |v: Option<f64>| v.map_or_else(|| GAP.to_string(), |x| format!("{x}"));
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.name,
                    m,
                    f(self.baseline_values[i]),
                    f(r.values[i]),
                    f(r.improvement[i])
                );
            }
        }
        out
    }
}
