//! Method-by-metric comparison tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use empathic_core::metrics::MetricReport;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Pipe table; best cells wrapped in `**`.
    Markdown,
    /// Space-aligned columns; best cells wrapped in `*`.
    Text,
}

impl FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(Layout::Markdown),
            "text" | "plain" => Ok(Layout::Text),
            other => Err(Error::Config(format!("unknown report layout {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub values: Vec<(String, f64)>,
}

impl ReportRow {
    pub fn from_reports(method: &str, reports: &[MetricReport]) -> Self {
        Self {
            method: method.to_string(),
            values: reports.iter().map(|r| (r.metric_id.clone(), r.corpus_value)).collect(),
        }
    }
}

/// Metric ids where smaller is better.
pub fn lower_is_better(metric_id: &str) -> bool {
    metric_id.starts_with("ppl")
}

/// Warnings for metrics whose per-sample ids differ between methods.
pub fn universe_warnings(runs: &[(String, Vec<MetricReport>)]) -> Vec<String> {
    let mut out = Vec::new();
    let Some((first_method, first)) = runs.first() else {
        return out;
    };
    for r in first {
        let ids: BTreeSet<&str> = r.per_sample.iter().map(|s| s.sample_id.as_str()).collect();
        for (m, reports) in &runs[1..] {
            if let Some(other) = reports.iter().find(|o| o.metric_id == r.metric_id) {
                let oids: BTreeSet<&str> = other.per_sample.iter().map(|s| s.sample_id.as_str()).collect();
                if oids != ids {
                    out.push(format!(
                        "{}: {first_method} and {m} were scored on different samples",
                        r.metric_id
                    ));
                }
            }
        }
    }
    out
}

const DECIMALS: usize = 2;

/// Renders methods as rows and metrics as columns, bolding the best value
/// in each column. Values equal at the displayed precision tie; every tied
/// cell is bolded and a footnote names the column.
pub fn render_report(rows: &[ReportRow], layout: Layout) -> String {
    let mut columns: Vec<&str> = Vec::new();
    for r in rows {
        for (id, _) in &r.values {
            if !columns.contains(&id.as_str()) {
                columns.push(id);
            }
        }
    }
    let cell = |r: &ReportRow, col: &str| r.values.iter().find(|(id, _)| id == col).map(|(_, v)| *v);
    let shown = |v: f64| format!("{v:.DECIMALS$}");

    let mut best: Vec<Option<String>> = Vec::with_capacity(columns.len());
    let mut tied = Vec::new();
    for col in &columns {
        let vals: Vec<f64> = rows.iter().filter_map(|r| cell(r, col)).filter(|v| v.is_finite()).collect();
        let pick = if lower_is_better(col) {
            vals.iter().copied().fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.min(v))))
        } else {
            vals.iter().copied().fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))))
        };
        let b = pick.map(shown);
        if let Some(b) = &b {
            if vals.iter().filter(|v| &shown(**v) == b).count() > 1 {
                tied.push(*col);
            }
        }
        best.push(b);
    }

    let (open, close) = match layout {
        Layout::Markdown => ("**", "**"),
        Layout::Text => ("*", "*"),
    };
    let mut grid: Vec<Vec<String>> = Vec::with_capacity(rows.len() + 1);
    let mut header = vec!["method".to_string()];
    header.extend(columns.iter().map(|c| {
        if tied.contains(c) {
            format!("{c}\u{2020}")
        } else {
            c.to_string()
        }
    }));
    grid.push(header);
    for r in rows {
        let mut line = vec![r.method.clone()];
        for (i, col) in columns.iter().enumerate() {
            line.push(match cell(r, col) {
                None => "-".into(),
                Some(v) => {
                    let s = shown(v);
                    if best[i].as_deref() == Some(s.as_str()) {
                        format!("{open}{s}{close}")
                    } else {
                        s
                    }
                }
            });
        }
        grid.push(line);
    }

    let widths: Vec<usize> = (0..=columns.len())
        .map(|c| grid.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (li, line) in grid.iter().enumerate() {
        let cells: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        match layout {
            Layout::Markdown => {
                let _ = writeln!(out, "| {} |", cells.join(" | "));
                if li == 0 {
                    let rule: Vec<String> = widths
                        .iter()
                        .enumerate()
                        .map(|(c, w)| if c == 0 { "-".repeat(*w) } else { format!("{}:", "-".repeat(w - 1)) })
                        .collect();
                    let _ = writeln!(out, "| {} |", rule.join(" | "));
                }
            }
            Layout::Text => {
                let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            }
        }
    }
    if !tied.is_empty() {
        let _ = writeln!(
            out,
            "\n\u{2020} tie for best in {}: equal at {DECIMALS} decimals, all tied cells marked.",
            tied.join(", ")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(m: &str, vals: &[(&str, f64)]) -> ReportRow {
        ReportRow {
            method: m.into(),
            values: vals.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn one_bold_per_column() {
        let t = render_report(
            &[
                row("a", &[("f1", 10.0), ("bleu2", 3.0), ("ppl", 40.0)]),
                row("b", &[("f1", 12.0), ("bleu2", 2.0), ("ppl", 35.0)]),
            ],
            Layout::Markdown,
        );
        assert_eq!(t.matches("**").count(), 6, "{t}");
        assert!(t.contains("**12.00**") && t.contains("**3.00**") && t.contains("**35.00**"));
        assert!(!t.contains('\u{2020}'));
    }

    #[test]
    fn ties_are_all_bold_with_footnote() {
        let t = render_report(
            &[row("a", &[("f1", 10.001)]), row("b", &[("f1", 9.999)]), row("c", &[("f1", 1.0)])],
            Layout::Markdown,
        );
        assert_eq!(t.matches("**10.00**").count(), 2, "{t}");
        assert!(t.contains("f1\u{2020}") && t.contains("tie for best in f1"));
    }

    #[test]
    fn single_method_renders() {
        let t = render_report(&[row("only", &[("f1", 5.0), ("distinct1", 1.5)])], Layout::Text);
        assert_eq!(t.lines().count(), 2);
        assert!(t.contains("*5.00*"));
    }
}
