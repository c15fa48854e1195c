//! Text normalization, alias-aware correctness, accuracy and comparison reports.

use crate::model::EvalOutcome;
use crate::Error;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use unicode_normalization::UnicodeNormalization;

const ARTICLES: [&str; 3] = ["the ", "a ", "an "];

fn is_strippable_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{00AB}' | '\u{00BB}'
                | '\u{2013}' | '\u{2014}' | '\u{2026}' | '\u{00BF}' | '\u{00A1}' | '\u{3002}'
                | '\u{FF0C}' | '\u{FF1F}' | '\u{FF01}'
        )
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Canonical form used for every answer comparison.
///
/// NFC composition, lower-casing, whitespace collapse, edge punctuation
/// removal and leading-article removal. The edge rules are applied until
/// nothing changes, so `normalize` is idempotent ("the , uk" -> "uk").
pub fn normalize(text: &str) -> String {
    let folded: String = text.nfc().collect::<String>().to_lowercase().nfc().collect();
    let mut s = collapse_whitespace(&folded);
    loop {
        let trimmed = s.trim_matches(|c: char| is_strippable_punct(c) || c.is_whitespace());
        let without_article = ARTICLES
            .iter()
            .find_map(|a| trimmed.strip_prefix(a))
            .unwrap_or(trimmed);
        let next = collapse_whitespace(without_article);
        if next == s {
            return s;
        }
        s = next;
    }
}

/// True iff the prediction equals the gold label or any alias after normalization.
///
/// Full-string comparison: "Boris Johnson and Rishi Sunak" does not match "Rishi Sunak".
pub fn is_correct(prediction: &str, gold: &str, aliases: &[String]) -> bool {
    let p = normalize(prediction);
    p == normalize(gold) || aliases.iter().any(|a| normalize(a) == p)
}

/// Aggregate accuracy of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub label: String,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Set when `total == 0`; accuracy is then reported as 0.
    pub empty: bool,
}

impl ScoreSummary {
    pub fn from_counts(label: impl Into<String>, correct: usize, total: usize) -> Self {
        let accuracy = if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        };
        Self {
            label: label.into(),
            total,
            correct,
            accuracy,
            empty: total == 0,
        }
    }

    pub fn percent(&self) -> f64 {
        self.accuracy * 100.0
    }
}

/// Accuracy over a set of outcomes, labelled with the mode of the first outcome.
pub fn accuracy(outcomes: &[EvalOutcome]) -> ScoreSummary {
    let label = outcomes
        .first()
        .map(|o| o.mode.as_str())
        .unwrap_or("empty");
    accuracy_labelled(label, outcomes.iter().map(EvalOutcome::verdict))
}

/// Accuracy over raw verdicts.
pub fn accuracy_labelled<I>(label: &str, verdicts: I) -> ScoreSummary
where
    I: IntoIterator<Item = bool>,
{
    let (correct, total) = verdicts
        .into_iter()
        .fold((0, 0), |(c, t), v| (c + usize::from(v), t + 1));
    ScoreSummary::from_counts(label, correct, total)
}

/// One comparison line: direct vs decomposed accuracy for a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub configuration: String,
    /// Percent, 0..=100.
    pub single_accuracy: f64,
    /// Percent, 0..=100.
    pub multi_accuracy: f64,
    /// `multi - single`, in percentage points.
    pub abs_improvement_pp: f64,
    /// `(multi - single) / single * 100`; undefined when single accuracy is zero.
    pub rel_improvement_pct: Option<f64>,
}

/// Builds a comparison row from the direct (`single`) and decomposed (`multi`) summaries.
pub fn compare_report(
    single: &ScoreSummary,
    multi: &ScoreSummary,
    label: &str,
) -> Result<ReportRow, Error> {
    if single.empty || multi.empty {
        return Err(Error::InvalidConfig(format!(
            "cannot compare empty summaries for {label:?}"
        )));
    }
    let s = single.percent();
    let m = multi.percent();
    let abs = m - s;
    Ok(ReportRow {
        configuration: label.to_string(),
        single_accuracy: s,
        multi_accuracy: m,
        abs_improvement_pp: abs,
        rel_improvement_pct: (s > 0.0).then(|| abs / s * 100.0),
    })
}

pub const IMPROVEMENT_NOTE: &str = "Note: improvements are recomputed from the accuracy columns. \
Abs. = multi-hop minus single-hop accuracy, in percentage points; \
Rel. = Abs. / single-hop accuracy x 100. \
A single unlabelled \"accuracy improvement (%)\" figure cannot be reconciled with either \
definition for these accuracies, so both are shown and no such figure is reproduced.";

const HEADERS: [&str; 5] = [
    "Configuration",
    "Single-hop accuracy (%)",
    "Multi-hop accuracy (%)",
    "Abs. improvement (pp)",
    "Rel. improvement (%)",
];

fn signed(v: f64) -> String {
    // avoid "-0.00"
    let v = if v.abs() < 0.005 { 0.0 } else { v };
    format!("{v:+.2}")
}

fn cells(row: &ReportRow) -> [String; 5] {
    [
        row.configuration.clone(),
        format!("{:.2}", row.single_accuracy),
        format!("{:.2}", row.multi_accuracy),
        signed(row.abs_improvement_pp),
        row.rel_improvement_pct
            .map(signed)
            .unwrap_or_else(|| "n/a".to_string()),
    ]
}

/// Aligned plain-text table followed by the improvement note.
pub fn render_text(rows: &[ReportRow]) -> String {
    let body: Vec<[String; 5]> = rows.iter().map(cells).collect();
    let mut widths = HEADERS.map(str::len);
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cols: &[String]| {
        let parts: Vec<String> = cols
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&mut out, &HEADERS.map(String::from));
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&rule.join("  "));
    out.push('\n');
    for r in &body {
        line(&mut out, r);
    }
    out.push('\n');
    out.push_str(IMPROVEMENT_NOTE);
    out.push('\n');
    out
}

/// Markdown table followed by the improvement note.
pub fn render_markdown(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", HEADERS.join(" | "));
    let _ = writeln!(out, "|---|---:|---:|---:|---:|");
    for r in rows {
        let c = cells(r);
        let _ = writeln!(out, "| {} |", c.join(" | "));
    }
    out.push('\n');
    out.push_str(IMPROVEMENT_NOTE);
    out.push('\n');
    out
}

/// Plain-text listing of per-run summaries, used when there is nothing to compare.
pub fn render_summaries(summaries: &[ScoreSummary]) -> String {
    let mut out = String::new();
    for s in summaries {
        if s.empty {
            let _ = writeln!(out, "{}: no outcomes (empty set)", s.label);
        } else {
            let _ = writeln!(
                out,
                "{}: {:.2}% ({}/{})",
                s.label,
                s.percent(),
                s.correct,
                s.total
            );
        }
    }
    out
}

pub const PLOT_HEADER: [&str; 5] = [
    "configuration",
    "single_accuracy",
    "multi_accuracy",
    "abs_improvement_pp",
    "rel_improvement_pct",
];

/// Writes report rows as CSV; numbers use the shortest exact decimal form.
pub fn emit_plot_data(rows: &[ReportRow], path: &Path) -> Result<(), Error> {
    let write = || -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(PLOT_HEADER)?;
        for r in rows {
            w.write_record([
                r.configuration.clone(),
                r.single_accuracy.to_string(),
                r.multi_accuracy.to_string(),
                r.abs_improvement_pp.to_string(),
                r.rel_improvement_pct.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Reads back a file produced by [`emit_plot_data`].
pub fn parse_plot_data(path: &Path) -> Result<Vec<ReportRow>, Error> {
    let bad = |msg: String| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, msg));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(PLOT_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        rows.push(ReportRow {
            configuration: rec[0].to_string(),
            single_accuracy: num(&rec[1])?,
            multi_accuracy: num(&rec[2])?,
            abs_improvement_pp: num(&rec[3])?,
            rel_improvement_pct: if rec[4].is_empty() {
                None
            } else {
                Some(num(&rec[4])?)
            },
        });
    }
    Ok(rows)
}
