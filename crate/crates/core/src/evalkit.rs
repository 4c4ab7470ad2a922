//! AUROC, threshold selection and result tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Flawless,
    Anomalous,
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "flawless" | "good" | "0" => Ok(Label::Flawless),
            "anomalous" | "defect" | "1" => Ok(Label::Anomalous),
            other => Err(Error::Input(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredEntry {
    pub id: String,
    pub score: f64,
    pub label: Label,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    pub entries: Vec<ScoredEntry>,
}

impl ScoredSet {
    pub fn from_scores(flawless: &[f64], anomalous: &[f64]) -> Self {
        let mk = |label, prefix: &str, scores: &[f64]| {
            scores
                .iter()
                .enumerate()
                .map(|(i, &score)| ScoredEntry {
                    id: format!("{prefix}{i}"),
                    score,
                    label,
                })
                .collect::<Vec<_>>()
        };
        let mut entries = mk(Label::Flawless, "f", flawless);
        entries.extend(mk(Label::Anomalous, "a", anomalous));
        ScoredSet { entries }
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    fn check(&self) -> Result<(usize, usize)> {
        let nf = self.count(Label::Flawless);
        let na = self.count(Label::Anomalous);
        if nf == 0 || na == 0 {
            return Err(Error::MetricUndefined(format!(
                "need both labels, got {nf} flawless and {na} anomalous"
            )));
        }
        if let Some(e) = self.entries.iter().find(|e| !e.score.is_finite()) {
            return Err(Error::Input(format!("non-finite score for {}", e.id)));
        }
        Ok((nf, na))
    }

    /// Scores sorted ascending with their labels.
    fn sorted(&self) -> Vec<(f64, Label)> {
        let mut v: Vec<_> = self.entries.iter().map(|e| (e.score, e.label)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
}

/// Walks tie groups of ascending scores, yielding `(score, flawless, anomalous)`
/// counts per distinct score.
fn tie_groups(sorted: &[(f64, Label)]) -> Vec<(f64, usize, usize)> {
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for &(s, l) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == s => {}
            _ => groups.push((s, 0, 0)),
        }
        let g = groups.last_mut().expect("just pushed");
        match l {
            Label::Flawless => g.1 += 1,
            Label::Anomalous => g.2 += 1,
        }
    }
    groups
}

/// Probability that a random anomalous score exceeds a random flawless one,
/// ties counting one half.
pub fn auroc(s: &ScoredSet) -> Result<f64> {
    let (nf, na) = s.check()?;
    let mut flawless_below = 0usize;
    // Twice the Mann-Whitney U, kept integral.
    let mut twice_u = 0u128;
    for (_, f, a) in tie_groups(&s.sorted()) {
        twice_u += 2 * (a as u128) * (flawless_below as u128) + (a as u128) * (f as u128);
        flawless_below += f;
    }
    Ok(twice_u as f64 / (2.0 * nf as f64 * na as f64))
}

/// Threshold maximizing Youden's J (TPR − FPR) with "anomalous iff score >
/// threshold". Candidates are midpoints between adjacent distinct scores (the
/// single distinct score when all scores tie); ties in J go to the lowest
/// threshold.
pub fn select_threshold(s: &ScoredSet) -> Result<f64> {
    Ok(best_threshold(s)?.0)
}

/// `(threshold, J)` as chosen by [`select_threshold`].
pub fn best_threshold(s: &ScoredSet) -> Result<(f64, f64)> {
    let (nf, na) = s.check()?;
    let groups = tie_groups(&s.sorted());
    if groups.len() == 1 {
        return Ok((groups[0].0, 0.0));
    }
    let mut above_f = nf;
    let mut above_a = na;
    let mut best: Option<(f64, f64)> = None;
    for w in groups.windows(2) {
        above_f -= w[0].1;
        above_a -= w[0].2;
        let t = w[0].0 + (w[1].0 - w[0].0) / 2.0;
        let j = above_a as f64 / na as f64 - above_f as f64 / nf as f64;
        if best.is_none_or(|(_, bj)| j > bj) {
            best = Some((t, j));
        }
    }
    Ok(best.expect("at least one candidate"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    /// Fraction in `[0, 1]`.
    pub auroc: f64,
    pub n_flawless: usize,
    pub n_anomalous: usize,
    pub threshold: f64,
}

impl CategoryRow {
    pub fn evaluate(category: &str, set: &ScoredSet) -> Result<Self> {
        Ok(CategoryRow {
            category: category.to_string(),
            auroc: auroc(set)?,
            n_flawless: set.count(Label::Flawless),
            n_anomalous: set.count(Label::Anomalous),
            threshold: select_threshold(set)?,
        })
    }
}

/// All category results for one model variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub rows: Vec<CategoryRow>,
}

impl EvalReport {
    /// Unweighted mean of the category AUROCs.
    pub fn mean_auroc(&self) -> f64 {
        self.rows.iter().map(|r| r.auroc).sum::<f64>() / self.rows.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::Input(format!("unknown report format {other:?}"))),
        }
    }
}

pub const AVERAGE_ROW: &str = "Average AUROC";

/// Column title for the known variant keys; anything else is shown verbatim.
pub fn variant_title(variant: &str) -> &str {
    match variant {
        "differnet" => "DifferNet",
        "attent_se" => "AttentDifferNet (SENet)",
        "attent_cbam" => "AttentDifferNet (CBAM)",
        other => other,
    }
}

pub fn format_percent(fraction: f64) -> String {
    format!("{:.2}", fraction * 100.0)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_report(reports: &[EvalReport], format: ReportFormat) -> Result<String> {
    if reports.is_empty() || reports.iter().any(|r| r.rows.is_empty()) {
        return Err(Error::Input("report needs at least one variant with one category".into()));
    }
    let mut categories: Vec<&str> = Vec::new();
    for r in reports {
        for row in &r.rows {
            if !categories.contains(&row.category.as_str()) {
                categories.push(&row.category);
            }
        }
    }
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            let _ = write!(out, "| Category |");
            for r in reports {
                let _ = write!(out, " {} |", variant_title(&r.variant));
            }
            out.push('\n');
            out.push_str("|---|");
            out.push_str(&"---|".repeat(reports.len()));
            out.push('\n');
            for cat in &categories {
                let _ = write!(out, "| {cat} |");
                for r in reports {
                    match r.rows.iter().find(|row| row.category == *cat) {
                        Some(row) => {
                            let _ = write!(out, " {}% |", format_percent(row.auroc));
                        }
                        None => out.push_str(" - |"),
                    }
                }
                out.push('\n');
            }
            let _ = write!(out, "| {AVERAGE_ROW} |");
            for r in reports {
                let _ = write!(out, " {}% |", format_percent(r.mean_auroc()));
            }
            out.push('\n');
        }
        ReportFormat::Csv => {
            out.push_str("category,variant,auroc_percent,n_flawless,n_anomalous,threshold\n");
            for r in reports {
                for row in &r.rows {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        csv_field(&row.category),
                        csv_field(&r.variant),
                        format_percent(row.auroc),
                        row.n_flawless,
                        row.n_anomalous,
                        row.threshold
                    );
                }
            }
            for r in reports {
                let nf: usize = r.rows.iter().map(|x| x.n_flawless).sum();
                let na: usize = r.rows.iter().map(|x| x.n_anomalous).sum();
                let _ = writeln!(
                    out,
                    "{AVERAGE_ROW},{},{},{nf},{na},",
                    csv_field(&r.variant),
                    format_percent(r.mean_auroc())
                );
            }
        }
    }
    Ok(out)
}
