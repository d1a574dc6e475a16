//! Per-attack aggregation, deltas against a baseline, and table rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::AttackType;
use crate::evaluation::RunResult;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mean_auroc: f64,
    pub mean_apcer: f64,
    pub n_runs: usize,
    /// Population standard deviations over runs, kept for diagnostics.
    pub sd_auroc: f64,
    pub sd_apcer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub per_attack: BTreeMap<AttackType, CellStats>,
    pub avg_auroc: f64,
    pub avg_apcer: f64,
    /// Some expected cell is missing or has fewer runs than expected.
    pub partial: bool,
    pub expected_runs: Option<usize>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    // Shifted by the first value so identical runs average to that value exactly.
    let origin = values[0];
    let mean = origin + values.iter().map(|v| v - origin).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MethodReport {
    /// Builds a report from per-attack means directly (one run per cell).
    pub fn from_means(method: &str, cells: &[(AttackType, f64, f64)]) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::InvalidArgument("no cells".into()));
        }
        let per_attack = cells
            .iter()
            .map(|&(a, auroc, apcer)| {
                (
                    a,
                    CellStats {
                        mean_auroc: auroc,
                        mean_apcer: apcer,
                        n_runs: 1,
                        sd_auroc: 0.0,
                        sd_apcer: 0.0,
                    },
                )
            })
            .collect();
        Ok(Self::finish(method, per_attack, None))
    }

    fn finish(method: &str, per_attack: BTreeMap<AttackType, CellStats>, expected_runs: Option<usize>) -> Self {
        let n = per_attack.len() as f64;
        let avg_auroc = per_attack.values().map(|c| c.mean_auroc).sum::<f64>() / n;
        let avg_apcer = per_attack.values().map(|c| c.mean_apcer).sum::<f64>() / n;
        let partial = per_attack.len() < AttackType::ATTACKS.len()
            || expected_runs.is_some_and(|e| per_attack.values().any(|c| c.n_runs < e));
        Self {
            method: method.to_string(),
            per_attack,
            avg_auroc,
            avg_apcer,
            partial,
            expected_runs,
        }
    }

    pub fn attacks(&self) -> Vec<AttackType> {
        self.per_attack.keys().copied().collect()
    }

    pub fn cell_partial(&self, attack: AttackType) -> bool {
        match self.per_attack.get(&attack) {
            None => true,
            Some(c) => self.expected_runs.is_some_and(|e| c.n_runs < e),
        }
    }
}

/// Averages each attack's runs over seeds, then averages the per-attack means
/// (unweighted). `expected_runs` marks cells with fewer runs as partial.
pub fn aggregate_runs(results: &[RunResult], expected_runs: Option<usize>) -> Result<MethodReport> {
    let first = results
        .first()
        .ok_or_else(|| Error::InvalidArgument("no run results to aggregate".into()))?;
    if let Some(other) = results.iter().find(|r| r.method != first.method) {
        return Err(Error::InvalidArgument(format!(
            "runs of {} and {} mixed in one aggregate",
            first.method, other.method
        )));
    }
    let mut cells: BTreeMap<AttackType, Vec<(u64, f64, f64)>> = BTreeMap::new();
    for r in results {
        cells
            .entry(r.held_out_attack)
            .or_default()
            .push((r.seed, r.auroc, r.apcer_at_bpcer1));
    }
    let per_attack = cells
        .into_iter()
        .map(|(a, mut runs)| {
            // Sorting fixes the summation order, so input order cannot matter.
            runs.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.total_cmp(&y.2)));
            let au: Vec<f64> = runs.iter().map(|r| r.1).collect();
            let ap: Vec<f64> = runs.iter().map(|r| r.2).collect();
            let (mean_auroc, sd_auroc) = mean_sd(&au);
            let (mean_apcer, sd_apcer) = mean_sd(&ap);
            (
                a,
                CellStats {
                    mean_auroc,
                    mean_apcer,
                    n_runs: runs.len(),
                    sd_auroc,
                    sd_apcer,
                },
            )
        })
        .collect();
    Ok(MethodReport::finish(&first.method, per_attack, expected_runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub report: MethodReport,
    pub auroc_delta: BTreeMap<AttackType, f64>,
    pub apcer_delta: BTreeMap<AttackType, f64>,
    pub avg_auroc_delta: f64,
    pub avg_apcer_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub baseline: MethodReport,
    pub rows: Vec<DeltaRow>,
    /// Display names by method id; ids are shown when absent.
    pub display_names: BTreeMap<String, String>,
}

impl DeltaReport {
    pub fn attacks(&self) -> Vec<AttackType> {
        self.baseline.attacks()
    }

    pub fn is_partial(&self) -> bool {
        self.baseline.partial || self.rows.iter().any(|r| r.report.partial)
    }
}

/// Element-wise differences against the baseline; the average column is the
/// mean of the per-attack deltas.
pub fn delta_table(baseline: &MethodReport, methods: &[MethodReport]) -> Result<DeltaReport> {
    let attacks = baseline.attacks();
    let mut rows = Vec::with_capacity(methods.len());
    for m in methods {
        if m.attacks() != attacks {
            return Err(Error::Validation(format!(
                "{} covers [{}], baseline {} covers [{}]",
                m.method,
                m.attacks().iter().map(|a| a.as_str()).collect::<Vec<_>>().join(", "),
                baseline.method,
                attacks.iter().map(|a| a.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        let auroc_delta: BTreeMap<AttackType, f64> = attacks
            .iter()
            .map(|a| (*a, m.per_attack[a].mean_auroc - baseline.per_attack[a].mean_auroc))
            .collect();
        let apcer_delta: BTreeMap<AttackType, f64> = attacks
            .iter()
            .map(|a| (*a, m.per_attack[a].mean_apcer - baseline.per_attack[a].mean_apcer))
            .collect();
        let n = attacks.len() as f64;
        rows.push(DeltaRow {
            avg_auroc_delta: auroc_delta.values().sum::<f64>() / n,
            avg_apcer_delta: apcer_delta.values().sum::<f64>() / n,
            auroc_delta,
            apcer_delta,
            report: m.clone(),
        });
    }
    Ok(DeltaReport {
        baseline: baseline.clone(),
        rows,
        display_names: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::UnknownTag {
                kind: "report format",
                tag: s.into(),
                expected: "markdown, csv".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Auroc,
    Apcer,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Apcer => "apcer_at_bpcer1",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Metric::Auroc => "AUROC",
            Metric::Apcer => "APCER @ BPCER=1%",
        }
    }
}

/// Column key: one attack or the average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Attack(AttackType),
    Average,
}

fn round4(v: f64) -> i64 {
    (v * 1e4).round() as i64
}

/// Row indices holding the best delta of a column, compared at 4 decimals.
/// Higher is better for AUROC, lower for APCER.
pub fn best_rows(report: &DeltaReport, metric: Metric, column: Column) -> Vec<usize> {
    let values: Vec<i64> = report
        .rows
        .iter()
        .map(|r| round4(row_delta(r, metric, column)))
        .collect();
    let best = match metric {
        Metric::Auroc => values.iter().max(),
        Metric::Apcer => values.iter().min(),
    };
    match best {
        Some(&b) => (0..values.len()).filter(|&i| values[i] == b).collect(),
        None => Vec::new(),
    }
}

fn row_delta(row: &DeltaRow, metric: Metric, column: Column) -> f64 {
    match (metric, column) {
        (Metric::Auroc, Column::Attack(a)) => row.auroc_delta[&a],
        (Metric::Apcer, Column::Attack(a)) => row.apcer_delta[&a],
        (Metric::Auroc, Column::Average) => row.avg_auroc_delta,
        (Metric::Apcer, Column::Average) => row.avg_apcer_delta,
    }
}

fn base_value(report: &MethodReport, metric: Metric, column: Column) -> f64 {
    match (metric, column) {
        (Metric::Auroc, Column::Attack(a)) => report.per_attack[&a].mean_auroc,
        (Metric::Apcer, Column::Attack(a)) => report.per_attack[&a].mean_apcer,
        (Metric::Auroc, Column::Average) => report.avg_auroc,
        (Metric::Apcer, Column::Average) => report.avg_apcer,
    }
}

fn signed4(v: f64) -> String {
    let s = format!("{v:+.4}");
    // Avoid "-0.0000".
    if s == "-0.0000" {
        "+0.0000".into()
    } else {
        s
    }
}

pub fn render_report(report: &DeltaReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => render_markdown(report),
        ReportFormat::Csv => render_csv(report),
    }
}

fn columns(report: &DeltaReport) -> Vec<Column> {
    let mut cols: Vec<Column> = report.attacks().into_iter().map(Column::Attack).collect();
    cols.push(Column::Average);
    cols
}

fn display(report: &DeltaReport, method: &str) -> String {
    report
        .display_names
        .get(method)
        .cloned()
        .unwrap_or_else(|| method.to_string())
}

fn render_markdown(report: &DeltaReport) -> String {
    let mut out = String::new();
    let cols = columns(report);
    let mut any_tie = false;
    for metric in [Metric::Auroc, Metric::Apcer] {
        let _ = writeln!(out, "### {} (Δ vs {})\n", metric.title(), display(report, &report.baseline.method));
        let mut header = String::from("| Method |");
        let mut rule = String::from("|---|");
        for c in &cols {
            let name = match c {
                Column::Attack(a) => a.display_name(),
                Column::Average => "Average",
            };
            let _ = write!(header, " {name} |");
            rule.push_str("---:|");
        }
        let _ = writeln!(out, "{header}\n{rule}");
        let mut line = format!("| {} |", display(report, &report.baseline.method));
        for &c in &cols {
            let mark = match c {
                Column::Attack(a) if report.baseline.cell_partial(a) => "*",
                Column::Average if report.baseline.partial => "*",
                _ => "",
            };
            let _ = write!(line, " {:.4}{mark} |", base_value(&report.baseline, metric, c));
        }
        let _ = writeln!(out, "{line}");
        let best: Vec<Vec<usize>> = cols.iter().map(|&c| best_rows(report, metric, c)).collect();
        for (i, row) in report.rows.iter().enumerate() {
            let mut line = format!("| {} |", display(report, &row.report.method));
            for (ci, &c) in cols.iter().enumerate() {
                let mut cell = signed4(row_delta(row, metric, c));
                let partial = match c {
                    Column::Attack(a) => row.report.cell_partial(a) || report.baseline.cell_partial(a),
                    Column::Average => row.report.partial || report.baseline.partial,
                };
                if best[ci].contains(&i) {
                    cell = format!("**{cell}**");
                    if best[ci].len() > 1 {
                        cell.push('†');
                        any_tie = true;
                    }
                }
                if partial {
                    cell.push('*');
                }
                let _ = write!(line, " {cell} |");
            }
            let _ = writeln!(out, "{line}");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "Average is the unweighted mean over attack types. Best results per column are bolded.");
    if any_tie {
        let _ = writeln!(out, "† tied at 4 decimal places; all tied entries are bolded.");
    }
    if report.is_partial() {
        let _ = writeln!(out, "\\* incomplete cell: fewer runs than expected.");
    }
    out
}

/// CSV with columns method, attack_type, metric, mean, delta, n_runs. The
/// baseline appears with zero deltas; `average` rows carry the summed run count.
fn render_csv(report: &DeltaReport) -> String {
    let mut out = String::from("method,attack_type,metric,mean,delta,n_runs\n");
    let baseline_row = DeltaRow {
        report: report.baseline.clone(),
        auroc_delta: report.baseline.per_attack.keys().map(|&a| (a, 0.0)).collect(),
        apcer_delta: report.baseline.per_attack.keys().map(|&a| (a, 0.0)).collect(),
        avg_auroc_delta: 0.0,
        avg_apcer_delta: 0.0,
    };
    for row in std::iter::once(&baseline_row).chain(&report.rows) {
        for metric in [Metric::Auroc, Metric::Apcer] {
            for c in columns(report) {
                let (name, n_runs) = match c {
                    Column::Attack(a) => (a.as_str(), row.report.per_attack[&a].n_runs),
                    Column::Average => ("average", row.report.per_attack.values().map(|c| c.n_runs).sum()),
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{:.6},{:.6},{}",
                    row.report.method,
                    name,
                    metric.as_str(),
                    base_value(&row.report, metric, c),
                    row_delta(row, metric, c),
                    n_runs
                );
            }
        }
    }
    out
}
