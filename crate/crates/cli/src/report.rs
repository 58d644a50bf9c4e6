//! Evaluation CSVs, summary tables, and significance-marked box plots.
//!
//! Eval rows are keyed by (setting, seed, eval condition, pair) and carry
//! all three measurements; the experiment decides which one is its primary
//! metric. Summaries report mean, sample std, and mean NDV per (condition,
//! setting), plus a paired Wilcoxon of the surrogate setting against every
//! baseline at alpha = 0.01: "*" when significantly better, "n.s."
//! otherwise. The zero-difference degenerate case surfaces as "n.s." with
//! a note rather than an error.

use crate::svg::{box_stats, boxplot_svg, BoxGroup};
use crate::{CliError, CliResult};
use srgd_core::metrics::{wilcoxon_signed_rank, ALPHA};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub experiment: String,
    pub setting: String,
    pub seed: u64,
    pub cond: String,
    pub pair: usize,
    pub dsc: f64,
    pub tre: f64,
    pub ndv: f64,
}

/// Column order of eval CSVs; documented in the command help.
pub const EVAL_COLUMNS: [&str; 8] =
    ["experiment", "setting", "seed", "eval_cond", "pair", "dsc", "tre", "ndv"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Dsc,
    Tre,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Dsc => "dsc",
            Metric::Tre => "tre",
        }
    }

    pub fn of(self, row: &EvalRow) -> f64 {
        match self {
            Metric::Dsc => row.dsc,
            Metric::Tre => row.tre,
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Dsc)
    }
}

/// What the report needs to know about an experiment's protocol.
#[derive(Debug, Clone)]
pub struct ReportSpec {
    pub experiment: String,
    /// Display / comparison order; `ours` must be a member.
    pub settings: Vec<String>,
    pub ours: String,
    pub conds: Vec<String>,
    pub metric: Metric,
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> CliResult<()> {
    let mut wtr = csv::Writer::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
    wtr.write_record(EVAL_COLUMNS)?;
    for r in rows {
        wtr.write_record([
            r.experiment.as_str(),
            r.setting.as_str(),
            &r.seed.to_string(),
            r.cond.as_str(),
            &r.pair.to_string(),
            &r.dsc.to_string(),
            &r.tre.to_string(),
            &r.ndv.to_string(),
        ])?;
    }
    wtr.flush().map_err(CliError::from)?;
    Ok(())
}

pub fn read_eval_csv(path: &Path) -> CliResult<Vec<EvalRow>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
    let bad = |m: String| CliError::Data(format!("{}: {}", path.display(), m));
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(EVAL_COLUMNS) {
        return Err(bad(format!("unexpected columns {:?}", headers)));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let r = record?;
        let field = |i: usize| -> CliResult<&str> {
            r.get(i).ok_or_else(|| bad("short row".into()))
        };
        let num = |i: usize| -> CliResult<f64> {
            field(i)?.parse().map_err(|_| bad(format!("bad number in column {}", i)))
        };
        rows.push(EvalRow {
            experiment: field(0)?.to_string(),
            setting: field(1)?.to_string(),
            seed: field(2)?.parse().map_err(|_| bad("bad seed".into()))?,
            cond: field(3)?.to_string(),
            pair: field(4)?.parse().map_err(|_| bad("bad pair index".into()))?,
            dsc: num(5)?,
            tre: num(6)?,
            ndv: num(7)?,
        });
    }
    Ok(rows)
}

/// Loads every `*_eval.csv` under `dir` that belongs to `experiment`.
pub fn read_eval_dir(dir: &Path, experiment: &str) -> CliResult<Vec<EvalRow>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {}", dir.display(), e)))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.ends_with("_eval.csv"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_eval_csv(&p)?.into_iter().filter(|r| r.experiment == experiment));
    }
    rows.sort_by(|a, b| {
        (&a.cond, &a.setting, a.seed, a.pair).cmp(&(&b.cond, &b.setting, b.seed, b.pair))
    });
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub experiment: String,
    pub cond: String,
    pub setting: String,
    pub metric: &'static str,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub mean_ndv: f64,
    /// Paired Wilcoxon p of this setting against the surrogate setting;
    /// absent on the surrogate row itself and when pairing is impossible.
    pub p_vs_ours: Option<f64>,
    pub mark: String,
    pub note: String,
}

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64], mean: f64) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Values of one (cond, setting) cell keyed by (seed, pair) for pairing.
fn cell<'a>(
    rows: &'a [EvalRow],
    cond: &str,
    setting: &str,
    metric: Metric,
) -> BTreeMap<(u64, usize), f64> {
    rows.iter()
        .filter(|r| r.cond == cond && r.setting == setting)
        .map(|r| ((r.seed, r.pair), metric.of(r)))
        .collect()
}

/// Builds summary rows plus human-readable warnings for missing settings.
pub fn summarize(
    spec: &ReportSpec,
    rows: &[EvalRow],
) -> CliResult<(Vec<SummaryRow>, Vec<String>)> {
    for r in rows {
        if !spec.conds.iter().any(|c| c == &r.cond) {
            return Err(CliError::Data(format!("unknown eval condition '{}'", r.cond)));
        }
        if !spec.settings.iter().any(|s| s == &r.setting) {
            return Err(CliError::Data(format!("unknown setting '{}'", r.setting)));
        }
    }
    let mut warnings = Vec::new();
    let mut out = Vec::new();
    for cond in &spec.conds {
        let ours = cell(rows, cond, &spec.ours, spec.metric);
        if ours.is_empty() {
            warnings.push(format!(
                "condition '{}': no rows for '{}'; significance marks skipped",
                cond, spec.ours
            ));
        }
        for setting in &spec.settings {
            let values = cell(rows, cond, setting, spec.metric);
            if values.is_empty() {
                warnings.push(format!("condition '{}': no rows for '{}'", cond, setting));
                continue;
            }
            let ndvs: Vec<f64> = rows
                .iter()
                .filter(|r| &r.cond == cond && &r.setting == setting)
                .map(|r| r.ndv)
                .collect();
            let xs: Vec<f64> = values.values().copied().collect();
            let mean = mean_of(&xs);
            let (mut p_vs_ours, mut mark, mut note) = (None, String::new(), String::new());
            if setting != &spec.ours && !ours.is_empty() {
                if values.keys().ne(ours.keys()) {
                    return Err(CliError::Data(format!(
                        "condition '{}': '{}' and '{}' cover different (seed, pair) sets",
                        cond, setting, spec.ours
                    )));
                }
                let ours_xs: Vec<f64> = ours.values().copied().collect();
                match wilcoxon_signed_rank(&ours_xs, &xs) {
                    Ok(w) => {
                        let ours_better = if spec.metric.higher_is_better() {
                            mean_of(&ours_xs) > mean
                        } else {
                            mean_of(&ours_xs) < mean
                        };
                        p_vs_ours = Some(w.p_two_sided);
                        mark = if w.p_two_sided < ALPHA && ours_better {
                            "*".into()
                        } else {
                            "n.s.".into()
                        };
                    }
                    Err(srgd_core::Error::Domain { .. }) => {
                        mark = "n.s.".into();
                        note = "all differences zero".into();
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            out.push(SummaryRow {
                experiment: spec.experiment.clone(),
                cond: cond.clone(),
                setting: setting.clone(),
                metric: spec.metric.name(),
                n: xs.len(),
                mean,
                std: sample_std(&xs, mean),
                mean_ndv: mean_of(&ndvs),
                p_vs_ours,
                mark,
                note,
            });
        }
    }
    Ok((out, warnings))
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> CliResult<()> {
    let mut wtr = csv::Writer::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
    wtr.write_record([
        "experiment",
        "eval_cond",
        "setting",
        "metric",
        "n",
        "mean",
        "std",
        "mean_ndv",
        "p_vs_ours",
        "mark",
        "note",
    ])?;
    for r in rows {
        wtr.write_record([
            r.experiment.as_str(),
            r.cond.as_str(),
            r.setting.as_str(),
            r.metric,
            &r.n.to_string(),
            &r.mean.to_string(),
            &r.std.to_string(),
            &r.mean_ndv.to_string(),
            &r.p_vs_ours.map(|p| p.to_string()).unwrap_or_default(),
            &r.mark,
            &r.note,
        ])?;
    }
    wtr.flush().map_err(CliError::from)?;
    Ok(())
}

/// Box plot of the primary metric: one group per condition, one box per
/// setting, significance marks above the baselines.
pub fn summary_svg(spec: &ReportSpec, rows: &[EvalRow], summary: &[SummaryRow]) -> String {
    let mut groups = Vec::new();
    for cond in &spec.conds {
        let mut boxes = Vec::new();
        for setting in &spec.settings {
            let values = cell(rows, cond, setting, spec.metric);
            if values.is_empty() {
                continue;
            }
            let xs: Vec<f64> = values.values().copied().collect();
            let mut b = box_stats(setting, &xs);
            b.mark = summary
                .iter()
                .find(|s| &s.cond == cond && &s.setting == setting && !s.mark.is_empty())
                .map(|s| s.mark.clone());
            boxes.push(b);
        }
        if !boxes.is_empty() {
            groups.push(BoxGroup { label: cond.clone(), boxes });
        }
    }
    boxplot_svg(
        &format!("{}: {} by evaluation condition", spec.experiment, spec.metric.name()),
        spec.metric.name(),
        &groups,
    )
}

/// Fixed-width text table for the terminal.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:<10} {:<9} {:>3}  {:>18}  {:>8}  {:>9}  {}",
        "cond", "setting", "metric", "n", "mean +- std", "mean_ndv", "p_vs_ours", "mark"
    );
    for r in rows {
        let p = r.p_vs_ours.map(|p| format!("{:.4}", p)).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<10} {:<10} {:<9} {:>3}  {:>8.4} +- {:>6.4}  {:>8.4}  {:>9}  {} {}",
            r.cond, r.setting, r.metric, r.n, r.mean, r.std, r.mean_ndv, p, r.mark, r.note
        );
    }
    s
}
