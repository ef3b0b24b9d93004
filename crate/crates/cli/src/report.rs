//! Study tables: per-seed run means and their aggregates.
//!
//! Two aggregation modes exist. `run` summarizes the per-seed averages (the
//! mean, spread, minimum and maximum of the runs); `case` pools every test
//! case of every seed.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use anyhow::Result;
use serde::{Deserialize, Serialize};
use ttal_core::stats::Summary;

use crate::study::{CaseRow, StudyId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Run,
    Case,
}

impl StudyId {
    /// Aggregation the corresponding study reports: per case for the
    /// self-training study, per run for the other two.
    pub fn default_aggregation(&self) -> Aggregation {
        match self {
            StudyId::StOnly => Aggregation::Case,
            _ => Aggregation::Run,
        }
    }
}

pub const METRICS: [&str; 3] = ["dice", "hausdorff95_mm", "assd2d_mm"];

fn metric(row: &CaseRow, name: &str) -> Option<f64> {
    match name {
        "dice" => Some(row.metrics.dice),
        "hausdorff95_mm" => row.metrics.hausdorff95_mm,
        _ => row.metrics.assd2d_mm,
    }
}

/// Mean metrics of one arm on one domain for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub study: String,
    pub seed: u64,
    pub arm: String,
    pub domain_tag: String,
    pub n: usize,
    pub dice: f64,
    pub hausdorff95_mm: Option<f64>,
    pub assd2d_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub study: String,
    pub arm: String,
    pub domain_tag: String,
    pub aggregation: Aggregation,
    /// Whether this is the aggregation the study reports by default.
    pub primary: bool,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

type Key = (usize, String, String);

/// Groups rows by (arm position, arm, domain) so tables follow arm order.
fn groups<'a>(study: StudyId, rows: &'a [CaseRow]) -> BTreeMap<Key, Vec<&'a CaseRow>> {
    let mut out: BTreeMap<Key, Vec<&CaseRow>> = BTreeMap::new();
    for r in rows {
        let pos = study.arms().iter().position(|a| *a == r.arm).unwrap_or(usize::MAX);
        out.entry((pos, r.arm.clone(), r.metrics.domain_tag.clone())).or_default().push(r);
    }
    out
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    Summary::of(&v).map(|s| s.mean)
}

pub fn run_rows(study: StudyId, rows: &[CaseRow]) -> Vec<RunRow> {
    let mut out = Vec::new();
    for ((_, arm, domain), members) in groups(study, rows) {
        let mut by_seed: BTreeMap<u64, Vec<&CaseRow>> = BTreeMap::new();
        for r in members {
            by_seed.entry(r.seed).or_default().push(r);
        }
        for (seed, rs) in by_seed {
            out.push(RunRow {
                study: study.as_str().to_string(),
                seed,
                arm: arm.clone(),
                domain_tag: domain.clone(),
                n: rs.len(),
                dice: mean_of(rs.iter().map(|r| r.metrics.dice)).expect("nonempty"),
                hausdorff95_mm: mean_of(rs.iter().filter_map(|r| r.metrics.hausdorff95_mm)),
                assd2d_mm: mean_of(rs.iter().filter_map(|r| r.metrics.assd2d_mm)),
            });
        }
    }
    out
}

fn run_metric(row: &RunRow, name: &str) -> Option<f64> {
    match name {
        "dice" => Some(row.dice),
        "hausdorff95_mm" => row.hausdorff95_mm,
        _ => row.assd2d_mm,
    }
}

pub fn summary_rows(study: StudyId, rows: &[CaseRow]) -> Vec<SummaryRow> {
    let runs = run_rows(study, rows);
    let mut out = Vec::new();
    for ((_, arm, domain), members) in groups(study, rows) {
        for aggregation in [Aggregation::Run, Aggregation::Case] {
            for name in METRICS {
                let values: Vec<f64> = match aggregation {
                    Aggregation::Case => members.iter().filter_map(|r| metric(r, name)).collect(),
                    Aggregation::Run => runs
                        .iter()
                        .filter(|r| r.arm == arm && r.domain_tag == domain)
                        .filter_map(|r| run_metric(r, name))
                        .collect(),
                };
                let Some(s) = Summary::of(&values) else { continue };
                out.push(SummaryRow {
                    study: study.as_str().to_string(),
                    arm: arm.clone(),
                    domain_tag: domain.clone(),
                    aggregation,
                    primary: aggregation == study.default_aggregation(),
                    metric: name.to_string(),
                    n: s.n,
                    mean: s.mean,
                    std: s.std,
                    min: s.min,
                    max: s.max,
                });
            }
        }
    }
    out
}

/// Flat CSV form of a case row (serde's flatten does not mix with csv).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CaseCsv {
    study: String,
    seed: u64,
    arm: String,
    case_id: String,
    domain_tag: String,
    dice: f64,
    hausdorff95_mm: Option<f64>,
    assd2d_mm: Option<f64>,
}

pub fn write_case_rows<W: Write>(w: W, rows: &[CaseRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(CaseCsv {
            study: r.study.clone(),
            seed: r.seed,
            arm: r.arm.clone(),
            case_id: r.metrics.case_id.clone(),
            domain_tag: r.metrics.domain_tag.clone(),
            dice: r.metrics.dice,
            hausdorff95_mm: r.metrics.hausdorff95_mm,
            assd2d_mm: r.metrics.assd2d_mm,
        })?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_case_rows<R: Read>(r: R) -> Result<Vec<CaseRow>> {
    let mut out = Vec::new();
    for row in csv::Reader::from_reader(r).deserialize() {
        let c: CaseCsv = row?;
        out.push(CaseRow {
            study: c.study,
            seed: c.seed,
            arm: c.arm,
            metrics: crate::evaluate::CaseMetrics {
                case_id: c.case_id,
                domain_tag: c.domain_tag,
                dice: c.dice,
                hausdorff95_mm: c.hausdorff95_mm,
                assd2d_mm: c.assd2d_mm,
            },
        });
    }
    Ok(out)
}

pub fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(r).deserialize().map(|row| Ok(row?)).collect()
}

/// Fixed-width table of the primary Dice summaries, for the terminal.
pub fn render(summary: &[SummaryRow]) -> String {
    let mut s = format!("{:<34} {:<8} {:>5} {:>8} {:>8} {:>8} {:>8}\n", "arm", "domain", "n", "mean", "std", "min", "max");
    for r in summary.iter().filter(|r| r.primary && r.metric == "dice") {
        s.push_str(&format!(
            "{:<34} {:<8} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            r.arm, r.domain_tag, r.n, r.mean, r.std, r.min, r.max
        ));
    }
    s
}
