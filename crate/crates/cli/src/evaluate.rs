//! Per-case metrics of a model on a labeled test set and their aggregates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ttal_core::metrics::evaluate;
use ttal_core::stats::Summary;
use ttal_core::{Mask, Result, Segmenter};

use crate::corpus::Case;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub domain_tag: String,
    pub dice: f64,
    pub hausdorff95_mm: Option<f64>,
    pub assd2d_mm: Option<f64>,
}

pub fn score(case: &Case, pred: &Mask) -> Result<CaseMetrics> {
    let m = evaluate(pred, &case.truth)?;
    Ok(CaseMetrics {
        case_id: case.case_id.clone(),
        domain_tag: case.domain_tag.clone(),
        dice: m.dice,
        hausdorff95_mm: m.hausdorff95_mm,
        assd2d_mm: m.assd2d_mm,
    })
}

/// Binarized predictions of `seg` scored against ground truth, in test order.
/// A case whose prediction fails is reported as an error and skipped.
pub fn evaluate_model(seg: &(dyn Segmenter + '_), test: &[Case]) -> (Vec<CaseMetrics>, Vec<(String, String)>) {
    let results: Vec<std::result::Result<CaseMetrics, (String, String)>> = test
        .par_iter()
        .map(|c| {
            seg.predict_soft(&c.volume)
                .and_then(|p| score(c, &p.to_mask()))
                .map_err(|e| (c.case_id.clone(), e.to_string()))
        })
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(m) => ok.push(m),
            Err(e) => failed.push(e),
        }
    }
    (ok, failed)
}

/// Mean, population std, min and max of each metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub dice: Summary,
    pub hausdorff95_mm: Option<Summary>,
    pub assd2d_mm: Option<Summary>,
}

/// Undefined distances are left out of the distance summaries.
pub fn summarize(rows: &[CaseMetrics]) -> Option<MetricSummary> {
    let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
    let hd: Vec<f64> = rows.iter().filter_map(|r| r.hausdorff95_mm).collect();
    let assd: Vec<f64> = rows.iter().filter_map(|r| r.assd2d_mm).collect();
    Some(MetricSummary {
        n: rows.len(),
        dice: Summary::of(&dice)?,
        hausdorff95_mm: Summary::of(&hd),
        assd2d_mm: Summary::of(&assd),
    })
}
