//! TTA-based segmentation quality estimation.
//!
//! The voxelwise median of the ensemble predictions, thresholded at 0.5, is
//! taken as the case's prediction. Each ensemble member is binarized and scored
//! against it with Dice; the aggregate of those scores is the estimated Dice.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::dice_slices;
use crate::volume::{Grid, Mask, ProbMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Mean,
    Median,
}

impl Aggregator {
    pub fn apply(&self, values: &[f64]) -> f64 {
        assert!(!values.is_empty(), "aggregate of no scores");
        match self {
            Aggregator::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregator::Median => {
                let mut v = values.to_vec();
                v.sort_by(f64::total_cmp);
                let n = v.len();
                if n % 2 == 1 {
                    v[n / 2]
                } else {
                    0.5 * (v[n / 2 - 1] + v[n / 2])
                }
            }
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Aggregator::Mean => "mean",
            Aggregator::Median => "median",
        }
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregator::Mean),
            "median" => Ok(Aggregator::Median),
            _ => Err(Error::InvalidArgument(format!("unknown aggregator `{s}`"))),
        }
    }
}

/// Voxelwise median of the ensemble and its 0.5 binarization.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMedian {
    prob: ProbMap,
    mask: Mask,
}

impl SoftMedian {
    pub fn from_prob(prob: ProbMap) -> Self {
        let mask = prob.to_mask();
        Self { prob, mask }
    }

    pub fn prob(&self) -> &ProbMap {
        &self.prob
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }
}

/// Voxelwise median of `preds`; for an even count the midpoint of the two
/// central values.
pub fn median_vote(preds: &[ProbMap]) -> Result<SoftMedian> {
    let Some(first) = preds.first() else {
        return Err(Error::InvalidArgument("median of an empty prediction list".into()));
    };
    for p in preds {
        first.geometry().ensure_same_shape(p.geometry())?;
    }
    let n = preds.len();
    let mut column = vec![0f32; n];
    let mut data = Vec::with_capacity(first.data().len());
    for i in 0..first.data().len() {
        for (c, p) in column.iter_mut().zip(preds) {
            *c = p.data()[i];
        }
        column.sort_by(f32::total_cmp);
        let m = if n % 2 == 1 {
            column[n / 2]
        } else {
            0.5 * (column[n / 2 - 1] + column[n / 2])
        };
        data.push(m);
    }
    let prob = ProbMap::from_grid(Grid::from_vec(*first.geometry(), data)?)?;
    Ok(SoftMedian::from_prob(prob))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub case_id: String,
    pub estimated_dice: f64,
    pub per_aug_dice: Vec<f64>,
    pub aggregator: Aggregator,
    pub roi: Option<(usize, usize)>,
    pub ensemble_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QeOptions {
    pub aggregator: Aggregator,
    /// Whether ensemble member 0 (the identity) is scored as well.
    pub include_identity: bool,
}

impl Default for QeOptions {
    fn default() -> Self {
        Self { aggregator: Aggregator::Mean, include_identity: true }
    }
}

/// Scores each ensemble member against the median mask, restricted to slices
/// `roi.0..=roi.1` when given.
pub fn estimate_quality(
    case_id: &str,
    preds: &[ProbMap],
    median: &SoftMedian,
    options: QeOptions,
    roi: Option<(usize, usize)>,
) -> Result<QualityReport> {
    let geom = *median.mask().geometry();
    if let Some(r) = roi {
        geom.check_z_range(r)?;
    }
    let (lo, hi) = roi.unwrap_or((0, geom.nz() - 1));
    let span = lo * geom.slice_len()..(hi + 1) * geom.slice_len();
    let reference = &median.mask().data()[span.clone()];

    let skip = usize::from(!options.include_identity);
    let mut per_aug = Vec::with_capacity(preds.len());
    for p in preds.iter().skip(skip) {
        geom.ensure_same_shape(p.geometry())?;
        let m = p.to_mask();
        per_aug.push(dice_slices(&m.data()[span.clone()], reference));
    }
    if per_aug.is_empty() {
        return Err(Error::InvalidArgument(format!("{case_id}: no ensemble members to score")));
    }
    Ok(QualityReport {
        case_id: case_id.to_string(),
        estimated_dice: options.aggregator.apply(&per_aug),
        per_aug_dice: per_aug,
        aggregator: options.aggregator,
        roi,
        ensemble_size: preds.len(),
    })
}

/// Case ids by ascending estimated Dice, ties broken by id.
pub fn rank_by_quality(reports: &[QualityReport]) -> Result<Vec<String>> {
    ensure_unique_ids(reports)?;
    let mut order: Vec<&QualityReport> = reports.iter().collect();
    order.sort_by(|a, b| {
        a.estimated_dice.total_cmp(&b.estimated_dice).then_with(|| a.case_id.cmp(&b.case_id))
    });
    Ok(order.into_iter().map(|r| r.case_id.clone()).collect())
}

pub(crate) fn ensure_unique_ids(reports: &[QualityReport]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in reports {
        if !seen.insert(r.case_id.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate case id `{}`", r.case_id)));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ReportRow {
    case_id: String,
    estimated_dice: f64,
    aggregator: Aggregator,
    roi_lo: Option<usize>,
    roi_hi: Option<usize>,
    ensemble_size: usize,
    per_aug_dice: String,
}

/// Writes reports as CSV with per-augmentation scores joined by `;`.
pub fn write_reports_csv<W: Write>(writer: W, reports: &[QualityReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in reports {
        w.serialize(ReportRow {
            case_id: r.case_id.clone(),
            estimated_dice: r.estimated_dice,
            aggregator: r.aggregator,
            roi_lo: r.roi.map(|x| x.0),
            roi_hi: r.roi.map(|x| x.1),
            ensemble_size: r.ensemble_size,
            per_aug_dice: r.per_aug_dice.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports_csv<R: Read>(reader: R) -> Result<Vec<QualityReport>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: ReportRow = row?;
        let per_aug_dice = if row.per_aug_dice.is_empty() {
            Vec::new()
        } else {
            row.per_aug_dice
                .split(';')
                .map(|s| s.parse::<f64>().map_err(|e| Error::Validation(format!("{s}: {e}"))))
                .collect::<Result<_>>()?
        };
        let roi = match (row.roi_lo, row.roi_hi) {
            (Some(lo), Some(hi)) => Some((lo, hi)),
            (None, None) => None,
            _ => return Err(Error::Validation(format!("{}: half-open roi", row.case_id))),
        };
        out.push(QualityReport {
            case_id: row.case_id,
            estimated_dice: row.estimated_dice,
            per_aug_dice,
            aggregator: row.aggregator,
            roi,
            ensemble_size: row.ensemble_size,
        });
    }
    Ok(out)
}
