//! Combined active-learning and self-training case selection.
//!
//! The candidate pool is ranked by estimated Dice. The `k` lowest cases go to
//! annotation, and of the rest, those at or above an automatically chosen
//! threshold become soft pseudo-labels.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qe::{ensure_unique_ids, rank_by_quality, QualityReport, SoftMedian};
use crate::volume::{Mask, ProbMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelKind {
    ManualHard,
    PseudoSoft,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub volume_ref: PathBuf,
    pub label_ref: Option<PathBuf>,
    pub label_kind: LabelKind,
    pub border: Option<(usize, usize)>,
    pub domain_tag: String,
}

impl CaseRecord {
    pub fn validate(&self, nz: Option<usize>) -> Result<()> {
        if (self.label_kind == LabelKind::None) != self.label_ref.is_none() {
            return Err(Error::Validation(format!(
                "{}: label kind {:?} inconsistent with label path",
                self.case_id, self.label_kind
            )));
        }
        if let Some((lo, hi)) = self.border {
            if lo > hi || nz.is_some_and(|n| hi >= n) {
                return Err(Error::Validation(format!("{}: bad border ({lo}, {hi})", self.case_id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Annotate,
    Pseudo,
    Excluded,
}

/// Why one candidate ended up where it did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub case_id: String,
    pub estimated_dice: f64,
    pub rank: usize,
    pub decision: Decision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub al_ids: Vec<String>,
    pub st_ids: Vec<String>,
    pub excluded_ids: Vec<String>,
    pub threshold_used: f64,
    pub k_requested: usize,
    pub n_labeled: usize,
    pub floor: Option<f64>,
    /// False when a floor pushed the threshold above the n-th best score and
    /// fewer than `n_labeled` pseudo-labels survived.
    pub count_guarantee_met: bool,
    pub decisions: Vec<DecisionRecord>,
}

impl SelectionPlan {
    /// Checks the partition and ordering invariants against `reports`.
    pub fn verify(&self, reports: &[QualityReport]) -> Result<()> {
        let score: HashMap<&str, f64> =
            reports.iter().map(|r| (r.case_id.as_str(), r.estimated_dice)).collect();
        let mut seen = BTreeSet::new();
        for id in self.al_ids.iter().chain(&self.st_ids).chain(&self.excluded_ids) {
            if !score.contains_key(id.as_str()) {
                return Err(Error::Validation(format!("plan mentions unknown case `{id}`")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!("case `{id}` assigned twice")));
            }
        }
        if seen.len() != score.len() {
            return Err(Error::Validation("plan does not cover the candidate pool".into()));
        }
        if let Some(bad) = self.st_ids.iter().find(|id| score[id.as_str()] < self.threshold_used) {
            return Err(Error::Validation(format!("pseudo-label `{bad}` below threshold")));
        }
        let worst_al = self.al_ids.iter().map(|id| score[id.as_str()]).fold(f64::NEG_INFINITY, f64::max);
        let best_rest = self
            .st_ids
            .iter()
            .chain(&self.excluded_ids)
            .map(|id| score[id.as_str()])
            .fold(f64::INFINITY, f64::min);
        if worst_al > best_rest {
            return Err(Error::Validation("annotated case ranks above a non-annotated one".into()));
        }
        Ok(())
    }

    /// The same plan with pseudo-labelling switched off: every former
    /// pseudo-label candidate becomes excluded.
    pub fn without_st(mut self) -> Self {
        self.excluded_ids.append(&mut self.st_ids);
        for d in &mut self.decisions {
            if d.decision == Decision::Pseudo {
                d.decision = Decision::Excluded;
            }
        }
        self
    }
}

/// The first `k` cases of an ascending ranking.
pub fn select_al(ranked: &[String], k: usize) -> Result<Vec<String>> {
    if k > ranked.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} cases from a pool of {}",
            ranked.len()
        )));
    }
    Ok(ranked[..k].to_vec())
}

/// The `n_labeled`-th largest estimated Dice, so that at least `n_labeled`
/// cases pass a `>=` test; the minimum when the pool is smaller. A floor can
/// only raise the result.
pub fn auto_threshold(reports: &[QualityReport], n_labeled: usize, floor: Option<f64>) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("auto threshold over an empty pool".into()));
    }
    if n_labeled == 0 {
        return Err(Error::InvalidArgument("n_labeled must be at least 1".into()));
    }
    let mut scores: Vec<f64> = reports.iter().map(|r| r.estimated_dice).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    let t = scores[n_labeled.min(scores.len()) - 1];
    Ok(match floor {
        Some(f) => t.max(f),
        None => t,
    })
}

/// Non-annotated cases scoring at least `threshold`, in report order.
pub fn select_st(reports: &[QualityReport], al_ids: &[String], threshold: f64) -> Vec<String> {
    reports
        .iter()
        .filter(|r| !al_ids.contains(&r.case_id) && r.estimated_dice >= threshold)
        .map(|r| r.case_id.clone())
        .collect()
}

/// Full selection over a candidate pool. The threshold is computed over the
/// cases left after active selection.
pub fn make_plan(
    reports: &[QualityReport],
    k: usize,
    n_labeled: usize,
    floor: Option<f64>,
) -> Result<SelectionPlan> {
    ensure_unique_ids(reports)?;
    let ranked = rank_by_quality(reports)?;
    let al_ids = select_al(&ranked, k)?;
    let rest: Vec<QualityReport> =
        reports.iter().filter(|r| !al_ids.contains(&r.case_id)).cloned().collect();
    let threshold = if rest.is_empty() { 1.0 } else { auto_threshold(&rest, n_labeled, floor)? };
    let st_ids = select_st(reports, &al_ids, threshold);
    let excluded_ids: Vec<String> = reports
        .iter()
        .map(|r| &r.case_id)
        .filter(|id| !al_ids.contains(id) && !st_ids.contains(id))
        .cloned()
        .collect();

    let score: HashMap<&str, f64> =
        reports.iter().map(|r| (r.case_id.as_str(), r.estimated_dice)).collect();
    let decisions = ranked
        .iter()
        .enumerate()
        .map(|(rank, id)| DecisionRecord {
            case_id: id.clone(),
            estimated_dice: score[id.as_str()],
            rank,
            decision: if al_ids.contains(id) {
                Decision::Annotate
            } else if st_ids.contains(id) {
                Decision::Pseudo
            } else {
                Decision::Excluded
            },
        })
        .collect();

    let plan = SelectionPlan {
        count_guarantee_met: st_ids.len() >= n_labeled.min(rest.len()),
        al_ids,
        st_ids,
        excluded_ids,
        threshold_used: threshold,
        k_requested: k,
        n_labeled,
        floor,
        decisions,
    };
    plan.verify(reports)?;
    Ok(plan)
}

/// Grids whose slices outside a z-range can be cleared.
pub trait BorderCorrectable: Sized {
    fn zero_outside(&self, border: (usize, usize)) -> Result<Self>;
}

impl BorderCorrectable for ProbMap {
    fn zero_outside(&self, border: (usize, usize)) -> Result<Self> {
        self.zero_outside_z(border)
    }
}

impl BorderCorrectable for Mask {
    fn zero_outside(&self, border: (usize, usize)) -> Result<Self> {
        self.zero_outside_z(border)
    }
}

/// Clears every slice outside the annotated `(z_lo, z_hi)` border slices.
pub fn apply_border_correction<T: BorderCorrectable>(p: &T, border: (usize, usize)) -> Result<T> {
    p.zero_outside(border)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoLabelMode {
    /// The identity-member prediction as is.
    PlainSoft,
    /// The voxelwise median of the ensemble.
    #[default]
    TtaMedianSoft,
}

/// Soft pseudo-label for one case. `preds[0]` must be the identity member.
pub fn build_pseudo_label(
    mode: PseudoLabelMode,
    preds: &[ProbMap],
    median: &SoftMedian,
    border: Option<(usize, usize)>,
) -> Result<ProbMap> {
    let label = match mode {
        PseudoLabelMode::PlainSoft => preds
            .first()
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("no identity-member prediction".into()))?,
        PseudoLabelMode::TtaMedianSoft => median.prob().clone(),
    };
    match border {
        Some(b) => apply_border_correction(&label, b),
        None => Ok(label),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSet {
    pub base: Vec<CaseRecord>,
    pub al: Vec<CaseRecord>,
    pub st: Vec<CaseRecord>,
}

impl TrainSet {
    /// `base`, then `al`, then `st`.
    pub fn union(&self) -> impl Iterator<Item = &CaseRecord> {
        self.base.iter().chain(&self.al).chain(&self.st)
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.al.len() + self.st.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn manifest(&self) -> Vec<ManifestRow> {
        let tagged = |set: &'static str, v: &[CaseRecord]| {
            v.iter()
                .map(|c| ManifestRow { set: set.to_string(), record: c.clone() })
                .collect::<Vec<_>>()
        };
        let mut rows = tagged("base", &self.base);
        rows.extend(tagged("al", &self.al));
        rows.extend(tagged("st", &self.st));
        rows
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub set: String,
    #[serde(flatten)]
    pub record: CaseRecord,
}

/// Builds `D_base ∪ D_AL ∪ D_ST`, rejecting id collisions and label kinds that
/// do not match their set.
pub fn assemble_trainset(
    base: Vec<CaseRecord>,
    al: Vec<CaseRecord>,
    st: Vec<CaseRecord>,
) -> Result<TrainSet> {
    let mut seen = BTreeSet::new();
    for c in base.iter().chain(&al).chain(&st) {
        c.validate(None)?;
        if !seen.insert(c.case_id.clone()) {
            return Err(Error::Conflict(format!("case `{}` appears twice", c.case_id)));
        }
    }
    if let Some(c) = base.iter().find(|c| c.label_kind == LabelKind::None) {
        return Err(Error::Validation(format!("base case `{}` has no label", c.case_id)));
    }
    if let Some(c) = al.iter().find(|c| c.label_kind != LabelKind::ManualHard) {
        return Err(Error::Validation(format!("annotated case `{}` is not manual-hard", c.case_id)));
    }
    if let Some(c) = st.iter().find(|c| c.label_kind != LabelKind::PseudoSoft) {
        return Err(Error::Validation(format!("pseudo case `{}` is not pseudo-soft", c.case_id)));
    }
    Ok(TrainSet { base, al, st })
}

/// One line of the annotation worklist handed to a human or the oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorklistEntry {
    pub case_id: String,
    pub volume_path: PathBuf,
    pub estimated_dice: f64,
}

pub fn write_worklist<W: Write>(writer: W, entries: &[WorklistEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_worklist<R: Read>(reader: R) -> Result<Vec<WorklistEntry>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qe::{median_vote, Aggregator};
    use crate::volume::Geometry;

    fn report(id: &str, d: f64) -> QualityReport {
        QualityReport {
            case_id: id.into(),
            estimated_dice: d,
            per_aug_dice: vec![d],
            aggregator: Aggregator::Mean,
            roi: None,
            ensemble_size: 16,
        }
    }

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn active_selection() {
        let ranked = ids(&["b", "c", "a"]);
        assert_eq!(select_al(&ranked, 1).unwrap(), ids(&["b"]));
        assert_eq!(select_al(&ranked, 3).unwrap(), ranked);
        assert!(select_al(&ranked, 0).unwrap().is_empty());
        assert!(select_al(&ranked, 4).is_err());
    }

    #[test]
    fn threshold_rule() {
        let r: Vec<_> = [0.9, 0.8, 0.7, 0.2].iter().enumerate().map(|(i, &d)| report(&i.to_string(), d)).collect();
        let t = auto_threshold(&r, 2, None).unwrap();
        assert_eq!(t, 0.8);
        assert_eq!(select_st(&r, &[], t).len(), 2);
        assert_eq!(auto_threshold(&r, 10, None).unwrap(), 0.2);
        assert_eq!(auto_threshold(&r, 2, Some(0.85)).unwrap(), 0.85);
        assert!(auto_threshold(&[], 1, None).is_err());

        let flat: Vec<_> = (0..5).map(|i| report(&i.to_string(), 0.75)).collect();
        assert_eq!(auto_threshold(&flat, 3, None).unwrap(), 0.75);
        assert_eq!(select_st(&flat, &[], 0.75).len(), 5);
    }

    #[test]
    fn pseudo_selection() {
        let r = vec![report("a", 0.9), report("b", 0.3), report("c", 0.6)];
        assert_eq!(select_st(&r, &ids(&["b"]), 0.6), ids(&["a", "c"]));
        assert_eq!(select_st(&r, &[], 0.0).len(), 3);
        assert!(select_st(&r, &[], 1.0).is_empty());
    }

    #[test]
    fn plan_partitions_pool() {
        let r = vec![report("a", 0.9), report("b", 0.3), report("c", 0.6), report("d", 0.95), report("e", 0.5)];
        let plan = make_plan(&r, 2, 2, None).unwrap();
        assert_eq!(plan.al_ids, ids(&["b", "e"]));
        assert_eq!(plan.threshold_used, 0.9);
        assert_eq!(plan.st_ids, ids(&["a", "d"]));
        assert_eq!(plan.excluded_ids, ids(&["c"]));
        assert!(plan.count_guarantee_met);
        assert_eq!(plan.decisions[0].case_id, "b");

        let floored = make_plan(&r, 2, 2, Some(0.92)).unwrap();
        assert_eq!(floored.st_ids, ids(&["d"]));
        assert!(!floored.count_guarantee_met);

        let everything = make_plan(&r, 5, 2, None).unwrap();
        assert!(everything.st_ids.is_empty());
        assert_eq!(everything.al_ids.len(), 5);
    }

    #[test]
    fn border_correction() {
        let g = Geometry::unit([8, 2, 2]).unwrap();
        let p = ProbMap::new(g, (0..32).map(|i| (i as f32) / 32.0).collect()).unwrap();
        assert_eq!(apply_border_correction(&p, (0, 7)).unwrap(), p);
        let c = apply_border_correction(&p, (2, 4)).unwrap();
        for z in 0..8 {
            if (2..=4).contains(&z) {
                assert_eq!(c.slice_z(z), p.slice_z(z));
            } else {
                assert!(c.slice_z(z).iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(apply_border_correction(&c, (2, 4)).unwrap(), c);
        let outside = Mask::from_fn(g, |z, _, _| z == 7);
        assert!(apply_border_correction(&outside, (0, 5)).unwrap().is_empty_mask());
        assert!(apply_border_correction(&p, (3, 8)).is_err());
    }

    #[test]
    fn pseudo_label_modes() {
        let g = Geometry::unit([4, 1, 2]).unwrap();
        let a = ProbMap::new(g, vec![0.9, 0.2, 0.8, 0.7, 0.6, 0.1, 0.3, 0.4]).unwrap();
        let b = ProbMap::constant(g, 0.5).unwrap();
        let same = vec![a.clone(), a.clone(), a.clone()];
        let sm = median_vote(&same).unwrap();
        assert_eq!(build_pseudo_label(PseudoLabelMode::TtaMedianSoft, &same, &sm, None).unwrap(), a);

        let mixed = vec![a.clone(), b.clone(), b.clone()];
        let sm = median_vote(&mixed).unwrap();
        assert_eq!(build_pseudo_label(PseudoLabelMode::PlainSoft, &mixed, &sm, None).unwrap(), a);
        let bordered = build_pseudo_label(PseudoLabelMode::TtaMedianSoft, &mixed, &sm, Some((1, 2))).unwrap();
        assert_eq!(bordered, apply_border_correction(sm.prob(), (1, 2)).unwrap());
        assert!(build_pseudo_label(PseudoLabelMode::PlainSoft, &[], &sm, None).is_err());
    }

    fn record(id: &str, kind: LabelKind) -> CaseRecord {
        CaseRecord {
            case_id: id.into(),
            volume_ref: format!("{id}.json").into(),
            label_ref: (kind != LabelKind::None).then(|| format!("{id}-label.json").into()),
            label_kind: kind,
            border: None,
            domain_tag: "id".into(),
        }
    }

    #[test]
    fn trainset_assembly() {
        let base: Vec<_> = (0..6).map(|i| record(&format!("b{i}"), LabelKind::ManualHard)).collect();
        let only = assemble_trainset(base.clone(), vec![], vec![]).unwrap();
        assert_eq!(only.len(), 6);

        let al = vec![record("a0", LabelKind::ManualHard), record("a1", LabelKind::ManualHard)];
        let st: Vec<_> = (0..6).map(|i| record(&format!("s{i}"), LabelKind::PseudoSoft)).collect();
        let ts = assemble_trainset(base.clone(), al.clone(), st).unwrap();
        assert!(ts.union().count() >= 14);
        assert_eq!(ts.manifest()[6].set, "al");

        let dup = vec![record("b0", LabelKind::PseudoSoft)];
        assert!(matches!(assemble_trainset(base.clone(), vec![], dup), Err(Error::Conflict(_))));
        let wrong = vec![record("x", LabelKind::PseudoSoft)];
        assert!(matches!(assemble_trainset(base, wrong, vec![]), Err(Error::Validation(_))));
    }

    #[test]
    fn worklist_round_trip() {
        let entries = vec![WorklistEntry { case_id: "p3".into(), volume_path: "cases/p3.json".into(), estimated_dice: 0.41 }];
        let mut buf = Vec::new();
        write_worklist(&mut buf, &entries).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("case_id,volume_path,estimated_dice"));
        assert_eq!(read_worklist(buf.as_slice()).unwrap(), entries);
    }
}
