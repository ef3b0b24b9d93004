//! The pipelines in memory: teacher training, TTA-based quality estimation,
//! the combined AL+ST round and its control arms.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use ttal_core::curate::{
    assemble_trainset, build_pseudo_label, make_plan, CaseRecord, LabelKind, PseudoLabelMode, SelectionPlan,
    TrainSet,
};
use ttal_core::qe::{estimate_quality, median_vote, QeOptions, SoftMedian};
use ttal_core::toyseg::{self, Target, ToyModel, TrainCase, TrainConfig};
use ttal_core::{tta_infer, Error, Mask, ProbMap, QualityReport, Result, Segmenter, TtaEnsemble};

use crate::annotate::Annotator;
use crate::config::{BorderScope, RunConfig};
use crate::corpus::Case;

/// TTA outcome for one pool case. Only the identity prediction and the
/// median are kept; they are all pseudo-labels need.
#[derive(Clone, Debug)]
pub struct Inference {
    pub report: QualityReport,
    pub identity: ProbMap,
    pub median: SoftMedian,
}

pub fn infer_case(
    seg: &(dyn Segmenter + '_),
    case: &Case,
    ensemble: &TtaEnsemble,
    qe: QeOptions,
    roi: Option<(usize, usize)>,
) -> Result<Inference> {
    let preds = tta_infer(seg, &case.volume, ensemble)?;
    let median = median_vote(&preds)?;
    let report = estimate_quality(&case.case_id, &preds, &median, qe, roi)?;
    let identity = preds.into_iter().next().expect("ensemble is never empty");
    Ok(Inference { report, identity, median })
}

/// Inference over a pool, in pool order.
pub fn infer_pool(
    seg: &(dyn Segmenter + '_),
    pool: &[Case],
    ensemble: &TtaEnsemble,
    qe: QeOptions,
    rois: &BTreeMap<String, Option<(usize, usize)>>,
) -> Result<Vec<Inference>> {
    pool.par_iter()
        .map(|c| infer_case(seg, c, ensemble, qe, rois.get(&c.case_id).copied().flatten()))
        .collect()
}

pub(crate) fn record(case: &Case, kind: LabelKind, label_dir: &str) -> CaseRecord {
    CaseRecord {
        case_id: case.case_id.clone(),
        volume_ref: PathBuf::from(format!("volumes/{}.json", case.case_id)),
        label_ref: (kind != LabelKind::None).then(|| PathBuf::from(format!("{label_dir}/{}.json", case.case_id))),
        label_kind: kind,
        border: case.border,
        domain_tag: case.domain_tag.clone(),
    }
}

pub fn labeled(cases: &[Case]) -> Vec<TrainCase> {
    cases
        .iter()
        .map(|c| TrainCase { case_id: c.case_id.clone(), volume: c.volume.clone(), target: Target::Hard(c.truth.clone()) })
        .collect()
}

pub fn train_teacher(base: &[Case], cfg: &TrainConfig, seed: u64) -> Result<ToyModel> {
    if base.is_empty() {
        return Err(Error::Validation("the labeled base set is empty".into()));
    }
    toyseg::train(&labeled(base), cfg, seed)
}

/// Settings of one selection round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundSpec {
    pub k: usize,
    pub st: bool,
    pub borders: bool,
    pub border_scope: BorderScope,
    pub floor: Option<f64>,
    pub mode: PseudoLabelMode,
    pub qe: QeOptions,
    pub fine_tune: TrainConfig,
    pub seed: u64,
}

impl RoundSpec {
    pub fn from_config(cfg: &RunConfig, seed: u64) -> Self {
        Self {
            k: cfg.k,
            st: cfg.st,
            borders: cfg.borders,
            border_scope: cfg.border_scope,
            floor: cfg.floor,
            mode: cfg.pseudo_label_mode,
            qe: cfg.qe_options(),
            fine_tune: cfg.fine_tune,
            seed,
        }
    }
}

/// Everything a round produced besides the student.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub reports: Vec<QualityReport>,
    pub plan: SelectionPlan,
    pub trainset: TrainSet,
    pub borders: BTreeMap<String, Option<(usize, usize)>>,
    pub annotations: BTreeMap<String, Mask>,
    pub pseudo_labels: BTreeMap<String, ProbMap>,
    /// The cases the student is fine-tuned on, in trainset order.
    pub train_cases: Vec<TrainCase>,
}

/// Border slices requested before inference (all candidates scope only).
pub fn initial_borders(
    pool: &[Case],
    annotator: &mut dyn Annotator,
    spec: &RoundSpec,
) -> Result<BTreeMap<String, Option<(usize, usize)>>> {
    if spec.borders && spec.border_scope == BorderScope::AllCandidates {
        annotator.borders(&pool.iter().collect::<Vec<_>>())
    } else {
        Ok(BTreeMap::new())
    }
}

/// Selection half of a round (TTA inference, quality estimation, active
/// selection, annotation and pseudo-labels) without the fine-tuning.
pub fn select_round(
    seg: &(dyn Segmenter + '_),
    base: &[Case],
    pool: &[Case],
    annotator: &mut dyn Annotator,
    ensemble: &TtaEnsemble,
    spec: &RoundSpec,
) -> Result<RoundOutcome> {
    check_sets(base, pool)?;
    let borders = initial_borders(pool, annotator, spec)?;
    let inferences = infer_pool(seg, pool, ensemble, spec.qe, &borders)?;
    complete_round(base, pool, borders, &inferences, annotator, spec)
}

fn check_sets(base: &[Case], pool: &[Case]) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::Validation("the unlabeled pool is empty".into()));
    }
    if base.is_empty() {
        return Err(Error::Validation("the labeled base set is empty".into()));
    }
    Ok(())
}

/// Everything after inference: selection, annotation of the selected cases,
/// pseudo-labels and assembly of the training set. `inferences` follow pool order.
pub fn complete_round(
    base: &[Case],
    pool: &[Case],
    mut borders: BTreeMap<String, Option<(usize, usize)>>,
    inferences: &[Inference],
    annotator: &mut dyn Annotator,
    spec: &RoundSpec,
) -> Result<RoundOutcome> {
    check_sets(base, pool)?;
    let reports: Vec<QualityReport> = inferences.iter().map(|i| i.report.clone()).collect();
    let n_labeled = base.len() + spec.k;
    let mut plan = make_plan(&reports, spec.k, n_labeled, spec.floor)?;
    if !spec.st {
        plan = plan.without_st();
    }
    plan.verify(&reports)?;

    let by_id: BTreeMap<&str, usize> = pool.iter().enumerate().map(|(i, c)| (c.case_id.as_str(), i)).collect();
    let al_cases: Vec<&Case> = plan.al_ids.iter().map(|id| &pool[by_id[id.as_str()]]).collect();
    let al_scores: Vec<f64> =
        al_cases.iter().map(|c| inferences[by_id[c.case_id.as_str()]].report.estimated_dice).collect();
    let st_cases: Vec<&Case> = plan.st_ids.iter().map(|id| &pool[by_id[id.as_str()]]).collect();
    if spec.borders && spec.border_scope == BorderScope::StCandidates && !st_cases.is_empty() {
        borders = annotator.borders(&st_cases)?;
    }
    let masks = if al_cases.is_empty() { Vec::new() } else { annotator.annotate(&al_cases, &al_scores)? };

    let mut pseudo_labels = BTreeMap::new();
    for c in &st_cases {
        let inf = &inferences[by_id[c.case_id.as_str()]];
        let border = if spec.borders { borders.get(&c.case_id).copied().flatten() } else { None };
        let label = build_pseudo_label(spec.mode, std::slice::from_ref(&inf.identity), &inf.median, border)?;
        pseudo_labels.insert(c.case_id.clone(), label);
    }

    let trainset = assemble_trainset(
        base.iter().map(|c| record(c, LabelKind::ManualHard, "truth")).collect(),
        al_cases.iter().map(|c| record(c, LabelKind::ManualHard, "labels")).collect(),
        st_cases.iter().map(|c| record(c, LabelKind::PseudoSoft, "pseudo")).collect(),
    )?;

    let mut train_cases = labeled(base);
    let mut annotations = BTreeMap::new();
    for (c, m) in al_cases.iter().zip(masks) {
        train_cases.push(TrainCase { case_id: c.case_id.clone(), volume: c.volume.clone(), target: Target::Hard(m.clone()) });
        annotations.insert(c.case_id.clone(), m);
    }
    for c in &st_cases {
        let label = pseudo_labels[&c.case_id].clone();
        train_cases.push(TrainCase { case_id: c.case_id.clone(), volume: c.volume.clone(), target: Target::Soft(label) });
    }
    Ok(RoundOutcome { reports, plan, trainset, borders, annotations, pseudo_labels, train_cases })
}

/// A full round: selection, then fine-tuning `teacher` on `D_base ∪ D_AL ∪ D_ST`.
pub fn al_st_round(
    teacher: &ToyModel,
    base: &[Case],
    pool: &[Case],
    annotator: &mut dyn Annotator,
    ensemble: &TtaEnsemble,
    spec: &RoundSpec,
) -> Result<(ToyModel, RoundOutcome)> {
    let outcome = select_round(teacher, base, pool, annotator, ensemble, spec)?;
    let student = toyseg::fine_tune(teacher, &outcome.train_cases, &spec.fine_tune, spec.seed)?;
    Ok((student, outcome))
}

/// Control arm: `k` pool cases chosen uniformly at random, annotated, and
/// added to the base before fine-tuning.
pub fn random_round(
    teacher: &ToyModel,
    base: &[Case],
    pool: &[Case],
    annotator: &mut dyn Annotator,
    k: usize,
    fine_tune: &TrainConfig,
    seed: u64,
) -> Result<(ToyModel, Vec<String>)> {
    if k > pool.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds pool of {}", pool.len())));
    }
    let mut order: Vec<&Case> = pool.iter().collect();
    order.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let chosen: Vec<&Case> = order.into_iter().take(k).collect();
    let masks = annotator.annotate(&chosen, &[])?;
    let mut cases = labeled(base);
    for (c, m) in chosen.iter().zip(masks) {
        cases.push(TrainCase { case_id: c.case_id.clone(), volume: c.volume.clone(), target: Target::Hard(m) });
    }
    let student = toyseg::fine_tune(teacher, &cases, fine_tune, seed)?;
    Ok((student, chosen.iter().map(|c| c.case_id.clone()).collect()))
}
