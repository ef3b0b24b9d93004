//! The pipelines on disk. Each command writes into a stage directory of a run
//! that is bound to one config; every artifact needed to re-derive its
//! numbers is kept there, and reruns pick up whatever already exists.
//!
//! ```text
//! <run>/teacher/  config.json, config.digest, model.json, model.digest, trainset.json
//! <run>/<stage>/  config.json, config.digest, segmenter, ensemble.json, borders.json,
//!                 inference/, reports.csv, plan.json, labels/, pseudo/,
//!                 trainset.json, student.json, student.digest, round.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ttal_core::curate::assemble_trainset;
use ttal_core::qe::SoftMedian;
use ttal_core::svol;
use ttal_core::toyseg::{self, ToyModel};
use ttal_core::{Error, QualityReport, Segmenter, TtaEnsemble};

use crate::annotate::{Annotator, FileAnnotator, OracleAnnotator};
use crate::config::RunConfig;
use crate::corpus::{load_corpus, Case, Role};
use crate::engine::{complete_round, infer_case, initial_borders, labeled, record, Inference, RoundSpec};
use crate::evaluate::{evaluate_model, score, summarize, CaseMetrics};
use crate::external::ExternalSegmenter;
use crate::report::write_csv;

pub const CONFIG: &str = "config.json";
pub const DIGEST: &str = "config.digest";

/// Writes through a temporary sibling so an interrupted run never leaves a
/// truncated file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Binds `dir` to `cfg`, or checks that it already is.
pub fn open_run_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let path = dir.join(CONFIG);
    if path.exists() {
        let existing: RunConfig = read_json(&path)?;
        if existing.digest() != cfg.digest() {
            return Err(Error::Validation(format!(
                "{} was created with config {}, not {}",
                dir.display(),
                existing.digest(),
                cfg.digest()
            ))
            .into());
        }
        return Ok(());
    }
    write_json(&path, cfg)?;
    write_atomic(&dir.join(DIGEST), format!("{}\n", cfg.digest()).as_bytes())
}

/// Cached inferences belong to one segmenter; refuse to mix them.
fn bind(path: &Path, segmenter: &str) -> Result<()> {
    match fs::read_to_string(path) {
        Ok(s) if s.trim() == segmenter => Ok(()),
        Ok(s) => Err(Error::Validation(format!(
            "{} holds results of segmenter {}, not {segmenter}",
            path.parent().unwrap_or(path).display(),
            s.trim()
        ))
        .into()),
        Err(_) => write_atomic(path, format!("{segmenter}\n").as_bytes()),
    }
}

pub fn read_model(path: &Path) -> Result<ToyModel> {
    read_json(path)
}

pub fn teacher_path(run: &Path) -> PathBuf {
    run.join("teacher").join("model.json")
}

fn load_cases(corpus: &Path) -> Result<Vec<Case>> {
    Ok(load_corpus(corpus)?.1)
}

fn by_role(cases: &[Case], role: Role, domain: Option<&str>) -> Vec<Case> {
    cases.iter().filter(|c| c.role == role && domain.is_none_or(|d| c.domain_tag == d)).cloned().collect()
}

/// Trains the teacher on the corpus base set. An existing model is kept.
pub fn cmd_teacher(corpus: &Path, run: &Path, cfg: &RunConfig, seed: u64) -> Result<ToyModel> {
    let dir = run.join("teacher");
    open_run_dir(&dir, cfg)?;
    let path = dir.join("model.json");
    if path.exists() {
        return read_model(&path);
    }
    let base = by_role(&load_cases(corpus)?, Role::Base, None);
    if base.is_empty() {
        return Err(Error::Validation(format!("{} has no labeled base cases", corpus.display())).into());
    }
    let model = toyseg::train(&labeled(&base), &cfg.teacher, seed)?;
    let trainset = assemble_trainset(base.iter().map(|c| record(c, ttal_core::curate::LabelKind::ManualHard, "truth")).collect(), vec![], vec![])?;
    write_json(&dir.join("trainset.json"), &trainset)?;
    write_atomic(&dir.join("model.digest"), format!("{}\n", model.digest()).as_bytes())?;
    write_json(&path, &model)?;
    Ok(model)
}

/// Where the base predictions come from.
pub enum Source {
    Model(ToyModel),
    /// A job directory served by an external process. The round then stops
    /// after writing the training set; training is the external side's job.
    External(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Annotation {
    Oracle,
    /// Worklists under `<stage>/annotation`; the round pauses until answered.
    Human,
}

pub struct RoundArgs<'a> {
    pub corpus: &'a Path,
    pub run: &'a Path,
    /// Subdirectory of the run holding this round.
    pub stage: &'a str,
    pub seed: u64,
    pub source: Source,
    pub annotation: Annotation,
    /// Restricts the pool to one domain tag.
    pub pool_domain: Option<String>,
    /// Plain self-training: no annotation and no borders whatever the config says.
    pub st_only: bool,
}

/// Persisted summary of a finished round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub config_digest: String,
    pub seed: u64,
    pub segmenter: String,
    pub pool: usize,
    pub al: usize,
    pub st: usize,
    pub excluded: usize,
    pub threshold: f64,
    pub count_guarantee_met: bool,
    pub trainset_size: usize,
    pub student_digest: Option<String>,
}

/// What a call did, for progress messages and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundResult {
    pub record: RoundRecord,
    pub inferred: usize,
    pub reused: usize,
}

struct CachePaths {
    report: PathBuf,
    median: PathBuf,
    identity: PathBuf,
}

fn cache_paths(dir: &Path, id: &str) -> CachePaths {
    let d = dir.join("inference");
    CachePaths {
        report: d.join(format!("{id}.report.json")),
        median: d.join(format!("{id}.median.json")),
        identity: d.join(format!("{id}.identity.json")),
    }
}

/// A cached inference, if complete and computed for the same region.
fn load_cached(dir: &Path, id: &str, roi: Option<(usize, usize)>) -> Option<Inference> {
    let p = cache_paths(dir, id);
    let report: QualityReport = read_json(&p.report).ok()?;
    if report.roi != roi {
        return None;
    }
    let median = SoftMedian::from_prob(svol::read_prob(&p.median).ok()?);
    let identity = svol::read_prob(&p.identity).ok()?;
    Some(Inference { report, identity, median })
}

fn store(dir: &Path, id: &str, inf: &Inference) -> Result<()> {
    let p = cache_paths(dir, id);
    svol::write_prob(&p.median, inf.median.prob())?;
    svol::write_prob(&p.identity, &inf.identity)?;
    // the report goes last and marks the entry complete
    write_json(&p.report, &inf.report)
}

/// Runs one selection round. With `k == 0`, self-training on and borders off
/// the combined round is the plain self-training round.
pub fn cmd_round(args: RoundArgs, cfg: &RunConfig) -> Result<RoundResult> {
    let dir = args.run.join(args.stage);
    open_run_dir(&dir, cfg)?;
    let cases = load_cases(args.corpus)?;
    let base = by_role(&cases, Role::Base, None);
    let pool = by_role(&cases, Role::Pool, args.pool_domain.as_deref());
    if pool.is_empty() {
        return Err(Error::Validation("the unlabeled pool is empty".into()).into());
    }
    if base.is_empty() {
        return Err(Error::Validation("the labeled base set is empty".into()).into());
    }
    let segmenter = match &args.source {
        Source::Model(m) => format!("toy:{}", m.digest()),
        Source::External(_) => "external".to_string(),
    };
    bind(&dir.join("segmenter"), &segmenter)?;
    let spec = if args.st_only {
        RoundSpec::from_config(&st_config(cfg), args.seed)
    } else {
        RoundSpec::from_config(cfg, args.seed)
    };
    let ensemble = TtaEnsemble::enumerate(cfg.ensemble_size, cfg.tta_seed)?;
    write_json(&dir.join("ensemble.json"), &ensemble.manifest())?;

    let mut annotator: Box<dyn Annotator> = match args.annotation {
        Annotation::Oracle => Box::new(OracleAnnotator::new(cfg.oracle)),
        Annotation::Human => Box::new(FileAnnotator::new(dir.join("annotation"))),
    };
    let borders = initial_borders(&pool, annotator.as_mut(), &spec)?;
    if spec.borders {
        write_json(&dir.join("borders.json"), &borders)?;
    }
    let roi = |c: &Case| borders.get(&c.case_id).copied().flatten();

    let mut cached: BTreeMap<String, Inference> = BTreeMap::new();
    for c in &pool {
        if let Some(inf) = load_cached(&dir, &c.case_id, roi(c)) {
            cached.insert(c.case_id.clone(), inf);
        }
    }
    let todo: Vec<&Case> = pool.iter().filter(|c| !cached.contains_key(&c.case_id)).collect();
    let external;
    let seg: &(dyn Segmenter + '_) = match &args.source {
        Source::Model(m) => m,
        Source::External(jobs) => {
            external = ExternalSegmenter::new(jobs);
            let volumes: Vec<_> = todo.iter().map(|c| &c.volume).collect();
            external.request_tta(&volumes, &ensemble)?;
            &external
        }
    };
    let fresh: Vec<(String, Inference)> = todo
        .par_iter()
        .map(|c| {
            let inf = infer_case(seg, c, &ensemble, spec.qe, roi(c))?;
            store(&dir, &c.case_id, &inf)?;
            Ok((c.case_id.clone(), inf))
        })
        .collect::<Result<_>>()?;
    let (inferred, reused) = (fresh.len(), cached.len());
    cached.extend(fresh);
    let inferences: Vec<Inference> = pool.iter().map(|c| cached.remove(&c.case_id).expect("inferred")).collect();

    let reports: Vec<QualityReport> = inferences.iter().map(|i| i.report.clone()).collect();
    let mut buf = Vec::new();
    ttal_core::qe::write_reports_csv(&mut buf, &reports)?;
    write_atomic(&dir.join("reports.csv"), &buf)?;

    let outcome = complete_round(&base, &pool, borders, &inferences, annotator.as_mut(), &spec)?;
    write_json(&dir.join("plan.json"), &outcome.plan)?;
    if spec.borders {
        write_json(&dir.join("borders.json"), &outcome.borders)?;
    }
    for (id, m) in &outcome.annotations {
        svol::write_mask(&dir.join("labels").join(format!("{id}.json")), m)?;
    }
    for (id, p) in &outcome.pseudo_labels {
        svol::write_prob(&dir.join("pseudo").join(format!("{id}.json")), p)?;
    }
    write_json(&dir.join("trainset.json"), &outcome.trainset)?;

    let student_digest = match &args.source {
        Source::Model(teacher) => {
            let s = toyseg::fine_tune(teacher, &outcome.train_cases, &spec.fine_tune, spec.seed)?;
            write_atomic(&dir.join("student.digest"), format!("{}\n", s.digest()).as_bytes())?;
            write_json(&dir.join("student.json"), &s)?;
            Some(s.digest())
        }
        Source::External(_) => None,
    };
    let plan = &outcome.plan;
    let record = RoundRecord {
        config_digest: cfg.digest(),
        seed: args.seed,
        segmenter,
        pool: pool.len(),
        al: plan.al_ids.len(),
        st: plan.st_ids.len(),
        excluded: plan.excluded_ids.len(),
        threshold: plan.threshold_used,
        count_guarantee_met: plan.count_guarantee_met,
        trainset_size: outcome.trainset.len(),
        student_digest,
    };
    write_json(&dir.join("round.json"), &record)?;
    Ok(RoundResult { record, inferred, reused })
}

/// Config of the plain self-training round: no annotation, no borders.
pub fn st_config(cfg: &RunConfig) -> RunConfig {
    RunConfig { k: 0, st: true, borders: false, ..cfg.clone() }
}

/// Summary row of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummaryRow {
    pub domain_tag: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub struct EvalResult {
    pub rows: Vec<CaseMetrics>,
    pub summary: Vec<EvalSummaryRow>,
    pub failed: Vec<(String, String)>,
}

pub fn eval_summary(rows: &[CaseMetrics]) -> Vec<EvalSummaryRow> {
    let mut domains: Vec<&str> = rows.iter().map(|r| r.domain_tag.as_str()).collect();
    domains.sort_unstable();
    domains.dedup();
    let mut out = Vec::new();
    for d in domains {
        let rs: Vec<CaseMetrics> = rows.iter().filter(|r| r.domain_tag == d).cloned().collect();
        let Some(s) = summarize(&rs) else { continue };
        for (metric, m) in [("dice", Some(s.dice)), ("hausdorff95_mm", s.hausdorff95_mm), ("assd2d_mm", s.assd2d_mm)] {
            if let Some(m) = m {
                out.push(EvalSummaryRow {
                    domain_tag: d.to_string(),
                    metric: metric.to_string(),
                    n: m.n,
                    mean: m.mean,
                    std: m.std,
                    min: m.min,
                    max: m.max,
                });
            }
        }
    }
    out
}

/// What is being evaluated.
pub enum Predictor {
    Model(ToyModel),
    /// Mask svols named `<case_id>.json`.
    Masks(PathBuf),
}

/// Scores the corpus test cases (or those of `role`) and writes
/// `cases.csv` and `summary.csv` to `out`. Per-case failures are reported and
/// skipped.
pub fn cmd_evaluate(corpus: &Path, predictor: &Predictor, role: Role, out: &Path) -> Result<EvalResult> {
    let test = by_role(&load_cases(corpus)?, role, None);
    if test.is_empty() {
        return Err(Error::Validation(format!("{} has no {role:?} cases", corpus.display())).into());
    }
    let (rows, failed) = match predictor {
        Predictor::Model(m) => evaluate_model(m, &test),
        Predictor::Masks(dir) => {
            let mut ok = Vec::new();
            let mut failed = Vec::new();
            for c in &test {
                let r = svol::read_mask(&dir.join(format!("{}.json", c.case_id))).and_then(|m| score(c, &m));
                match r {
                    Ok(m) => ok.push(m),
                    Err(e) => failed.push((c.case_id.clone(), e.to_string())),
                }
            }
            (ok, failed)
        }
    };
    let summary = eval_summary(&rows);
    let mut buf = Vec::new();
    write_csv(&mut buf, &rows)?;
    write_atomic(&out.join("cases.csv"), &buf)?;
    let mut buf = Vec::new();
    write_csv(&mut buf, &summary)?;
    write_atomic(&out.join("summary.csv"), &buf)?;
    if !failed.is_empty() {
        let mut buf = Vec::new();
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["case_id", "error"])?;
        for (id, e) in &failed {
            w.write_record([id, e])?;
        }
        drop(w);
        write_atomic(&out.join("errors.csv"), &buf)?;
    }
    Ok(EvalResult { rows, summary, failed })
}
