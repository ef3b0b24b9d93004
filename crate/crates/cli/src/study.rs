//! Desk-scale analogs of the three studies. Every seed re-randomizes the
//! corpus split, trains its own teacher and runs every arm.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ttal_core::curate::SelectionPlan;
use ttal_core::synth::{DomainShift, PhantomSpec, Variability};
use ttal_core::toyseg::{self, ToyModel};
use ttal_core::TtaEnsemble;

use crate::annotate::OracleAnnotator;
use crate::config::RunConfig;
use crate::corpus::{plan_corpus, realize_all, Case, CorpusManifest, Role, Split};
use crate::engine::{al_st_round, labeled, random_round, train_teacher, RoundSpec};
use crate::evaluate::{evaluate_model, CaseMetrics};
use crate::report::{read_case_rows, render, run_rows, summary_rows, write_case_rows, write_csv, SummaryRow};
use crate::run::{open_run_dir, read_json, write_atomic, write_json};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyId {
    StOnly,
    TransferAlSt,
    Highvar,
}

impl StudyId {
    pub const ALL: [StudyId; 3] = [StudyId::StOnly, StudyId::TransferAlSt, StudyId::Highvar];

    pub fn as_str(&self) -> &'static str {
        match self {
            StudyId::StOnly => "st-only",
            StudyId::TransferAlSt => "transfer-al-st",
            StudyId::Highvar => "highvar",
        }
    }

    /// Arm names in table order.
    pub fn arms(&self) -> &'static [&'static str] {
        match self {
            StudyId::StOnly => &["baseline", "ft", "st", "big-baseline", "big-ft"],
            StudyId::TransferAlSt => &[
                "random-3",
                "al-3",
                "al-st-3",
                "al-st-borders-2",
                "al-st-borders-3-no-st-iteration",
                "target-30",
            ],
            StudyId::Highvar => &["baseline-10", "st", "random-5", "al-5", "al-st-5", "baseline-50"],
        }
    }
}

impl fmt::Display for StudyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StudyId {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match Self::ALL.iter().find(|id| id.as_str() == s) {
            Some(id) => Ok(*id),
            None => bail!("unknown study `{s}` (expected st-only, transfer-al-st or highvar)"),
        }
    }
}

/// Case counts and phantom distributions of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    pub splits: Vec<Split>,
}

pub const TEST_CASES: usize = 12;

pub fn design(id: StudyId, cfg: &RunConfig) -> StudyDesign {
    let low = PhantomSpec { shape: cfg.shape, variability: Variability::Low, ..PhantomSpec::default() };
    let shifted = PhantomSpec { shift: DomainShift::ContrastShift { magnitude: cfg.sequence_shift }, ..low };
    let high = PhantomSpec { variability: Variability::High, ..low };
    let cropped = PhantomSpec { shift: DomainShift::CropFov { magnitude: cfg.fov_crop }, ..high };
    let split = |role, tag: &str, count, spec| Split { role, domain_tag: tag.to_string(), count, spec };
    let splits = match id {
        StudyId::StOnly => vec![
            split(Role::Base, "id", 6, low),
            split(Role::Pool, "id", 24, low),
            split(Role::Test, "id", TEST_CASES, low),
            split(Role::Test, "ood", TEST_CASES, shifted),
        ],
        StudyId::TransferAlSt => vec![
            split(Role::Base, "source", 6, low),
            split(Role::Pool, "source", 24, low),
            split(Role::Pool, "target", 30, shifted),
            split(Role::Test, "target", TEST_CASES, shifted),
        ],
        StudyId::Highvar => vec![
            split(Role::Base, "id", 10, high),
            split(Role::Pool, "id", 40, high),
            split(Role::Test, "id", TEST_CASES, high),
            split(Role::Test, "ood", TEST_CASES, cropped),
        ],
    };
    StudyDesign { splits }
}

/// Corpus of one seed of a study.
pub fn corpus_for(id: StudyId, cfg: &RunConfig, seed: u64) -> CorpusManifest {
    plan_corpus(&design(id, cfg).splits, derive(seed, id.as_str(), "corpus"))
}

fn derive(seed: u64, study: &str, what: &str) -> u64 {
    let h = Sha256::digest(format!("{study}/{seed}/{what}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// One test case scored under one arm of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub study: String,
    pub seed: u64,
    pub arm: String,
    #[serde(flatten)]
    pub metrics: CaseMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub seed: u64,
    pub arm: String,
    pub model_digest: String,
    pub plan: Option<SelectionPlan>,
    /// Cases added to the base by annotation (random or active).
    pub annotated: Vec<String>,
    pub trainset_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub rows: Vec<CaseRow>,
    pub arms: Vec<ArmRecord>,
}

pub struct StudyResult {
    pub study: StudyId,
    pub ensemble: TtaEnsemble,
    pub seeds: Vec<SeedResult>,
}

impl StudyResult {
    pub fn rows(&self) -> impl Iterator<Item = &CaseRow> {
        self.seeds.iter().flat_map(|s| &s.rows)
    }

    pub fn arms(&self) -> impl Iterator<Item = &ArmRecord> {
        self.seeds.iter().flat_map(|s| &s.arms)
    }
}

struct SeedContext<'a> {
    id: StudyId,
    cfg: &'a RunConfig,
    seed: u64,
    ensemble: &'a TtaEnsemble,
    cases: Vec<Case>,
    rows: Vec<CaseRow>,
    arms: Vec<ArmRecord>,
}

impl SeedContext<'_> {
    fn select(&self, role: Role, tag: &str) -> Vec<Case> {
        self.cases.iter().filter(|c| c.role == role && c.domain_tag == tag).cloned().collect()
    }

    fn test(&self) -> Vec<Case> {
        self.cases.iter().filter(|c| c.role == Role::Test).cloned().collect()
    }

    fn seed_for(&self, what: &str) -> u64 {
        derive(self.seed, self.id.as_str(), what)
    }

    fn round(&self, k: usize, st: bool, borders: bool, arm: &str) -> RoundSpec {
        RoundSpec { k, st, borders, ..RoundSpec::from_config(self.cfg, self.seed_for(arm)) }
    }

    fn record(&mut self, arm: &str, model: &ToyModel, plan: Option<SelectionPlan>, annotated: Vec<String>, trainset_size: usize) -> Result<()> {
        let (metrics, failed) = evaluate_model(model, &self.test());
        if let Some((id, e)) = failed.first() {
            bail!("evaluating {id} under {arm}: {e}");
        }
        self.rows.extend(metrics.into_iter().map(|m| CaseRow {
            study: self.id.as_str().to_string(),
            seed: self.seed,
            arm: arm.to_string(),
            metrics: m,
        }));
        self.arms.push(ArmRecord {
            seed: self.seed,
            arm: arm.to_string(),
            model_digest: model.digest(),
            plan,
            annotated,
            trainset_size,
        });
        Ok(())
    }
}

fn oracle(cfg: &RunConfig) -> OracleAnnotator {
    OracleAnnotator::new(cfg.oracle)
}

fn run_st_only(ctx: &mut SeedContext) -> Result<()> {
    let cfg = ctx.cfg;
    let base = ctx.select(Role::Base, "id");
    let pool = ctx.select(Role::Pool, "id");
    let teacher = train_teacher(&base, &cfg.teacher, ctx.seed_for("teacher"))?;
    ctx.record("baseline", &teacher, None, vec![], base.len())?;

    let ft = toyseg::fine_tune(&teacher, &labeled(&base), &cfg.fine_tune, ctx.seed_for("ft"))?;
    ctx.record("ft", &ft, None, vec![], base.len())?;

    let spec = ctx.round(0, true, false, "st");
    let (st, outcome) = al_st_round(&teacher, &base, &pool, &mut oracle(cfg), ctx.ensemble, &spec)?;
    ctx.record("st", &st, Some(outcome.plan), vec![], outcome.trainset.len())?;

    let all: Vec<Case> = base.iter().chain(&pool).cloned().collect();
    let big = train_teacher(&all, &cfg.teacher, ctx.seed_for("big-baseline"))?;
    ctx.record("big-baseline", &big, None, vec![], all.len())?;
    let big_ft = toyseg::fine_tune(&big, &labeled(&all), &cfg.fine_tune, ctx.seed_for("big-ft"))?;
    ctx.record("big-ft", &big_ft, None, vec![], all.len())?;
    Ok(())
}

fn run_transfer(ctx: &mut SeedContext) -> Result<()> {
    let cfg = ctx.cfg;
    let base = ctx.select(Role::Base, "source");
    let source_pool = ctx.select(Role::Pool, "source");
    let target_pool = ctx.select(Role::Pool, "target");
    let teacher = train_teacher(&base, &cfg.teacher, ctx.seed_for("teacher"))?;
    // the self-trained source network is the starting point of rows 1-4
    let spec = ctx.round(0, true, false, "source-st");
    let (initial, _) = al_st_round(&teacher, &base, &source_pool, &mut oracle(cfg), ctx.ensemble, &spec)?;

    let (m, chosen) = random_round(&initial, &base, &target_pool, &mut oracle(cfg), 3, &cfg.fine_tune, ctx.seed_for("random-3"))?;
    ctx.record("random-3", &m, None, chosen, base.len() + 3)?;

    let arms: [(&str, &ToyModel, usize, bool, bool); 4] = [
        ("al-3", &initial, 3, false, false),
        ("al-st-3", &initial, 3, true, false),
        ("al-st-borders-2", &initial, 2, true, true),
        ("al-st-borders-3-no-st-iteration", &teacher, 3, true, true),
    ];
    for (arm, start, k, st, borders) in arms {
        let spec = ctx.round(k, st, borders, arm);
        let (m, outcome) = al_st_round(start, &base, &target_pool, &mut oracle(cfg), ctx.ensemble, &spec)?;
        let annotated = outcome.plan.al_ids.clone();
        ctx.record(arm, &m, Some(outcome.plan), annotated, outcome.trainset.len())?;
    }

    let target = train_teacher(&target_pool, &cfg.teacher, ctx.seed_for("target-30"))?;
    ctx.record("target-30", &target, None, vec![], target_pool.len())?;
    Ok(())
}

fn run_highvar(ctx: &mut SeedContext) -> Result<()> {
    let cfg = ctx.cfg;
    let base = ctx.select(Role::Base, "id");
    let pool = ctx.select(Role::Pool, "id");
    let teacher = train_teacher(&base, &cfg.teacher, ctx.seed_for("teacher"))?;
    ctx.record("baseline-10", &teacher, None, vec![], base.len())?;

    let spec = ctx.round(0, true, false, "st");
    let (m, outcome) = al_st_round(&teacher, &base, &pool, &mut oracle(cfg), ctx.ensemble, &spec)?;
    ctx.record("st", &m, Some(outcome.plan), vec![], outcome.trainset.len())?;

    let (m, chosen) = random_round(&teacher, &base, &pool, &mut oracle(cfg), 5, &cfg.fine_tune, ctx.seed_for("random-5"))?;
    ctx.record("random-5", &m, None, chosen, base.len() + 5)?;

    for (arm, st) in [("al-5", false), ("al-st-5", true)] {
        let spec = ctx.round(5, st, false, arm);
        let (m, outcome) = al_st_round(&teacher, &base, &pool, &mut oracle(cfg), ctx.ensemble, &spec)?;
        let annotated = outcome.plan.al_ids.clone();
        ctx.record(arm, &m, Some(outcome.plan), annotated, outcome.trainset.len())?;
    }

    let all: Vec<Case> = base.iter().chain(&pool).cloned().collect();
    let big = train_teacher(&all, &cfg.teacher, ctx.seed_for("baseline-50"))?;
    ctx.record("baseline-50", &big, None, vec![], all.len())?;
    Ok(())
}

pub fn run_seed(id: StudyId, cfg: &RunConfig, ensemble: &TtaEnsemble, seed: u64) -> Result<SeedResult> {
    let cases = realize_all(&corpus_for(id, cfg, seed))?;
    let mut ctx = SeedContext { id, cfg, seed, ensemble, cases, rows: Vec::new(), arms: Vec::new() };
    match id {
        StudyId::StOnly => run_st_only(&mut ctx)?,
        StudyId::TransferAlSt => run_transfer(&mut ctx)?,
        StudyId::Highvar => run_highvar(&mut ctx)?,
    }
    Ok(SeedResult { seed, rows: ctx.rows, arms: ctx.arms })
}

/// Runs every seed of a study (in parallel) and returns results in seed order.
pub fn run_study(id: StudyId, cfg: &RunConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let ensemble = TtaEnsemble::enumerate(cfg.ensemble_size, cfg.tta_seed)?;
    let seeds = cfg.seeds.par_iter().map(|&s| run_seed(id, cfg, &ensemble, s)).collect::<Result<Vec<_>>>()?;
    Ok(StudyResult { study: id, ensemble, seeds })
}

/// Mean Dice of every (seed, arm, domain).
pub fn run_means(result: &StudyResult) -> BTreeMap<(u64, String, String), f64> {
    let mut acc: BTreeMap<(u64, String, String), (f64, usize)> = BTreeMap::new();
    for r in result.rows() {
        let e = acc.entry((r.seed, r.arm.clone(), r.metrics.domain_tag.clone())).or_default();
        e.0 += r.metrics.dice;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// A seed whose `arms.json` exists has finished; its rows are read back.
fn load_seed(dir: &Path, seed: u64) -> Option<SeedResult> {
    let arms: Vec<ArmRecord> = read_json(&dir.join("arms.json")).ok()?;
    let rows = read_case_rows(fs::File::open(dir.join("cases.csv")).ok()?).ok()?;
    Some(SeedResult { seed, rows, arms })
}

fn store_seed(dir: &Path, manifest: &CorpusManifest, result: &SeedResult) -> Result<()> {
    write_json(&dir.join("corpus.json"), manifest)?;
    let mut buf = Vec::new();
    write_case_rows(&mut buf, &result.rows)?;
    write_atomic(&dir.join("cases.csv"), &buf)?;
    write_json(&dir.join("arms.json"), &result.arms)
}

pub fn write_tables(out: &Path, result: &StudyResult) -> Result<()> {
    let rows: Vec<CaseRow> = result.rows().cloned().collect();
    let mut buf = Vec::new();
    write_case_rows(&mut buf, &rows)?;
    write_atomic(&out.join("cases.csv"), &buf)?;
    let mut buf = Vec::new();
    write_csv(&mut buf, &run_rows(result.study, &rows))?;
    write_atomic(&out.join("runs.csv"), &buf)?;
    let summary = summary_rows(result.study, &rows);
    let mut buf = Vec::new();
    write_csv(&mut buf, &summary)?;
    write_atomic(&out.join("summary.csv"), &buf)?;
    write_atomic(&out.join("summary.txt"), render(&summary).as_bytes())?;
    write_json(&out.join("arms.json"), &result.arms().collect::<Vec<_>>())
}

/// [`run_study`] inside a run directory. Finished seeds are reused, so an
/// interrupted study resumes where it stopped.
pub fn run_study_in(out: &Path, id: StudyId, cfg: &RunConfig) -> Result<StudyResult> {
    open_run_dir(out, cfg)?;
    let ensemble = TtaEnsemble::enumerate(cfg.ensemble_size, cfg.tta_seed)?;
    write_json(&out.join("study.json"), &serde_json::json!({ "study": id, "design": design(id, cfg) }))?;
    write_json(&out.join("ensemble.json"), &ensemble.manifest())?;
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            let dir = out.join("seeds").join(s.to_string());
            if let Some(done) = load_seed(&dir, s) {
                return Ok(done);
            }
            let result = run_seed(id, cfg, &ensemble, s)?;
            store_seed(&dir, &corpus_for(id, cfg, s), &result)?;
            Ok(result)
        })
        .collect::<Result<Vec<_>>>()?;
    let result = StudyResult { study: id, ensemble, seeds };
    write_tables(out, &result)?;
    Ok(result)
}

/// Rebuilds the tables of a study directory from its per-case rows.
pub fn reaggregate(out: &Path) -> Result<Vec<SummaryRow>> {
    let meta: serde_json::Value = read_json(&out.join("study.json"))?;
    let id: StudyId = serde_json::from_value(meta["study"].clone())?;
    let rows = read_case_rows(fs::File::open(out.join("cases.csv"))?)?;
    let mut buf = Vec::new();
    write_csv(&mut buf, &run_rows(id, &rows))?;
    write_atomic(&out.join("runs.csv"), &buf)?;
    let summary = summary_rows(id, &rows);
    let mut buf = Vec::new();
    write_csv(&mut buf, &summary)?;
    write_atomic(&out.join("summary.csv"), &buf)?;
    write_atomic(&out.join("summary.txt"), render(&summary).as_bytes())?;
    Ok(summary)
}
