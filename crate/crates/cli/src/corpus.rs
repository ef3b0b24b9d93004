//! Seeded synthetic corpora: generation, the corpus manifest, and loading.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ttal_core::svol;
use ttal_core::synth::{gen_phantom, PhantomSpec};
use ttal_core::{Mask, Volume};

pub const MANIFEST: &str = "corpus.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Labeled from the start.
    Base,
    /// Unlabeled candidates for pseudo-labelling and annotation.
    Pool,
    Test,
}

/// A generated case held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub case_id: String,
    pub role: Role,
    pub domain_tag: String,
    pub volume: Volume,
    pub truth: Mask,
    pub border: Option<(usize, usize)>,
}

/// `count` cases of one role drawn from one phantom distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub role: Role,
    pub domain_tag: String,
    pub count: usize,
    pub spec: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub case_id: String,
    pub role: Role,
    pub domain_tag: String,
    pub spec_digest: String,
    pub spec: PhantomSpec,
    pub seed: u64,
    /// Paths relative to the corpus directory.
    pub volume: PathBuf,
    pub truth: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub corpus_seed: u64,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn ids(&self, role: Role) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(move |e| e.role == role).map(|e| e.case_id.as_str())
    }
}

fn derive_seed(corpus_seed: u64, tag: &str) -> u64 {
    let h = Sha256::digest(format!("{corpus_seed}/{tag}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Entries for `splits`, ids `<role>-<domain>-<index>`.
pub fn plan_corpus(splits: &[Split], corpus_seed: u64) -> CorpusManifest {
    let mut entries = Vec::new();
    for s in splits {
        let role = serde_json::to_value(s.role).expect("role serializes");
        let role = role.as_str().expect("string");
        for i in 0..s.count {
            let case_id = format!("{role}-{}-{i:03}", s.domain_tag);
            entries.push(CorpusEntry {
                seed: derive_seed(corpus_seed, &case_id),
                volume: PathBuf::from(format!("volumes/{case_id}.json")),
                truth: PathBuf::from(format!("truth/{case_id}.json")),
                spec_digest: s.spec.digest(),
                spec: s.spec,
                role: s.role,
                domain_tag: s.domain_tag.clone(),
                case_id,
            });
        }
    }
    CorpusManifest { corpus_seed, entries }
}

pub fn realize(entry: &CorpusEntry) -> Result<Case> {
    let p = gen_phantom(&entry.spec, entry.seed).with_context(|| format!("generating {}", entry.case_id))?;
    Ok(Case {
        case_id: entry.case_id.clone(),
        role: entry.role,
        domain_tag: entry.domain_tag.clone(),
        volume: p.volume,
        truth: p.truth,
        border: p.border,
    })
}

/// Generates every case of a manifest in memory, in manifest order.
pub fn realize_all(manifest: &CorpusManifest) -> Result<Vec<Case>> {
    manifest.entries.par_iter().map(realize).collect()
}

pub fn write_corpus(dir: &Path, manifest: &CorpusManifest) -> Result<Vec<Case>> {
    fs::create_dir_all(dir.join("volumes"))?;
    fs::create_dir_all(dir.join("truth"))?;
    let cases = realize_all(manifest)?;
    for (e, c) in manifest.entries.iter().zip(&cases) {
        svol::write_volume(&dir.join(&e.volume), &c.volume)?;
        svol::write_mask(&dir.join(&e.truth), &c.truth)?;
    }
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(manifest)?)?;
    Ok(cases)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads the cases of a written corpus from disk.
pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<Case>)> {
    let manifest = read_manifest(dir)?;
    let cases = manifest
        .entries
        .par_iter()
        .map(|e| {
            let volume = svol::read_volume(&dir.join(&e.volume))?;
            let truth = svol::read_mask(&dir.join(&e.truth))?;
            Ok(Case {
                border: truth.z_extent(),
                case_id: e.case_id.clone(),
                role: e.role,
                domain_tag: e.domain_tag.clone(),
                volume,
                truth,
            })
        })
        .collect::<Result<_>>()?;
    Ok((manifest, cases))
}
