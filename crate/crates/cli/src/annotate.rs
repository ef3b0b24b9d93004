//! Sources of manual annotations: the simulated oracle, or a human working
//! through a worklist directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ttal_core::curate::{read_worklist, write_worklist, WorklistEntry};
use ttal_core::svol;
use ttal_core::synth::{Oracle, OracleConfig};
use ttal_core::{Error, Mask, Result};

use crate::corpus::Case;

pub trait Annotator {
    /// Uppermost and lowermost slices containing the structure.
    fn borders(&mut self, cases: &[&Case]) -> Result<BTreeMap<String, Option<(usize, usize)>>>;

    /// Manual segmentations, in the order of `cases`. `scores` are the
    /// estimated Dice values that led to the request.
    fn annotate(&mut self, cases: &[&Case], scores: &[f64]) -> Result<Vec<Mask>>;
}

/// Answers from each case's ground truth.
pub struct OracleAnnotator {
    config: OracleConfig,
}

impl OracleAnnotator {
    pub fn new(config: OracleConfig) -> Self {
        Self { config }
    }

    fn oracle(&self, cases: &[&Case]) -> Oracle {
        let mut o = Oracle::new(self.config);
        for c in cases {
            o.insert(c.case_id.clone(), c.truth.clone());
        }
        o
    }
}

impl Annotator for OracleAnnotator {
    fn borders(&mut self, cases: &[&Case]) -> Result<BTreeMap<String, Option<(usize, usize)>>> {
        let o = self.oracle(cases);
        cases.iter().map(|c| Ok((c.case_id.clone(), o.border_slices(&c.case_id)?))).collect()
    }

    fn annotate(&mut self, cases: &[&Case], _scores: &[f64]) -> Result<Vec<Mask>> {
        let o = self.oracle(cases);
        cases.iter().map(|c| o.annotate(&c.case_id)).collect()
    }
}

/// Human-in-the-loop annotation through files in `dir`:
///
/// * `worklist.csv` lists the cases to segment; the human drops a mask svol
///   for each at `labels/<case_id>.json`.
/// * `borders_worklist.csv` lists cases needing border slices; the human
///   fills `borders.csv` with `case_id,z_lo,z_hi` rows.
///
/// Missing answers turn into [`Error::Pending`] so the caller can pause.
pub struct FileAnnotator {
    dir: PathBuf,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct BorderRow {
    case_id: String,
    z_lo: usize,
    z_hi: usize,
}

impl FileAnnotator {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn worklist_path(&self) -> PathBuf {
        self.dir.join("worklist.csv")
    }

    pub fn label_path(&self, case_id: &str) -> PathBuf {
        self.dir.join("labels").join(format!("{case_id}.json"))
    }

    pub fn borders_path(&self) -> PathBuf {
        self.dir.join("borders.csv")
    }

    fn volume_path(&self, case_id: &str) -> PathBuf {
        self.dir.join("volumes").join(format!("{case_id}.json"))
    }

    fn write_entries(&self, path: &Path, cases: &[&Case], scores: &[f64]) -> Result<()> {
        fs::create_dir_all(self.dir.join("volumes"))?;
        let mut entries = Vec::new();
        for (i, c) in cases.iter().enumerate() {
            let volume_path = self.volume_path(&c.case_id);
            if !volume_path.exists() {
                svol::write_volume(&volume_path, &c.volume)?;
            }
            entries.push(WorklistEntry {
                case_id: c.case_id.clone(),
                volume_path,
                estimated_dice: scores.get(i).copied().unwrap_or(f64::NAN),
            });
        }
        // an unchanged worklist is left alone so annotators can keep notes in it
        let mut buf = Vec::new();
        write_worklist(&mut buf, &entries)?;
        if fs::read(path).ok().as_deref() != Some(&buf[..]) {
            fs::write(path, buf)?;
        }
        Ok(())
    }

    /// Entries currently listed in the worklist.
    pub fn read_worklist(&self) -> Result<Vec<WorklistEntry>> {
        read_worklist(fs::File::open(self.worklist_path())?)
    }
}

impl Annotator for FileAnnotator {
    fn borders(&mut self, cases: &[&Case]) -> Result<BTreeMap<String, Option<(usize, usize)>>> {
        let mut known = BTreeMap::new();
        if let Ok(f) = fs::File::open(self.borders_path()) {
            for row in csv::Reader::from_reader(f).deserialize() {
                let row: BorderRow = row?;
                known.insert(row.case_id, (row.z_lo, row.z_hi));
            }
        }
        let missing: Vec<&Case> = cases.iter().copied().filter(|c| !known.contains_key(&c.case_id)).collect();
        if !missing.is_empty() {
            fs::create_dir_all(&self.dir)?;
            self.write_entries(&self.dir.join("borders_worklist.csv"), &missing, &[])?;
            return Err(Error::Pending(format!(
                "{} case(s) need border slices in {}",
                missing.len(),
                self.borders_path().display()
            )));
        }
        let mut out = BTreeMap::new();
        for c in cases {
            let b = known[&c.case_id];
            c.volume.geometry().check_z_range(b)?;
            out.insert(c.case_id.clone(), Some(b));
        }
        Ok(out)
    }

    fn annotate(&mut self, cases: &[&Case], scores: &[f64]) -> Result<Vec<Mask>> {
        fs::create_dir_all(self.dir.join("labels"))?;
        self.write_entries(&self.worklist_path(), cases, scores)?;
        let missing: Vec<&str> =
            cases.iter().filter(|c| !self.label_path(&c.case_id).exists()).map(|c| c.case_id.as_str()).collect();
        if !missing.is_empty() {
            return Err(Error::Pending(format!(
                "waiting for {} label(s) in {}: {}",
                missing.len(),
                self.dir.join("labels").display(),
                missing.join(", ")
            )));
        }
        cases
            .iter()
            .map(|c| {
                let m = svol::read_mask(&self.label_path(&c.case_id))?;
                c.volume.geometry().ensure_same_shape(m.geometry())?;
                Ok(m)
            })
            .collect()
    }
}
