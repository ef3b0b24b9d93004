//! A segmenter running in another process, reached through a job directory.
//!
//! For every volume it needs segmented the pipeline writes an intensity svol
//! to `inputs/<job_id>.json` and lists it in `jobs.json`. The external process
//! answers with a prob svol of the same geometry at `outputs/<job_id>.json`.
//! Job ids are content hashes of the input, so reruns and resumed runs ask for
//! the same jobs and finished answers are reused.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ttal_core::svol;
use ttal_core::{Error, ProbMap, Result, Segmenter, TtaEnsemble, Volume};

pub const JOBS: &str = "jobs.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    /// Paths relative to the job directory.
    pub input: PathBuf,
    pub output: PathBuf,
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub done: bool,
}

pub struct ExternalSegmenter {
    dir: PathBuf,
    requested: Mutex<BTreeMap<String, Job>>,
}

impl ExternalSegmenter {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into(), requested: Mutex::new(BTreeMap::new()) }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn job_id(v: &Volume) -> String {
        let mut h = Sha256::new();
        for n in v.shape() {
            h.update((n as u64).to_le_bytes());
        }
        for s in v.spacing_mm() {
            h.update(s.to_le_bytes());
        }
        for x in v.data() {
            h.update(x.to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }

    pub fn input_path(&self, id: &str) -> PathBuf {
        self.dir.join("inputs").join(format!("{id}.json"))
    }

    pub fn output_path(&self, id: &str) -> PathBuf {
        self.dir.join("outputs").join(format!("{id}.json"))
    }

    /// The finished prediction for `v`, or `None` after queueing the job.
    fn lookup(&self, v: &Volume) -> Result<Option<ProbMap>> {
        let id = Self::job_id(v);
        let output = self.output_path(&id);
        let done = output.exists();
        let job = Job {
            id: id.clone(),
            input: PathBuf::from("inputs").join(format!("{id}.json")),
            output: PathBuf::from("outputs").join(format!("{id}.json")),
            shape: v.shape(),
            spacing_mm: v.spacing_mm(),
            done,
        };
        self.requested.lock().expect("job list lock").insert(id.clone(), job);
        if !done {
            let input = self.input_path(&id);
            if !input.exists() {
                svol::write_volume(&input, v)?;
            }
            return Ok(None);
        }
        let p = svol::read_prob(&output)?;
        if p.geometry() != v.geometry() {
            return Err(Error::Validation(format!(
                "external prediction {} has geometry {:?} / {:?} mm, input has {:?} / {:?} mm",
                output.display(),
                p.shape(),
                p.spacing_mm(),
                v.shape(),
                v.spacing_mm()
            )));
        }
        Ok(Some(p))
    }

    /// Queues every TTA job of `volumes` and writes the manifest. Fails with
    /// [`Error::Pending`] while any prediction is missing.
    pub fn request_tta(&self, volumes: &[&Volume], ensemble: &TtaEnsemble) -> Result<()> {
        let mut missing = 0;
        for v in volumes {
            for t in ensemble.transforms() {
                if self.lookup(&t.apply_fwd(v)?)?.is_none() {
                    missing += 1;
                }
            }
        }
        self.write_manifest()?;
        if missing > 0 {
            return Err(Error::Pending(format!(
                "{missing} external prediction(s) requested in {}",
                self.dir.join(JOBS).display()
            )));
        }
        Ok(())
    }

    /// Writes every job requested so far, sorted by id.
    pub fn write_manifest(&self) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        let jobs: Vec<Job> = self.requested.lock().expect("job list lock").values().cloned().collect();
        let text = serde_json::to_string_pretty(&jobs)?;
        let path = self.dir.join(JOBS);
        if fs::read_to_string(&path).ok().as_deref() != Some(text.as_str()) {
            fs::write(path, text)?;
        }
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<Vec<Job>> {
        Ok(serde_json::from_slice(&fs::read(dir.join(JOBS))?)?)
    }
}

impl Segmenter for ExternalSegmenter {
    fn predict_soft(&self, volume: &Volume) -> Result<ProbMap> {
        match self.lookup(volume)? {
            Some(p) => Ok(p),
            None => Err(Error::Pending(format!("external prediction {} missing", Self::job_id(volume)))),
        }
    }
}

/// Answers every open job of `dir` with `seg`; what an external process
/// would do. Returns the number of jobs answered.
pub fn serve_jobs(dir: &Path, seg: &(dyn Segmenter + '_)) -> Result<usize> {
    let mut answered = 0;
    for job in ExternalSegmenter::read_manifest(dir)? {
        let output = dir.join(&job.output);
        if output.exists() {
            continue;
        }
        let v = svol::read_volume(&dir.join(&job.input))?;
        svol::write_prob(&output, &seg.predict_soft(&v)?)?;
        answered += 1;
    }
    Ok(answered)
}
