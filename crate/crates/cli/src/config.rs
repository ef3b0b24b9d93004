use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ttal_core::curate::PseudoLabelMode;
use ttal_core::qe::QeOptions;
use ttal_core::synth::OracleConfig;
use ttal_core::toyseg::{RestartSchedule, TrainConfig};
use ttal_core::{Aggregator, Error, Result};

/// Which unlabeled cases receive border-slice annotations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BorderScope {
    #[default]
    AllCandidates,
    StCandidates,
}

/// Every knob of a run. Serialized canonically into `config.json`; its digest
/// is written next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub ensemble_size: usize,
    pub tta_seed: u64,
    pub aggregator: Aggregator,
    pub include_identity: bool,
    /// Cases annotated per active-learning round.
    pub k: usize,
    /// Lower bound on the pseudo-label threshold; `None` disables it.
    pub floor: Option<f64>,
    pub pseudo_label_mode: PseudoLabelMode,
    pub st: bool,
    pub borders: bool,
    pub border_scope: BorderScope,
    pub teacher: TrainConfig,
    pub fine_tune: TrainConfig,
    pub oracle: OracleConfig,
    pub shape: [usize; 3],
    /// Magnitude of the contrast shift between source and target domains.
    pub sequence_shift: f64,
    /// Fraction of the structure's z-extent cut from restricted-view cases.
    pub fov_crop: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3],
            ensemble_size: 16,
            tta_seed: 16,
            aggregator: Aggregator::Mean,
            include_identity: true,
            k: 0,
            floor: Some(0.85),
            pseudo_label_mode: PseudoLabelMode::TtaMedianSoft,
            st: true,
            borders: false,
            border_scope: BorderScope::AllCandidates,
            teacher: TrainConfig::default(),
            fine_tune: TrainConfig {
                schedule: RestartSchedule { eta_max: 0.1, eta_min: 0.001, t0: 4, t_mult: 2, total_cycles: 2 },
                ..TrainConfig::default()
            },
            oracle: OracleConfig::default(),
            shape: [48, 48, 48],
            sequence_shift: 0.5,
            fov_crop: 0.4,
        }
    }
}

impl RunConfig {
    pub fn paper_faithful(mut self) -> Self {
        self.floor = None;
        self
    }

    pub fn qe_options(&self) -> QeOptions {
        QeOptions { aggregator: self.aggregator, include_identity: self.include_identity }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Validation(msg)) };
        check(!self.seeds.is_empty(), "at least one seed is required".into())?;
        check(self.ensemble_size >= 2, "ensemble size must be at least 2".into())?;
        if let Some(f) = self.floor {
            check((0.0..=1.0).contains(&f), format!("floor {f} outside [0, 1]"))?;
        }
        check(self.shape.iter().all(|&n| n >= 8), format!("phantom shape {:?} too small", self.shape))?;
        check((0.0..=1.0).contains(&self.sequence_shift), "sequence_shift must lie in [0, 1]".into())?;
        check((0.0..1.0).contains(&self.fov_crop), "fov_crop must lie in [0, 1)".into())?;
        for s in [&self.teacher.schedule, &self.fine_tune.schedule] {
            s.validate().map_err(|e| Error::Validation(e.to_string()))?;
        }
        Ok(())
    }
}
