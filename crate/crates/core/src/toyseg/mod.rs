//! Voxelwise logistic segmenter trained with soft-target cross-entropy.
//!
//! Small enough to train in seconds and fully deterministic given a seed, it
//! stands in for a deep segmentation network in the end-to-end pipelines.

pub mod features;
pub mod schedule;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::segmenter::Segmenter;
use crate::volume::{Grid, Mask, ProbMap, Volume};

pub use features::{Normalization, NUM_FEATURES, RAW_FEATURES};
pub use schedule::RestartSchedule;

/// Training target of one case.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Hard(Mask),
    Soft(ProbMap),
    None,
}

impl Target {
    fn values(&self) -> Option<Vec<f32>> {
        match self {
            Target::Hard(m) => Some(m.data().iter().map(|&v| f32::from(v)).collect()),
            Target::Soft(p) => Some(p.data().to_vec()),
            Target::None => None,
        }
    }

    fn shape(&self) -> Option<[usize; 3]> {
        match self {
            Target::Hard(m) => Some(m.shape()),
            Target::Soft(p) => Some(p.shape()),
            Target::None => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainCase {
    pub case_id: String,
    pub volume: Volume,
    pub target: Target,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Fresh balanced draws every epoch.
    #[default]
    PerEpoch,
    /// One balanced draw reused for every epoch.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: RestartSchedule,
    /// Foreground and background voxels drawn per case and epoch (each).
    pub samples_per_class: usize,
    pub batch_size: usize,
    pub sampling: Sampling,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: RestartSchedule::default(),
            samples_per_class: 256,
            batch_size: 64,
            sampling: Sampling::PerEpoch,
            normalization: Normalization::default(),
        }
    }
}

/// Feature standardization statistics (mean, std per raw feature).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; RAW_FEATURES],
    pub std: [f64; RAW_FEATURES],
}

impl FeatureStats {
    pub fn identity() -> Self {
        Self { mean: [0.0; RAW_FEATURES], std: [1.0; RAW_FEATURES] }
    }

    fn standardize(&self, raw: &[f32; RAW_FEATURES]) -> [f64; NUM_FEATURES] {
        let mut out = [1.0; NUM_FEATURES];
        for k in 0..RAW_FEATURES {
            out[k] = (f64::from(raw[k]) - self.mean[k]) / self.std[k];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub weights: [f64; NUM_FEATURES],
    pub stats: FeatureStats,
    #[serde(default)]
    pub normalization: Normalization,
    /// Mean training loss recorded at the end of every epoch.
    #[serde(default)]
    pub loss_history: Vec<f64>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Soft-target binary cross-entropy of `p = sigmoid(z)` against `y`, computed
/// from the logit for stability.
#[inline]
fn cross_entropy(z: f64, y: f64) -> f64 {
    // -y log p - (1-y) log(1-p) = softplus(z) - y z
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - y * z
}

/// One standardized training example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub x: [f64; NUM_FEATURES],
    pub y: f64,
}

impl ToyModel {
    pub fn zeros(stats: FeatureStats) -> Self {
        Self { weights: [0.0; NUM_FEATURES], stats, normalization: Normalization::default(), loss_history: Vec::new() }
    }

    #[inline]
    fn logit(&self, x: &[f64; NUM_FEATURES]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum()
    }

    /// Mean cross-entropy over `batch` and its gradient in the weights.
    pub fn loss_and_grad(&self, batch: &[Sample]) -> (f64, [f64; NUM_FEATURES]) {
        let mut loss = 0.0;
        let mut grad = [0.0; NUM_FEATURES];
        for s in batch {
            let z = self.logit(&s.x);
            loss += cross_entropy(z, s.y);
            let r = sigmoid(z) - s.y;
            for (g, v) in grad.iter_mut().zip(&s.x) {
                *g += r * v;
            }
        }
        let n = batch.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    pub fn loss(&self, batch: &[Sample]) -> f64 {
        self.loss_and_grad(batch).0
    }

    /// Logistic of the feature dot product at every voxel.
    pub fn predict(&self, v: &Volume) -> ProbMap {
        let data: Vec<f32> = features::raw_features(v, self.normalization)
            .iter()
            .map(|raw| sigmoid(self.logit(&self.stats.standardize(raw))) as f32)
            .collect();
        ProbMap::from_grid(Grid::from_vec(*v.geometry(), data).expect("geometry preserved"))
            .expect("sigmoid output lies in [0, 1]")
    }

    /// SHA-256 of the JSON serialization.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("model serializes");
        hex::encode(Sha256::digest(&json))
    }
}

impl Segmenter for ToyModel {
    fn predict_soft(&self, volume: &Volume) -> Result<ProbMap> {
        Ok(self.predict(volume))
    }
}

struct PreparedCase {
    raw: Vec<[f32; RAW_FEATURES]>,
    target: Vec<f32>,
    fg: Vec<usize>,
    bg: Vec<usize>,
}

fn prepare(cases: &[TrainCase], norm: Normalization) -> Result<Vec<PreparedCase>> {
    if cases.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    for c in cases {
        match c.target.shape() {
            None => return Err(Error::Validation(format!("case `{}` has no label", c.case_id))),
            Some(shape) if shape != c.volume.shape() => {
                return Err(Error::ShapeMismatch { left: c.volume.shape(), right: shape })
            }
            Some(_) => {}
        }
    }
    Ok(cases
        .par_iter()
        .map(|c| {
            let target = c.target.values().expect("checked above");
            let (fg, bg): (Vec<usize>, Vec<usize>) = (0..target.len()).partition(|&i| target[i] >= 0.5);
            PreparedCase { raw: features::raw_features(&c.volume, norm), target, fg, bg }
        })
        .collect())
}

fn compute_stats(prepared: &[PreparedCase]) -> FeatureStats {
    let mut sum = [0.0f64; RAW_FEATURES];
    let mut sq = [0.0f64; RAW_FEATURES];
    let mut n = 0.0;
    for p in prepared {
        for row in &p.raw {
            for k in 0..RAW_FEATURES {
                let v = f64::from(row[k]);
                sum[k] += v;
                sq[k] += v * v;
            }
            n += 1.0;
        }
    }
    let mut stats = FeatureStats::identity();
    for k in 0..RAW_FEATURES {
        let mean = sum[k] / n;
        let var = (sq[k] / n - mean * mean).max(0.0);
        stats.mean[k] = mean;
        stats.std[k] = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }
    stats
}

fn draw(prepared: &[PreparedCase], stats: &FeatureStats, per_class: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let mut out = Vec::with_capacity(prepared.len() * per_class * 2);
    for p in prepared {
        let pools: Vec<&Vec<usize>> = [&p.fg, &p.bg].into_iter().filter(|v| !v.is_empty()).collect();
        let per_pool = per_class * 2 / pools.len().max(1);
        for pool in pools {
            for _ in 0..per_pool {
                let i = pool[rng.random_range(0..pool.len())];
                out.push(Sample { x: stats.standardize(&p.raw[i]), y: f64::from(p.target[i]) });
            }
        }
    }
    out
}

fn optimize(mut model: ToyModel, cases: &[TrainCase], prepared: &[PreparedCase], cfg: &TrainConfig, seed: u64) -> Result<ToyModel> {
    let epochs = cfg.schedule.total_epochs();
    if epochs == 0 {
        return Ok(model);
    }
    cfg.schedule.validate()?;
    if cfg.batch_size == 0 || cfg.samples_per_class == 0 {
        return Err(Error::InvalidArgument("batch size and sample count must be positive".into()));
    }
    debug_assert_eq!(cases.len(), prepared.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = draw(prepared, &model.stats, cfg.samples_per_class, &mut rng);
    model.loss_history.clear();
    for epoch in 0..epochs {
        if epoch > 0 && cfg.sampling == Sampling::PerEpoch {
            samples = draw(prepared, &model.stats, cfg.samples_per_class, &mut rng);
        }
        samples.shuffle(&mut rng);
        let lr = cfg.schedule.lr_at(epoch);
        for batch in samples.chunks(cfg.batch_size) {
            let (_, grad) = model.loss_and_grad(batch);
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= lr * g;
            }
        }
        let loss = model.loss(&samples);
        model.loss_history.push(loss);
    }
    if model.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Validation("training diverged".into()));
    }
    Ok(model)
}

/// Trains a model from zero weights; feature statistics come from `cases`.
pub fn train(cases: &[TrainCase], cfg: &TrainConfig, seed: u64) -> Result<ToyModel> {
    let prepared = prepare(cases, cfg.normalization)?;
    let model = ToyModel { normalization: cfg.normalization, ..ToyModel::zeros(compute_stats(&prepared)) };
    optimize(model, cases, &prepared, cfg, seed)
}

/// Continues training from `base`, keeping its feature statistics.
pub fn fine_tune(base: &ToyModel, cases: &[TrainCase], cfg: &TrainConfig, seed: u64) -> Result<ToyModel> {
    let prepared = prepare(cases, base.normalization)?;
    if cfg.schedule.total_epochs() == 0 {
        return Ok(base.clone());
    }
    optimize(base.clone(), cases, &prepared, cfg, seed)
}

/// Standardized samples drawn from `cases` with `model`'s statistics, for
/// diagnostics and gradient checks.
pub fn sample_batch(model: &ToyModel, cases: &[TrainCase], per_class: usize, seed: u64) -> Result<Vec<Sample>> {
    let prepared = prepare(cases, model.normalization)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(draw(&prepared, &model.stats, per_class, &mut rng))
}
