//! Test-time augmentation ensembles.
//!
//! Geometric parts are restricted to voxel permutations (z flip, in-plane
//! quarter turns, y-x transpose) so predictions map back to the original frame
//! exactly. Contrast parts act on min-max normalized intensities of the input
//! only.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::Segmenter;
use crate::volume::{Geometry, ProbMap, Volume};

/// Contrast augmentation applied on intensities normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum IntensityOp {
    None,
    Gamma { gamma: f32 },
    Linear { scale: f32, shift: f32 },
}

impl IntensityOp {
    pub fn is_identity(&self) -> bool {
        match *self {
            IntensityOp::None => true,
            IntensityOp::Gamma { gamma } => gamma == 1.0,
            IntensityOp::Linear { scale, shift } => scale == 1.0 && shift == 0.0,
        }
    }

    fn apply_normalized(&self, x: f32) -> f32 {
        match *self {
            IntensityOp::None => x,
            IntensityOp::Gamma { gamma } => x.max(0.0).powf(gamma),
            IntensityOp::Linear { scale, shift } => scale * x + shift,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            IntensityOp::None => "none",
            IntensityOp::Gamma { .. } => "gamma",
            IntensityOp::Linear { .. } => "linear",
        }
    }

    fn params(&self) -> Vec<f32> {
        match *self {
            IntensityOp::None => vec![],
            IntensityOp::Gamma { gamma } => vec![gamma],
            IntensityOp::Linear { scale, shift } => vec![scale, shift],
        }
    }
}

/// Sampling ranges for contrast augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityRanges {
    pub gamma: (f32, f32),
    pub scale: (f32, f32),
    pub shift: (f32, f32),
}

impl Default for IntensityRanges {
    fn default() -> Self {
        Self { gamma: (0.7, 1.5), scale: (0.7, 1.3), shift: (-0.2, 0.2) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaTransform {
    pub id: u32,
    pub flip_z: bool,
    pub flip_y: bool,
    pub flip_x: bool,
    /// Quarter turns in the y-x plane, `0..4`.
    pub rot90_k: u8,
    pub transpose_yx: bool,
    pub intensity: IntensityOp,
    pub seed: u64,
}

impl TtaTransform {
    pub fn identity(seed: u64) -> Self {
        Self {
            id: 0,
            flip_z: false,
            flip_y: false,
            flip_x: false,
            rot90_k: 0,
            transpose_yx: false,
            intensity: IntensityOp::None,
            seed,
        }
    }

    pub fn is_geometric_identity(&self) -> bool {
        !self.flip_z && !self.flip_y && !self.flip_x && self.rot90_k % 4 == 0 && !self.transpose_yx
    }

    fn flips(&self) -> impl Iterator<Item = usize> {
        [self.flip_z, self.flip_y, self.flip_x]
            .into_iter()
            .enumerate()
            .filter_map(|(axis, on)| on.then_some(axis))
    }

    /// Geometry of the transformed frame.
    pub fn forward_geometry(&self, g: &Geometry) -> Geometry {
        let swaps = (self.rot90_k % 2 == 1) != self.transpose_yx;
        if swaps {
            let [nz, ny, nx] = g.shape;
            let [sz, sy, sx] = g.spacing_mm;
            Geometry { shape: [nz, nx, ny], spacing_mm: [sz, sx, sy] }
        } else {
            *g
        }
    }

    /// Geometric permutation followed by the contrast op.
    pub fn apply_fwd(&self, v: &Volume) -> Result<Volume> {
        let mut out = v.clone();
        for axis in self.flips() {
            out = out.flip(axis);
        }
        if self.rot90_k % 4 != 0 {
            out = out.rot90_yx(self.rot90_k);
        }
        if self.transpose_yx {
            out = out.transpose_yx();
        }
        if self.intensity.is_identity() {
            return Ok(out);
        }
        let (lo, hi) = out.intensity_range();
        let range = hi - lo;
        if range <= 0.0 {
            return Ok(out);
        }
        let op = self.intensity;
        out.map_values(|v| lo + range * op.apply_normalized((v - lo) / range))
    }

    /// Exact inverse of the geometric part, mapping a prediction in the
    /// transformed frame back to the original frame.
    pub fn apply_inv_geom(&self, p: &ProbMap, original: &Geometry) -> Result<ProbMap> {
        let expected = self.forward_geometry(original);
        expected.ensure_same_shape(p.geometry())?;
        let mut out = p.clone();
        if self.transpose_yx {
            out = out.transpose_yx();
        }
        if self.rot90_k % 4 != 0 {
            out = out.rot90_yx(4 - self.rot90_k % 4);
        }
        for axis in self.flips() {
            out = out.flip(axis);
        }
        Ok(out)
    }
}

/// Ordered set of transforms; member 0 is always the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaEnsemble {
    transforms: Vec<TtaTransform>,
}

/// The 16 distinct voxel permutations generated by z flip, in-plane quarter
/// turns and y-x transpose, as `(flip_z, rot90_k, transpose_yx)`.
fn geometric_grid() -> Vec<(bool, u8, bool)> {
    let mut grid = Vec::with_capacity(16);
    for flip_z in [false, true] {
        for k in 0..4u8 {
            for t in [false, true] {
                grid.push((flip_z, k, t));
            }
        }
    }
    grid
}

/// Draw from `range` that falls on either side of `neutral` with equal
/// probability, so the ensemble neither brightens nor darkens on balance.
fn around(rng: &mut ChaCha8Rng, range: (f32, f32), neutral: f32) -> f32 {
    let (lo, hi) = range;
    if !(lo < neutral && neutral < hi) {
        return rng.random_range(lo..=hi);
    }
    let u: f32 = rng.random_range(-1.0..=1.0);
    if u < 0.0 { neutral + u * (neutral - lo) } else { neutral + u * (hi - neutral) }
}

impl TtaEnsemble {
    /// Deterministic ensemble of `n` members for `seed` with default ranges.
    pub fn enumerate(n: usize, seed: u64) -> Result<Self> {
        Self::enumerate_with(n, seed, IntensityRanges::default())
    }

    pub fn enumerate_with(n: usize, seed: u64, ranges: IntensityRanges) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!("ensemble size {n} < 2")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid: Vec<_> = geometric_grid().into_iter().skip(1).collect();
        grid.shuffle(&mut rng);

        let mut transforms = vec![TtaTransform::identity(seed)];
        for i in 1..n {
            let (flip_z, rot90_k, transpose_yx) = grid[(i - 1) % grid.len()];
            let reused = i > grid.len();
            let choice = if reused { rng.random_range(1..3) } else { rng.random_range(0..3) };
            let intensity = match choice {
                0 => IntensityOp::None,
                1 => IntensityOp::Gamma { gamma: around(&mut rng, ranges.gamma, 1.0) },
                _ => IntensityOp::Linear {
                    scale: around(&mut rng, ranges.scale, 1.0),
                    shift: around(&mut rng, ranges.shift, 0.0),
                },
            };
            transforms.push(TtaTransform {
                id: i as u32,
                flip_z,
                flip_y: false,
                flip_x: false,
                rot90_k,
                transpose_yx,
                intensity,
                seed,
            });
        }
        Ok(Self { transforms })
    }

    /// Identity-only ensemble, for diagnostics. Equivalent to plain inference.
    pub fn identity_only(seed: u64) -> Self {
        Self { transforms: vec![TtaTransform::identity(seed)] }
    }

    pub fn from_transforms(transforms: Vec<TtaTransform>) -> Result<Self> {
        let Some(first) = transforms.first() else {
            return Err(Error::InvalidArgument("empty ensemble".into()));
        };
        if first.id != 0 || !first.is_geometric_identity() || !first.intensity.is_identity() {
            return Err(Error::InvalidArgument("ensemble member 0 must be the identity".into()));
        }
        let mut ids: Vec<u32> = transforms.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != transforms.len() {
            return Err(Error::InvalidArgument("duplicate transform ids".into()));
        }
        Ok(Self { transforms })
    }

    pub fn transforms(&self) -> &[TtaTransform] {
        &self.transforms
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.transforms.iter().map(ManifestEntry::from).collect()
    }

    pub fn from_manifest(entries: &[ManifestEntry]) -> Result<Self> {
        Self::from_transforms(entries.iter().map(TtaTransform::try_from).collect::<Result<_>>()?)
    }
}

/// One row of the persisted ensemble manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u32,
    pub flip_axes: Vec<String>,
    pub rot90_k: u8,
    pub transpose_yx: bool,
    pub intensity_op: String,
    pub params: Vec<f32>,
    pub seed: u64,
}

impl From<&TtaTransform> for ManifestEntry {
    fn from(t: &TtaTransform) -> Self {
        let flip_axes = [(t.flip_z, "z"), (t.flip_y, "y"), (t.flip_x, "x")]
            .into_iter()
            .filter_map(|(on, name)| on.then(|| name.to_string()))
            .collect();
        Self {
            id: t.id,
            flip_axes,
            rot90_k: t.rot90_k,
            transpose_yx: t.transpose_yx,
            intensity_op: t.intensity.name().to_string(),
            params: t.intensity.params(),
            seed: t.seed,
        }
    }
}

impl TryFrom<&ManifestEntry> for TtaTransform {
    type Error = Error;

    fn try_from(e: &ManifestEntry) -> Result<Self> {
        let has = |axis: &str| e.flip_axes.iter().any(|a| a == axis);
        if let Some(bad) = e.flip_axes.iter().find(|a| !["z", "y", "x"].contains(&a.as_str())) {
            return Err(Error::Validation(format!("unknown flip axis `{bad}`")));
        }
        let intensity = match (e.intensity_op.as_str(), e.params.as_slice()) {
            ("none", []) => IntensityOp::None,
            ("gamma", [g]) if *g > 0.0 => IntensityOp::Gamma { gamma: *g },
            ("linear", [a, b]) if *a > 0.0 => IntensityOp::Linear { scale: *a, shift: *b },
            (op, p) => return Err(Error::Validation(format!("bad intensity op `{op}` {p:?}"))),
        };
        Ok(Self {
            id: e.id,
            flip_z: has("z"),
            flip_y: has("y"),
            flip_x: has("x"),
            rot90_k: e.rot90_k % 4,
            transpose_yx: e.transpose_yx,
            intensity,
            seed: e.seed,
        })
    }
}

/// Runs `seg` on every ensemble member and returns the predictions mapped back
/// to the original frame, ordered by transform id.
pub fn tta_infer<S: Segmenter + ?Sized>(seg: &S, v: &Volume, ensemble: &TtaEnsemble) -> Result<Vec<ProbMap>> {
    let geom = *v.geometry();
    let mut out: Vec<(u32, ProbMap)> = ensemble
        .transforms()
        .par_iter()
        .map(|t| {
            let wrap = |e: Error| Error::Segmenter { id: t.id, source: Box::new(e) };
            let input = t.apply_fwd(v).map_err(wrap)?;
            let pred = seg.predict_soft(&input).map_err(wrap)?;
            let back = t.apply_inv_geom(&pred, &geom).map_err(wrap)?;
            Ok((t.id, back))
        })
        .collect::<Result<_>>()?;
    out.sort_by_key(|(id, _)| *id);
    Ok(out.into_iter().map(|(_, p)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(shape: [usize; 3]) -> Volume {
        let g = Geometry::new(shape, [3.0, 1.0, 0.5]).unwrap();
        Volume::new(g, (0..g.len()).map(|i| (i % 17) as f32 / 16.0).collect()).unwrap()
    }

    #[test]
    fn ensemble_structure() {
        let e = TtaEnsemble::enumerate(2, 3).unwrap();
        assert_eq!(e.len(), 2);
        assert!(e.transforms()[0].is_geometric_identity());
        assert!(!e.transforms()[1].is_geometric_identity());
        assert!(TtaEnsemble::enumerate(1, 3).is_err());

        let a = TtaEnsemble::enumerate(16, 7).unwrap();
        assert_eq!(a, TtaEnsemble::enumerate(16, 7).unwrap());
        assert_ne!(a, TtaEnsemble::enumerate(16, 8).unwrap());
        // the 15 non-identity members cover every distinct permutation once
        let mut geo: Vec<_> =
            a.transforms()[1..].iter().map(|t| (t.flip_z, t.rot90_k, t.transpose_yx)).collect();
        geo.sort();
        geo.dedup();
        assert_eq!(geo.len(), 15);
    }

    #[test]
    fn oversized_ensembles_reuse_geometry_with_contrast() {
        let e = TtaEnsemble::enumerate(40, 1).unwrap();
        assert_eq!(e.len(), 40);
        for t in &e.transforms()[16..] {
            assert!(!t.intensity.is_identity());
        }
    }

    #[test]
    fn identity_and_involutions() {
        let v = ramp_volume([3, 4, 5]);
        let id = TtaTransform::identity(0);
        assert_eq!(id.apply_fwd(&v).unwrap(), v);

        let flip_x = TtaTransform { flip_x: true, ..id };
        assert_eq!(flip_x.apply_fwd(&flip_x.apply_fwd(&v).unwrap()).unwrap(), v);

        let gamma_one = TtaTransform { intensity: IntensityOp::Gamma { gamma: 1.0 }, ..id };
        assert_eq!(gamma_one.apply_fwd(&v).unwrap(), v);
    }

    #[test]
    fn contrast_ops_stay_within_normalized_range() {
        let v = ramp_volume([2, 3, 3]);
        let t = TtaTransform { intensity: IntensityOp::Gamma { gamma: 1.4 }, ..TtaTransform::identity(0) };
        let out = t.apply_fwd(&v).unwrap();
        let (lo, hi) = out.intensity_range();
        assert!(lo >= 0.0 && hi <= 1.0 + 1e-6);
        assert_eq!(out.shape(), v.shape());
    }

    #[test]
    fn inverse_rejects_wrong_geometry() {
        let v = ramp_volume([2, 3, 4]);
        let t = TtaTransform { rot90_k: 1, ..TtaTransform::identity(0) };
        let p = ProbMap::constant(*v.geometry(), 0.5).unwrap();
        assert!(matches!(t.apply_inv_geom(&p, v.geometry()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let e = TtaEnsemble::enumerate(16, 42).unwrap();
        let json = serde_json::to_string(&e.manifest()).unwrap();
        let entries: Vec<ManifestEntry> = serde_json::from_str(&json).unwrap();
        assert_eq!(TtaEnsemble::from_manifest(&entries).unwrap(), e);
    }

    #[test]
    fn infer_with_constant_and_threshold_segmenters() {
        let v = ramp_volume([3, 4, 6]);
        let e = TtaEnsemble::enumerate(16, 5).unwrap();
        let constant = |x: &Volume| ProbMap::constant(*x.geometry(), 0.5);
        let preds = tta_infer(&constant, &v, &e).unwrap();
        assert_eq!(preds.len(), 16);
        for p in &preds {
            assert_eq!(p.geometry(), v.geometry());
            assert!(p.data().iter().all(|&x| x == 0.5));
        }

        let threshold = |x: &Volume| ProbMap::new(*x.geometry(), x.data().iter().map(|&i| f32::from(i > 0.5)).collect());
        let single = tta_infer(&threshold, &v, &TtaEnsemble::identity_only(0)).unwrap();
        assert_eq!(single, vec![threshold(&v).unwrap()]);

        let preds = tta_infer(&threshold, &v, &e).unwrap();
        for (t, p) in e.transforms().iter().zip(&preds) {
            if t.intensity.is_identity() {
                assert_eq!(p, &preds[0], "transform {} not equivariant", t.id);
            }
        }
    }

    #[test]
    fn failures_carry_transform_id() {
        let v = ramp_volume([2, 2, 2]);
        let e = TtaEnsemble::enumerate(4, 0).unwrap();
        let failing = |x: &Volume| {
            if x != &v {
                Err(Error::Validation("boom".into()))
            } else {
                ProbMap::constant(*x.geometry(), 0.1)
            }
        };
        match tta_infer(&failing, &v, &e) {
            Err(Error::Segmenter { id, .. }) => assert!(id > 0),
            other => panic!("unexpected {other:?}"),
        }
    }
}
