//! Synthetic 3D phantoms with controllable variability and domain shift, and
//! a simulated annotator backed by the phantoms' ground truth.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::toyseg::features::box_mean;
use crate::volume::{Geometry, Grid, Mask, ProbMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variability {
    /// One ellipsoid of moderate size near the centre, stable contrast.
    Low,
    /// One to three rotated blobs with wide size, eccentricity and contrast ranges.
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainShift {
    None,
    /// Foreground and background levels pulled toward their midpoint, leaving
    /// `1 - magnitude` of the original contrast.
    ContrastShift { magnitude: f64 },
    /// Drops the top `magnitude` fraction of the structure's z-extent.
    CropFov { magnitude: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Mean and per-case standard deviation of the foreground level.
    pub fg_intensity: (f64, f64),
    pub bg_intensity: (f64, f64),
    pub noise_sigma: f64,
    pub bias_field_amp: f64,
    pub variability: Variability,
    pub shift: DomainShift,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [48, 48, 48],
            spacing_mm: [1.0, 1.0, 1.0],
            fg_intensity: (0.75, 0.05),
            bg_intensity: (0.25, 0.05),
            noise_sigma: 0.12,
            bias_field_amp: 0.15,
            variability: Variability::Low,
            shift: DomainShift::None,
        }
    }
}

impl PhantomSpec {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("spec serializes")))
    }
}

/// One generated case.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub truth: Mask,
    /// First and last slice containing foreground.
    pub border: Option<(usize, usize)>,
}

struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    angle: f64,
}

impl Blob {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.center[1];
        let dx = x - self.center[2];
        let u = c * dy + s * dx;
        let v = -s * dy + c * dx;
        let dz = z - self.center[0];
        (dz / self.radii[0]).powi(2) + (u / self.radii[1]).powi(2) + (v / self.radii[2]).powi(2) <= 1.0
    }
}

fn draw_blobs(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> (Vec<Blob>, f64) {
    let dims = spec.shape.map(|n| n as f64);
    match spec.variability {
        Variability::Low => {
            let center = dims.map(|d| d / 2.0 + rng.random_range(-0.08..0.08) * d);
            let radii = dims.map(|d| rng.random_range(0.2..0.27) * d);
            (vec![Blob { center, radii, angle: rng.random_range(0.0..PI) }], 1.0)
        }
        Variability::High => {
            let count = rng.random_range(1..=3);
            let blobs = (0..count)
                .map(|_| {
                    let base = rng.random_range(0.1..0.28);
                    let radii = dims.map(|d| (base * rng.random_range(0.5..1.6) * d).max(1.5));
                    let center = dims.map(|d| rng.random_range(0.25..0.75) * d);
                    Blob { center, radii, angle: rng.random_range(0.0..PI) }
                })
                .collect();
            (blobs, rng.random_range(0.4..1.0))
        }
    }
}

/// Smooth multiplicative field in roughly `[-1, 1]`.
fn bias_field(geom: &Geometry, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let terms: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let freq = [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)];
            (freq, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let dims = geom.shape.map(|n| n as f64);
    let mut out = Vec::with_capacity(geom.len());
    for z in 0..geom.nz() {
        for y in 0..geom.ny() {
            for x in 0..geom.nx() {
                let p = [z as f64 / dims[0], y as f64 / dims[1], x as f64 / dims[2]];
                let s: f64 = terms
                    .iter()
                    .map(|(f, phase)| (PI * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2]) + phase).sin())
                    .sum();
                out.push(s / terms.len() as f64);
            }
        }
    }
    out
}

/// Deterministic phantom for `(spec, seed)`.
pub fn gen_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    if spec.shape.iter().any(|&n| n < 4) {
        return Err(Error::Generation(format!("shape {:?} too small", spec.shape)));
    }
    let geom = Geometry::new(spec.shape, spec.spacing_mm).map_err(|e| Error::Generation(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (blobs, contrast) = draw_blobs(spec, &mut rng);
    let truth = Mask::from_fn(geom, |z, y, x| {
        let p = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
        blobs.iter().any(|b| b.contains(p.0, p.1, p.2))
    });
    if truth.is_empty_mask() {
        return Err(Error::Generation("structure lies outside the grid".into()));
    }

    let jitter = |(mean, sd): (f64, f64), rng: &mut ChaCha8Rng| {
        if sd > 0.0 {
            mean + Normal::new(0.0, sd).expect("valid sd").sample(rng)
        } else {
            mean
        }
    };
    let bg = jitter(spec.bg_intensity, &mut rng);
    let fg_raw = jitter(spec.fg_intensity, &mut rng);
    let fg = bg + contrast * (fg_raw - bg);
    let field = bias_field(&geom, &mut rng);
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("valid sigma"));

    let squeeze = match spec.shift {
        DomainShift::ContrastShift { magnitude } => magnitude.clamp(0.0, 1.0),
        _ => 0.0,
    };
    let mid = 0.5 * (fg + bg);
    let data: Vec<f32> = truth
        .data()
        .iter()
        .zip(&field)
        .map(|(&m, &b)| {
            let mut clean = if m == 1 { fg } else { bg };
            if squeeze != 0.0 {
                clean = mid + (clean - mid) * (1.0 - squeeze);
            }
            let mut v = clean * (1.0 + spec.bias_field_amp * b);
            if let Some(n) = &noise {
                v += n.sample(&mut rng);
            }
            v as f32
        })
        .collect();
    let volume = Volume::new(geom, data)?;

    let (volume, truth) = match spec.shift {
        DomainShift::CropFov { magnitude } => {
            let (lo, hi) = truth.z_extent().expect("nonempty");
            let cut = ((hi - lo) as f64 * magnitude.clamp(0.0, 1.0)).round() as usize;
            let top = hi - cut.min(hi - lo);
            (volume.crop_z(0, top)?, truth.crop_z(0, top)?)
        }
        _ => (volume, truth),
    };
    let border = truth.z_extent();
    Ok(Phantom { volume, truth, border })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LabelNoise {
    #[default]
    None,
    /// Each voxel within `voxels` 6-connected steps of the boundary flips with
    /// probability one half.
    BoundaryJitter { voxels: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub label_noise: LabelNoise,
    pub seed: u64,
}

/// Multi-source BFS distance (6-connected steps) from every voxel to the
/// nearest voxel where `source` is true. `usize::MAX` when unreachable.
fn step_distance(geom: &Geometry, source: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut dist = vec![usize::MAX; geom.len()];
    let mut queue = VecDeque::new();
    for (i, d) in dist.iter_mut().enumerate() {
        if source(i) {
            *d = 0;
            queue.push_back(i);
        }
    }
    let [nz, ny, nx] = geom.shape;
    while let Some(i) = queue.pop_front() {
        let [z, y, x] = geom.coords(i);
        let next = dist[i] + 1;
        let mut visit = |j: usize| {
            if dist[j] == usize::MAX {
                dist[j] = next;
                queue.push_back(j);
            }
        };
        if z > 0 { visit(geom.index(z - 1, y, x)); }
        if z + 1 < nz { visit(geom.index(z + 1, y, x)); }
        if y > 0 { visit(geom.index(z, y - 1, x)); }
        if y + 1 < ny { visit(geom.index(z, y + 1, x)); }
        if x > 0 { visit(geom.index(z, y, x - 1)); }
        if x + 1 < nx { visit(geom.index(z, y, x + 1)); }
    }
    dist
}

/// Voxels eligible for boundary jitter: foreground within `band` steps of
/// background and background within `band` steps of foreground.
pub fn boundary_band(truth: &Mask, band: usize) -> Vec<bool> {
    let g = truth.geometry();
    let d = truth.data();
    let to_fg = step_distance(g, |i| d[i] == 1);
    let to_bg = step_distance(g, |i| d[i] == 0);
    (0..d.len())
        .map(|i| if d[i] == 1 { to_bg[i] <= band } else { to_fg[i] <= band })
        .collect()
}

fn case_seed(seed: u64, case_id: &str) -> u64 {
    let h = Sha256::digest(case_id.as_bytes());
    seed ^ u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Simulated annotator answering from stored ground truth.
#[derive(Clone, Debug, Default)]
pub struct Oracle {
    truths: BTreeMap<String, Mask>,
    config: OracleConfig,
}

impl Oracle {
    pub fn new(config: OracleConfig) -> Self {
        Self { truths: BTreeMap::new(), config }
    }

    pub fn insert(&mut self, case_id: impl Into<String>, truth: Mask) {
        self.truths.insert(case_id.into(), truth);
    }

    pub fn truth(&self, case_id: &str) -> Result<&Mask> {
        self.truths.get(case_id).ok_or_else(|| Error::UnknownCase(case_id.to_string()))
    }

    /// Manual segmentation of a case, with the configured label noise.
    pub fn annotate(&self, case_id: &str) -> Result<Mask> {
        let truth = self.truth(case_id)?;
        match self.config.label_noise {
            LabelNoise::None => Ok(truth.clone()),
            LabelNoise::BoundaryJitter { voxels } => {
                let band = boundary_band(truth, voxels);
                let mut rng = ChaCha8Rng::seed_from_u64(case_seed(self.config.seed, case_id));
                let data = truth
                    .data()
                    .iter()
                    .zip(&band)
                    .map(|(&v, &b)| if b && rng.random_bool(0.5) { 1 - v } else { v })
                    .collect();
                Mask::new(*truth.geometry(), data)
            }
        }
    }

    /// First and last slices containing the structure; `None` for empty truth.
    pub fn border_slices(&self, case_id: &str) -> Result<Option<(usize, usize)>> {
        Ok(self.truth(case_id)?.z_extent())
    }
}

/// Erodes (`grow = false`) or dilates by `r` 6-connected steps.
fn morph(m: &Mask, r: usize, grow: bool) -> Mask {
    if r == 0 {
        return m.clone();
    }
    let g = m.geometry();
    let d = m.data();
    let data = if grow {
        let to_fg = step_distance(g, |i| d[i] == 1);
        to_fg.iter().map(|&t| u8::from(t <= r)).collect()
    } else {
        let to_bg = step_distance(g, |i| d[i] == 0);
        to_bg.iter().map(|&t| u8::from(t > r)).collect()
    };
    Mask::new(*g, data).expect("binary")
}

/// Soft prediction derived from `truth` whose quality degrades with
/// `severity` in `[0, 1]`: boundary erosion or dilation, spherical
/// deletions and spurious blobs, then a box blur. Severity 0 returns the truth.
pub fn corrupt_prediction(truth: &Mask, severity: f64, seed: u64) -> Result<ProbMap> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::InvalidArgument(format!("severity {severity} outside [0, 1]")));
    }
    if severity == 0.0 {
        return Ok(truth.to_prob());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = *truth.geometry();
    let r = (severity * 3.0).round() as usize;
    let mut cur = morph(truth, r, rng.random_bool(0.5));

    let (lo, hi) = truth.z_extent().unwrap_or((0, geom.nz() - 1));
    let blobs = (severity * 6.0).round() as usize;
    let radius = 2.0 + severity * 6.0;
    let mut data = cur.data().to_vec();
    for _ in 0..blobs {
        let c = [
            rng.random_range(lo..=hi) as f64,
            rng.random_range(0..geom.ny()) as f64,
            rng.random_range(0..geom.nx()) as f64,
        ];
        let value = u8::from(rng.random_bool(0.4));
        for (i, v) in data.iter_mut().enumerate() {
            let [z, y, x] = geom.coords(i);
            let d2 = (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2);
            if d2 <= radius * radius {
                *v = value;
            }
        }
    }
    cur = Mask::new(geom, data)?;

    let as_volume = Volume::new(geom, cur.data().iter().map(|&v| f32::from(v)).collect())?;
    let blurred = box_mean(&as_volume, 1);
    ProbMap::from_grid(Grid::from_vec(geom, blurred.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;

    fn small(variability: Variability) -> PhantomSpec {
        PhantomSpec { shape: [24, 24, 24], variability, ..PhantomSpec::default() }
    }

    #[test]
    fn deterministic_and_bordered() {
        let spec = small(Variability::Low);
        let a = gen_phantom(&spec, 4).unwrap();
        assert_eq!(a, gen_phantom(&spec, 4).unwrap());
        assert_ne!(a.volume, gen_phantom(&spec, 5).unwrap().volume);
        let (lo, hi) = a.border.unwrap();
        assert_eq!(Some((lo, hi)), a.truth.z_extent());
        assert!(a.truth.count() > 0);
    }

    #[test]
    fn noiseless_phantom_separates_at_half() {
        let spec = PhantomSpec {
            fg_intensity: (1.0, 0.0),
            bg_intensity: (0.0, 0.0),
            noise_sigma: 0.0,
            bias_field_amp: 0.0,
            ..small(Variability::Low)
        };
        let p = gen_phantom(&spec, 1).unwrap();
        let recovered = Mask::new(
            *p.volume.geometry(),
            p.volume.data().iter().map(|&v| u8::from(v >= 0.5)).collect(),
        )
        .unwrap();
        assert_eq!(recovered, p.truth);
    }

    #[test]
    fn crop_fov_truncates_structure() {
        let spec = PhantomSpec { shift: DomainShift::CropFov { magnitude: 0.5 }, ..small(Variability::Low) };
        let full = gen_phantom(&small(Variability::Low), 2).unwrap();
        let cropped = gen_phantom(&spec, 2).unwrap();
        assert!(cropped.volume.shape()[0] < full.volume.shape()[0]);
        assert_eq!(cropped.border.unwrap().1, cropped.volume.shape()[0] - 1);
        assert!(cropped.truth.count() < full.truth.count());
    }

    #[test]
    fn degenerate_specs_fail() {
        let spec = PhantomSpec { shape: [2, 24, 24], ..PhantomSpec::default() };
        assert!(matches!(gen_phantom(&spec, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn oracle_answers_from_truth() {
        let p = gen_phantom(&small(Variability::Low), 3).unwrap();
        let mut oracle = Oracle::new(OracleConfig::default());
        oracle.insert("c", p.truth.clone());
        assert_eq!(oracle.annotate("c").unwrap(), p.truth);
        assert_eq!(oracle.border_slices("c").unwrap(), p.border);
        assert!(matches!(oracle.annotate("nope"), Err(Error::UnknownCase(_))));
    }

    #[test]
    fn border_of_known_extent() {
        let g = Geometry::unit([12, 4, 4]).unwrap();
        let mut oracle = Oracle::new(OracleConfig::default());
        oracle.insert("a", Mask::from_fn(g, |z, _, _| (3..=9).contains(&z)));
        oracle.insert("b", Mask::from_fn(g, |_, y, _| y == 1));
        oracle.insert("e", Mask::empty(g));
        assert_eq!(oracle.border_slices("a").unwrap(), Some((3, 9)));
        assert_eq!(oracle.border_slices("b").unwrap(), Some((0, 11)));
        assert_eq!(oracle.border_slices("e").unwrap(), None);
    }

    #[test]
    fn corruption_extremes() {
        let p = gen_phantom(&small(Variability::Low), 6).unwrap();
        let clean = corrupt_prediction(&p.truth, 0.0, 1).unwrap();
        assert_eq!(clean.to_mask(), p.truth);
        let a = corrupt_prediction(&p.truth, 0.7, 1).unwrap();
        assert_eq!(a, corrupt_prediction(&p.truth, 0.7, 1).unwrap());
        assert!(corrupt_prediction(&p.truth, 1.5, 1).is_err());
        assert!(dice(&a.to_mask(), &p.truth).unwrap() < 1.0);
    }
}
