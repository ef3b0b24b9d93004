//! Per-voxel features: intensity, box means at radii 1 and 2, squared
//! intensity and normalized slice position.

use serde::{Deserialize, Serialize};

use crate::volume::Volume;

/// Per-volume intensity normalization applied before feature extraction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Raw intensities.
    #[default]
    None,
    /// Zero mean and unit variance over the whole volume.
    ZScore,
}

impl Normalization {
    pub fn apply(&self, v: &Volume) -> Volume {
        match self {
            Normalization::None => v.clone(),
            Normalization::ZScore => {
                let n = v.data().len() as f64;
                let mean = v.data().iter().map(|&x| f64::from(x)).sum::<f64>() / n;
                let var = v.data().iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
                let sd = if var > 1e-12 { var.sqrt() } else { 1.0 };
                v.map_values(|x| ((f64::from(x) - mean) / sd) as f32).expect("finite")
            }
        }
    }
}

pub const RAW_FEATURES: usize = 5;
/// Raw features plus the bias term.
pub const NUM_FEATURES: usize = RAW_FEATURES + 1;

/// Mean over the in-bounds part of a `(2r+1)^3` box, computed separably.
pub fn box_mean(v: &Volume, r: usize) -> Vec<f32> {
    let [nz, ny, nx] = v.shape();
    let mut cur: Vec<f64> = v.data().iter().map(|&x| f64::from(x)).collect();
    let strides = [ny * nx, nx, 1];
    let dims = [nz, ny, nx];
    let mut line = Vec::new();
    let mut prefix = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let mut next = cur.clone();
        for start in 0..cur.len() {
            let coord = (start / stride) % n;
            if coord != 0 {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|i| cur[start + i * stride]));
            prefix.clear();
            prefix.push(0.0);
            let mut acc = 0.0;
            for &x in &line {
                acc += x;
                prefix.push(acc);
            }
            for i in 0..n {
                let lo = i.saturating_sub(r);
                let hi = (i + r + 1).min(n);
                next[start + i * stride] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
            }
        }
        cur = next;
    }
    cur.into_iter().map(|x| x as f32).collect()
}

/// Raw feature rows of the normalized volume, one per voxel in z-major order.
pub fn raw_features(v: &Volume, norm: Normalization) -> Vec<[f32; RAW_FEATURES]> {
    let owned;
    let v = match norm {
        Normalization::None => v,
        _ => {
            owned = norm.apply(v);
            &owned
        }
    };
    let nz = v.shape()[0];
    let slice = v.geometry().slice_len();
    let s1 = box_mean(v, 1);
    let s2 = box_mean(v, 2);
    let zscale = if nz > 1 { 1.0 / (nz - 1) as f32 } else { 0.0 };
    v.data()
        .iter()
        .enumerate()
        .map(|(i, &x)| [x, s1[i], s2[i], x * x, (i / slice) as f32 * zscale])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    #[test]
    fn box_mean_matches_direct_average() {
        let g = Geometry::unit([4, 5, 3]).unwrap();
        let v = Volume::new(g, (0..60).map(|i| ((i * 7) % 11) as f32).collect()).unwrap();
        let fast = box_mean(&v, 1);
        for z in 0..4usize {
            for y in 0..5usize {
                for x in 0..3usize {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    for dz in z.saturating_sub(1)..(z + 2).min(4) {
                        for dy in y.saturating_sub(1)..(y + 2).min(5) {
                            for dx in x.saturating_sub(1)..(x + 2).min(3) {
                                sum += v.get(dz, dy, dx);
                                n += 1.0;
                            }
                        }
                    }
                    assert!((fast[g.index(z, y, x)] - sum / n).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn constant_volume_features() {
        let g = Geometry::unit([3, 2, 2]).unwrap();
        let v = Volume::new(g, vec![2.0; 12]).unwrap();
        let f = raw_features(&v, Normalization::None);
        assert_eq!(f[0], [2.0, 2.0, 2.0, 4.0, 0.0]);
        assert_eq!(f[11][4], 1.0);
    }
}
