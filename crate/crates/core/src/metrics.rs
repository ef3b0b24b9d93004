//! Overlap and surface-distance metrics: Dice, Hausdorff 95th percentile and
//! slice-wise (2D) average symmetric surface distance.

use serde::{Deserialize, Serialize};

use crate::edt::{squared_edt_2d, squared_edt_3d};
use crate::error::Result;
use crate::volume::Mask;

/// Dice, Hausdorff95 and 2D ASSD for one prediction/reference pair.
/// Distances are `None` when undefined (empty inputs).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub dice: f64,
    pub hausdorff95_mm: Option<f64>,
    pub assd2d_mm: Option<f64>,
}

/// Handling of slices where exactly one of the two masks has foreground.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OneSidedSlices {
    #[default]
    Skip,
    /// Counts the slice with the in-plane field-of-view diagonal as its distance.
    DiagonalPenalty,
}

/// `2|A ∩ B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    a.geometry().ensure_same_shape(b.geometry())?;
    Ok(dice_slices(a.data(), b.data()))
}

pub(crate) fn dice_slices(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x & y) as usize;
        total += (x + y) as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Foreground voxels with at least one 6-neighbour that is background or
/// outside the grid, as `[z, y, x]` in z-major order.
pub fn surface_voxels(m: &Mask) -> Vec<[usize; 3]> {
    let [nz, ny, nx] = m.shape();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if m.is_set(z, y, x) && is_boundary_3d(m, z, y, x) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn is_boundary_3d(m: &Mask, z: usize, y: usize, x: usize) -> bool {
    let [nz, ny, nx] = m.shape();
    z == 0
        || y == 0
        || x == 0
        || z + 1 == nz
        || y + 1 == ny
        || x + 1 == nx
        || !m.is_set(z - 1, y, x)
        || !m.is_set(z + 1, y, x)
        || !m.is_set(z, y - 1, x)
        || !m.is_set(z, y + 1, x)
        || !m.is_set(z, y, x - 1)
        || !m.is_set(z, y, x + 1)
}

/// In-plane surface of slice `z`: foreground pixels with a 4-neighbour that is
/// background or outside the slice, as `[y, x]`.
pub fn surface_pixels_2d(m: &Mask, z: usize) -> Vec<[usize; 2]> {
    let [_, ny, nx] = m.shape();
    let mut out = Vec::new();
    for y in 0..ny {
        for x in 0..nx {
            if !m.is_set(z, y, x) {
                continue;
            }
            let boundary = y == 0
                || x == 0
                || y + 1 == ny
                || x + 1 == nx
                || !m.is_set(z, y - 1, x)
                || !m.is_set(z, y + 1, x)
                || !m.is_set(z, y, x - 1)
                || !m.is_set(z, y, x + 1);
            if boundary {
                out.push([y, x]);
            }
        }
    }
    out
}

/// 95th percentile (nearest rank) of the pooled distances from each surface
/// voxel of one mask to the nearest surface voxel of the other, in both
/// directions. `None` if either mask is empty.
pub fn hausdorff95(a: &Mask, b: &Mask) -> Result<Option<f64>> {
    a.geometry().ensure_same_shape(b.geometry())?;
    let sa = surface_voxels(a);
    let sb = surface_voxels(b);
    if sa.is_empty() || sb.is_empty() {
        return Ok(None);
    }
    let geom = a.geometry();
    let to_b = surface_field_3d(b, &sb);
    let to_a = surface_field_3d(a, &sa);
    let mut pooled: Vec<f64> = sa
        .iter()
        .map(|&[z, y, x]| to_b[geom.index(z, y, x)].sqrt())
        .chain(sb.iter().map(|&[z, y, x]| to_a[geom.index(z, y, x)].sqrt()))
        .collect();
    Ok(Some(nearest_rank(&mut pooled, 95)))
}

fn surface_field_3d(m: &Mask, surface: &[[usize; 3]]) -> Vec<f64> {
    let geom = m.geometry();
    let mut sites = vec![false; geom.len()];
    for &[z, y, x] in surface {
        sites[geom.index(z, y, x)] = true;
    }
    squared_edt_3d(geom.shape, geom.spacing_mm, &sites)
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 * n)` of
/// the ascending sort. Sorts `values` in place.
pub fn nearest_rank(values: &mut [f64], percentile: usize) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty list");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let rank = (percentile * n).div_ceil(100).max(1);
    values[rank - 1]
}

/// Mean over z-slices of the 2D average symmetric surface distance, using
/// in-plane spacing. Slices where both masks are empty never count; slices
/// with exactly one nonempty mask follow `one_sided`. `None` if no slice
/// qualifies.
pub fn assd2d_with(a: &Mask, b: &Mask, one_sided: OneSidedSlices) -> Result<Option<f64>> {
    a.geometry().ensure_same_shape(b.geometry())?;
    let geom = a.geometry();
    let [nz, ny, nx] = geom.shape;
    let plane = [geom.spacing_mm[1], geom.spacing_mm[2]];
    let diagonal = ((ny as f64 * plane[0]).powi(2) + (nx as f64 * plane[1]).powi(2)).sqrt();

    let mut sum = 0.0;
    let mut count = 0usize;
    for z in 0..nz {
        let sa = surface_pixels_2d(a, z);
        let sb = surface_pixels_2d(b, z);
        match (sa.is_empty(), sb.is_empty()) {
            (true, true) => continue,
            (false, false) => {
                let to_b = surface_field_2d([ny, nx], plane, &sb);
                let to_a = surface_field_2d([ny, nx], plane, &sa);
                let total: f64 = sa.iter().map(|&[y, x]| to_b[y * nx + x].sqrt()).sum::<f64>()
                    + sb.iter().map(|&[y, x]| to_a[y * nx + x].sqrt()).sum::<f64>();
                sum += total / (sa.len() + sb.len()) as f64;
                count += 1;
            }
            _ => {
                if one_sided == OneSidedSlices::DiagonalPenalty {
                    sum += diagonal;
                    count += 1;
                }
            }
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

pub fn assd2d(a: &Mask, b: &Mask) -> Result<Option<f64>> {
    assd2d_with(a, b, OneSidedSlices::Skip)
}

fn surface_field_2d(shape: [usize; 2], spacing: [f64; 2], surface: &[[usize; 2]]) -> Vec<f64> {
    let mut sites = vec![false; shape[0] * shape[1]];
    for &[y, x] in surface {
        sites[y * shape[1] + x] = true;
    }
    squared_edt_2d(shape, spacing, &sites)
}

/// All three metrics of `pred` against `truth`.
pub fn evaluate(pred: &Mask, truth: &Mask) -> Result<MetricResult> {
    Ok(MetricResult {
        dice: dice(pred, truth)?,
        hausdorff95_mm: hausdorff95(pred, truth)?,
        assd2d_mm: assd2d(pred, truth)?,
    })
}
