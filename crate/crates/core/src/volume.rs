//! Volumetric grids: intensity volumes, soft probability maps and binary masks.
//!
//! All grids are stored z-major (`index = (z * ny + y) * nx + x`), with the z
//! axis being the slice axis.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid shape and physical voxel spacing, both ordered `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
}

impl Geometry {
    pub fn new(shape: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::InvalidGeometry(format!("zero-sized shape {shape:?}")));
        }
        if spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGeometry(format!(
                "spacing must be positive and finite, got {spacing_mm:?}"
            )));
        }
        Ok(Self { shape, spacing_mm })
    }

    pub fn unit(shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, [1.0; 3])
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nz(&self) -> usize {
        self.shape[0]
    }

    pub fn ny(&self) -> usize {
        self.shape[1]
    }

    pub fn nx(&self) -> usize {
        self.shape[2]
    }

    pub fn slice_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.shape[2];
        let rest = index / self.shape[2];
        [rest / self.shape[1], rest % self.shape[1], x]
    }

    pub fn ensure_same_shape(&self, other: &Geometry) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { left: self.shape, right: other.shape });
        }
        Ok(())
    }

    /// Checks that a `(z_lo, z_hi)` slice range lies inside this grid.
    pub fn check_z_range(&self, range: (usize, usize)) -> Result<()> {
        let (lo, hi) = range;
        if lo > hi || hi >= self.nz() {
            return Err(Error::InvalidArgument(format!(
                "slice range ({lo}, {hi}) outside 0..{}",
                self.nz()
            )));
        }
        Ok(())
    }
}

/// Dense 3D grid with geometry. The typed wrappers [`Volume`], [`ProbMap`]
/// and [`Mask`] enforce value invariants on top of it.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    geom: Geometry,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn from_vec(geom: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::InvalidGeometry(format!(
                "expected {} voxels for shape {:?}, got {}",
                geom.len(),
                geom.shape,
                data.len()
            )));
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: Geometry, value: T) -> Self {
        Self { data: vec![value; geom.len()], geom }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(geom.len());
        for z in 0..geom.nz() {
            for y in 0..geom.ny() {
                for x in 0..geom.nx() {
                    data.push(f(z, y, x));
                }
            }
        }
        Self { geom, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geom.shape
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.geom.spacing_mm
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.geom.index(z, y, x)]
    }

    pub fn slice_z(&self, z: usize) -> &[T] {
        let n = self.geom.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { geom: self.geom, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Builds a grid of shape `out` where each output voxel reads the input
    /// voxel returned by `src`.
    fn remap(&self, out: Geometry, src: impl Fn(usize, usize, usize) -> [usize; 3]) -> Self {
        Grid::from_fn(out, |z, y, x| {
            let [sz, sy, sx] = src(z, y, x);
            self.get(sz, sy, sx)
        })
    }

    /// Reverses the order of voxels along `axis` (0 = z, 1 = y, 2 = x).
    pub fn flip(&self, axis: usize) -> Self {
        let [nz, ny, nx] = self.geom.shape;
        match axis {
            0 => self.remap(self.geom, |z, y, x| [nz - 1 - z, y, x]),
            1 => self.remap(self.geom, |z, y, x| [z, ny - 1 - y, x]),
            2 => self.remap(self.geom, |z, y, x| [z, y, nx - 1 - x]),
            _ => panic!("axis {axis} out of range"),
        }
    }

    /// Swaps the in-plane y and x axes.
    pub fn transpose_yx(&self) -> Self {
        let [nz, ny, nx] = self.geom.shape;
        let [sz, sy, sx] = self.geom.spacing_mm;
        let out = Geometry { shape: [nz, nx, ny], spacing_mm: [sz, sx, sy] };
        self.remap(out, |z, y, x| [z, x, y])
    }

    /// Rotates each slice by `k` quarter turns counter-clockwise in the y-x
    /// plane (numpy `rot90(m, k, axes=(1, 2))` convention).
    pub fn rot90_yx(&self, k: u8) -> Self {
        let [nz, ny, nx] = self.geom.shape;
        let [sz, sy, sx] = self.geom.spacing_mm;
        match k % 4 {
            0 => self.clone(),
            1 => {
                let out = Geometry { shape: [nz, nx, ny], spacing_mm: [sz, sx, sy] };
                self.remap(out, |z, y, x| [z, x, nx - 1 - y])
            }
            2 => self.remap(self.geom, |z, y, x| [z, ny - 1 - y, nx - 1 - x]),
            _ => {
                let out = Geometry { shape: [nz, nx, ny], spacing_mm: [sz, sx, sy] };
                self.remap(out, |z, y, x| [z, ny - 1 - x, y])
            }
        }
    }

    /// Returns the sub-grid covering slices `z_lo..=z_hi`.
    pub fn crop_z(&self, z_lo: usize, z_hi: usize) -> Result<Self> {
        self.geom.check_z_range((z_lo, z_hi))?;
        let n = self.geom.slice_len();
        let geom = Geometry {
            shape: [z_hi - z_lo + 1, self.geom.ny(), self.geom.nx()],
            spacing_mm: self.geom.spacing_mm,
        };
        Ok(Grid { geom, data: self.data[z_lo * n..(z_hi + 1) * n].to_vec() })
    }
}

impl<T: Copy + Default> Grid<T> {
    /// Zeroes every slice outside `z_lo..=z_hi`.
    pub fn zero_outside_z(&self, range: (usize, usize)) -> Result<Self> {
        self.geom.check_z_range(range)?;
        let n = self.geom.slice_len();
        let mut data = self.data.clone();
        for (z, slab) in data.chunks_mut(n).enumerate() {
            if z < range.0 || z > range.1 {
                slab.fill(T::default());
            }
        }
        Ok(Grid { geom: self.geom, data })
    }
}

macro_rules! grid_newtype {
    ($name:ident, $t:ty) => {
        impl Deref for $name {
            type Target = Grid<$t>;
            fn deref(&self) -> &Grid<$t> {
                &self.0
            }
        }

        impl $name {
            pub fn into_grid(self) -> Grid<$t> {
                self.0
            }

            pub fn flip(&self, axis: usize) -> Self {
                Self(self.0.flip(axis))
            }

            pub fn transpose_yx(&self) -> Self {
                Self(self.0.transpose_yx())
            }

            pub fn rot90_yx(&self, k: u8) -> Self {
                Self(self.0.rot90_yx(k))
            }

            pub fn crop_z(&self, z_lo: usize, z_hi: usize) -> Result<Self> {
                Ok(Self(self.0.crop_z(z_lo, z_hi)?))
            }
        }
    };
}

/// Scan intensities. Every value is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume(Grid<f32>);

/// Soft segmentation prediction with every voxel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(Grid<f32>);

/// Binary segmentation with every voxel in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(Grid<u8>);

grid_newtype!(Volume, f32);
grid_newtype!(ProbMap, f32);
grid_newtype!(Mask, u8);

impl Volume {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        Self::from_grid(Grid::from_vec(geom, data)?)
    }

    pub fn from_grid(grid: Grid<f32>) -> Result<Self> {
        if let Some(i) = grid.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite intensity at voxel {i}")));
        }
        Ok(Self(grid))
    }

    /// `(min, max)` of the intensities.
    pub fn intensity_range(&self) -> (f32, f32) {
        self.0.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    /// Applies `f` to every intensity. Fails if the result is non-finite.
    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::from_grid(self.0.map(f))
    }
}

impl ProbMap {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        Self::from_grid(Grid::from_vec(geom, data)?)
    }

    pub fn from_grid(grid: Grid<f32>) -> Result<Self> {
        if let Some(i) = grid.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue(format!(
                "probability {} at voxel {i} outside [0, 1]",
                grid.data[i]
            )));
        }
        Ok(Self(grid))
    }

    pub fn constant(geom: Geometry, value: f32) -> Result<Self> {
        Self::from_grid(Grid::filled(geom, value))
    }

    /// Voxel is foreground iff `p >= t`. `t` must lie strictly inside `(0, 1)`.
    pub fn binarize(&self, t: f32) -> Result<Mask> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::InvalidArgument(format!("threshold {t} outside (0, 1)")));
        }
        Ok(Mask(self.0.map(|p| u8::from(p >= t))))
    }

    /// Binarization at the 0.5 median-mask threshold.
    pub fn to_mask(&self) -> Mask {
        Mask(self.0.map(|p| u8::from(p >= 0.5)))
    }

    pub fn zero_outside_z(&self, range: (usize, usize)) -> Result<Self> {
        Ok(Self(self.0.zero_outside_z(range)?))
    }
}

impl Mask {
    pub fn new(geom: Geometry, data: Vec<u8>) -> Result<Self> {
        Self::from_grid(Grid::from_vec(geom, data)?)
    }

    pub fn from_grid(grid: Grid<u8>) -> Result<Self> {
        if let Some(i) = grid.data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidValue(format!("mask value {} at voxel {i}", grid.data[i])));
        }
        Ok(Self(grid))
    }

    pub fn from_fn(geom: Geometry, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        Self(Grid::from_fn(geom, |z, y, x| u8::from(f(z, y, x))))
    }

    pub fn empty(geom: Geometry) -> Self {
        Self(Grid::filled(geom, 0))
    }

    pub fn count(&self) -> usize {
        self.0.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.0.data.iter().all(|&v| v == 0)
    }

    #[inline]
    pub fn is_set(&self, z: usize, y: usize, x: usize) -> bool {
        self.get(z, y, x) != 0
    }

    pub fn to_prob(&self) -> ProbMap {
        ProbMap(self.0.map(f32::from))
    }

    /// `(z_lo, z_hi)` of the nonempty slices, or `None` for an empty mask.
    pub fn z_extent(&self) -> Option<(usize, usize)> {
        let nz = self.geometry().nz();
        let occupied = |z: &usize| self.slice_z(*z).iter().any(|&v| v != 0);
        let lo = (0..nz).find(occupied)?;
        let hi = (0..nz).rev().find(occupied)?;
        Some((lo, hi))
    }

    pub fn zero_outside_z(&self, range: (usize, usize)) -> Result<Self> {
        Ok(Self(self.0.zero_outside_z(range)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 3]) -> Volume {
        let geom = Geometry::new(shape, [1.0, 0.5, 2.0]).unwrap();
        Volume::new(geom, (0..geom.len()).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_geometry_and_values() {
        assert!(Geometry::new([0, 2, 2], [1.0; 3]).is_err());
        assert!(Geometry::new([1, 2, 2], [1.0, -1.0, 1.0]).is_err());
        let g = Geometry::unit([1, 1, 2]).unwrap();
        assert!(Volume::new(g, vec![0.0, f32::NAN]).is_err());
        assert!(ProbMap::new(g, vec![0.0, 1.5]).is_err());
        assert!(Mask::new(g, vec![0, 2]).is_err());
        assert!(Mask::new(g, vec![0]).is_err());
    }

    #[test]
    fn binarize_uses_inclusive_threshold() {
        let g = Geometry::unit([1, 1, 3]).unwrap();
        let p = ProbMap::new(g, vec![0.49, 0.50, 0.51]).unwrap();
        assert_eq!(p.binarize(0.5).unwrap().data(), &[0, 1, 1]);
        assert!(ProbMap::constant(g, 0.0).unwrap().binarize(0.5).unwrap().is_empty_mask());
        assert_eq!(ProbMap::constant(g, 1.0).unwrap().binarize(0.5).unwrap().count(), 3);
        assert!(p.binarize(0.0).is_err());
        assert!(p.binarize(1.0).is_err());
    }

    #[test]
    fn rotations_compose_to_identity() {
        let v = ramp([2, 3, 4]);
        let r1 = v.rot90_yx(1);
        assert_eq!(r1.shape(), [2, 4, 3]);
        assert_eq!(r1.spacing_mm(), [1.0, 2.0, 0.5]);
        assert_eq!(r1.rot90_yx(3), v);
        assert_eq!(v.rot90_yx(2).rot90_yx(2), v);
        assert_eq!(r1.rot90_yx(1), v.rot90_yx(2));
        assert_eq!(v.transpose_yx().transpose_yx(), v);
        for axis in 0..3 {
            assert_eq!(v.flip(axis).flip(axis), v);
        }
    }

    #[test]
    fn rot90_matches_numpy_convention() {
        // m = [[0, 1], [2, 3]] -> rot90(m) = [[1, 3], [0, 2]]
        let g = Geometry::unit([1, 2, 2]).unwrap();
        let v = Volume::new(g, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(v.rot90_yx(1).data(), &[1.0, 3.0, 0.0, 2.0]);
    }

    #[test]
    fn z_extent_and_border_zeroing() {
        let g = Geometry::unit([5, 2, 2]).unwrap();
        let m = Mask::from_fn(g, |z, _, x| (1..=3).contains(&z) && x == 0);
        assert_eq!(m.z_extent(), Some((1, 3)));
        assert_eq!(Mask::empty(g).z_extent(), None);
        let cut = m.zero_outside_z((2, 4)).unwrap();
        assert_eq!(cut.z_extent(), Some((2, 3)));
        assert!(m.zero_outside_z((3, 5)).is_err());
        assert!(m.zero_outside_z((3, 2)).is_err());
    }
}
