//! `svol` file format: a JSON header plus a sibling raw payload of
//! little-endian `f32` values in z-major order.
//!
//! ```json
//! {"shape":[nz,ny,nx],"spacing_mm":[sz,sy,sx],"kind":"mask","dtype":"f32le"}
//! ```
//!
//! The header lives at `<stem>.json` and the payload at `<stem>.raw`. Masks are
//! stored as `0.0` / `1.0`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Grid, Mask, ProbMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SvolKind {
    Intensity,
    Prob,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvolHeader {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub kind: SvolKind,
    pub dtype: String,
}

pub const DTYPE: &str = "f32le";

/// Payload path belonging to a header path.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn write_raw(header_path: &Path, geom: &Geometry, kind: SvolKind, values: &[f32]) -> Result<()> {
    let header = SvolHeader {
        shape: geom.shape,
        spacing_mm: geom.spacing_mm,
        kind,
        dtype: DTYPE.to_string(),
    };
    if let Some(dir) = header_path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(payload_path(header_path), bytes)?;
    fs::write(header_path, serde_json::to_vec(&header)?)?;
    Ok(())
}

fn read_raw(header_path: &Path, expected: SvolKind) -> Result<(Geometry, Vec<f32>)> {
    let header: SvolHeader = serde_json::from_slice(&fs::read(header_path)?)?;
    if header.dtype != DTYPE {
        return Err(Error::Validation(format!(
            "{}: unsupported dtype `{}`",
            header_path.display(),
            header.dtype
        )));
    }
    if header.kind != expected {
        return Err(Error::Validation(format!(
            "{}: expected kind {expected:?}, found {:?}",
            header_path.display(),
            header.kind
        )));
    }
    let geom = Geometry::new(header.shape, header.spacing_mm)?;
    let bytes = fs::read(payload_path(header_path))?;
    if bytes.len() != geom.len() * 4 {
        return Err(Error::Validation(format!(
            "{}: payload has {} bytes, expected {}",
            header_path.display(),
            bytes.len(),
            geom.len() * 4
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((geom, values))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_raw(path, v.geometry(), SvolKind::Intensity, v.data())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (g, data) = read_raw(path, SvolKind::Intensity)?;
    Volume::new(g, data)
}

pub fn write_prob(path: &Path, p: &ProbMap) -> Result<()> {
    write_raw(path, p.geometry(), SvolKind::Prob, p.data())
}

pub fn read_prob(path: &Path) -> Result<ProbMap> {
    let (g, data) = read_raw(path, SvolKind::Prob)?;
    ProbMap::new(g, data)
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    let values: Vec<f32> = m.data().iter().map(|&v| f32::from(v)).collect();
    write_raw(path, m.geometry(), SvolKind::Mask, &values)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let (g, data) = read_raw(path, SvolKind::Mask)?;
    let mut bits = Vec::with_capacity(data.len());
    for (i, v) in data.into_iter().enumerate() {
        bits.push(match v {
            0.0 => 0,
            1.0 => 1,
            _ => {
                return Err(Error::InvalidValue(format!(
                    "{}: mask voxel {i} has value {v}",
                    path.display()
                )))
            }
        });
    }
    Mask::from_grid(Grid::from_vec(g, bits)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload_layout() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([2, 1, 2], [2.5, 1.0, 0.5]).unwrap();
        let v = Volume::new(g, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let path = dir.path().join("case.json");
        write_volume(&path, &v).unwrap();

        let header: serde_json::Value =
            serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        assert_eq!(header["kind"], "intensity");
        assert_eq!(header["dtype"], "f32le");
        assert_eq!(header["shape"], serde_json::json!([2, 1, 2]));
        let raw = fs::read(dir.path().join("case.raw")).unwrap();
        assert_eq!(raw.len(), 16);
        assert_eq!(&raw[4..8], &(-2.0f32).to_le_bytes());

        assert_eq!(read_volume(&path).unwrap(), v);
        assert!(read_prob(&path).is_err(), "kind mismatch must be rejected");
    }

    #[test]
    fn mask_stored_as_floats() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::unit([1, 2, 2]).unwrap();
        let m = Mask::new(g, vec![0, 1, 1, 0]).unwrap();
        let path = dir.path().join("m.json");
        write_mask(&path, &m).unwrap();
        assert_eq!(&fs::read(dir.path().join("m.raw")).unwrap()[4..8], &1.0f32.to_le_bytes());
        assert_eq!(read_mask(&path).unwrap(), m);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::unit([1, 2, 2]).unwrap();
        let p = ProbMap::constant(g, 0.25).unwrap();
        let path = dir.path().join("p.json");
        write_prob(&path, &p).unwrap();
        fs::write(dir.path().join("p.raw"), [0u8; 8]).unwrap();
        assert!(matches!(read_prob(&path), Err(Error::Validation(_))));
    }
}
