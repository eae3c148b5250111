//! `.cvol` volume files and JSON acquisition manifests.
//!
//! A `.cvol` file is a single-line UTF-8 JSON header followed by `"\n\0"`,
//! then little-endian `f32` voxel data (channels interleaved, x fastest) and,
//! when the header says so, one `0`/`1` mask byte per voxel.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{Grid, RigidTransform, ScalarVolume, TensorVolume, View, ViewGeometry};
use crate::error::{Error, Result};
use crate::symcalc::Sym3;

pub const CVOL_MAGIC: &str = "CVOL1";
const HEADER_TERMINATOR: &[u8] = b"\n\0";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    kind: Kind,
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    channels: usize,
    mask: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Scalar,
    Tensor6,
}

impl Kind {
    fn channels(self) -> usize {
        match self {
            Kind::Scalar => 1,
            Kind::Tensor6 => 6,
        }
    }
}

fn encode(grid: &Grid, kind: Kind, values: impl Iterator<Item = f32>, mask: Option<&[bool]>) -> Result<Vec<u8>> {
    let header = Header {
        magic: CVOL_MAGIC.to_string(),
        kind,
        dims: grid.dims,
        spacing: grid.spacing,
        origin: grid.origin,
        channels: kind.channels(),
        mask: mask.is_some(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.extend_from_slice(HEADER_TERMINATOR);
    out.reserve(grid.len() * (4 * kind.channels() + 1));
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(m) = mask {
        out.extend(m.iter().map(|&b| b as u8));
    }
    Ok(out)
}

struct Decoded {
    grid: Grid,
    values: Vec<f32>,
    mask: Option<Vec<bool>>,
}

fn decode(path: &Path, bytes: &[u8], expect: Kind) -> Result<Decoded> {
    let end = bytes
        .windows(HEADER_TERMINATOR.len())
        .position(|w| w == HEADER_TERMINATOR)
        .ok_or_else(|| Error::format(path, "header terminator (newline + NUL) not found"))?;
    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|e| Error::format(path, format!("header is not UTF-8 (byte {})", e.valid_up_to())))?;
    let header: Header = serde_json::from_str(text)
        .map_err(|e| Error::format(path, format!("bad header at column {}: {e}", e.column())))?;

    if header.magic != CVOL_MAGIC {
        return Err(Error::format(path, format!("magic {:?}, expected {CVOL_MAGIC:?}", header.magic)));
    }
    if header.kind != expect {
        return Err(Error::format(path, format!("kind {:?}, expected {:?}", header.kind, expect)));
    }
    if header.channels != expect.channels() {
        return Err(Error::format(
            path,
            format!("{} channels for kind {:?}", header.channels, header.kind),
        ));
    }
    let grid = Grid {
        dims: header.dims,
        spacing: header.spacing,
        origin: header.origin,
    };
    grid.validate().map_err(|e| Error::format(path, e.to_string()))?;

    let body = &bytes[end + HEADER_TERMINATOR.len()..];
    let n = grid.len();
    let value_bytes = n * header.channels * 4;
    let expected = value_bytes + if header.mask { n } else { 0 };
    if body.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "expected {expected} bytes of voxel data after the header, found {}",
                body.len()
            ),
        ));
    }

    let mut values = Vec::with_capacity(n * header.channels);
    for (k, chunk) in body[..value_bytes].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            let voxel = k / header.channels;
            return Err(Error::format(
                path,
                format!(
                    "non-finite value at voxel {:?} channel {} (byte offset {})",
                    grid.coords(voxel),
                    k % header.channels,
                    end + HEADER_TERMINATOR.len() + 4 * k
                ),
            ));
        }
        values.push(v);
    }

    let mask = if header.mask {
        let raw = &body[value_bytes..];
        let mut m = Vec::with_capacity(n);
        for (k, &b) in raw.iter().enumerate() {
            match b {
                0 => m.push(false),
                1 => m.push(true),
                other => {
                    return Err(Error::format(
                        path,
                        format!("mask byte {other} at voxel {:?} is not 0 or 1", grid.coords(k)),
                    ))
                }
            }
        }
        Some(m)
    } else {
        None
    };
    Ok(Decoded { grid, values, mask })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_volume(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(vol.grid(), Kind::Scalar, vol.data().iter().copied(), vol.mask())?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    let path = path.as_ref();
    let d = decode(path, &read_bytes(path)?, Kind::Scalar)?;
    ScalarVolume::new(d.grid, d.values, d.mask)
}

/// Parameters are stored as `f32`; values already representable in `f32`
/// survive a round trip bit-exactly.
pub fn write_tensor(vol: &TensorVolume, path: impl AsRef<Path>) -> Result<()> {
    let values = vol.params().iter().flat_map(|p| p.0.map(|v| v as f32));
    let bytes = encode(vol.grid(), Kind::Tensor6, values, vol.mask())?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorVolume> {
    let path = path.as_ref();
    let d = decode(path, &read_bytes(path)?, Kind::Tensor6)?;
    let params = d
        .values
        .chunks_exact(6)
        .map(|c| Sym3([c[0], c[1], c[2], c[3], c[4], c[5]].map(f64::from)))
        .collect();
    TensorVolume::new(d.grid, params, d.mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformRecord {
    /// Row-major 3×3.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl TransformRecord {
    pub fn identity() -> Self {
        TransformRecord::from(&RigidTransform::identity())
    }

    pub fn to_transform(&self) -> Result<RigidTransform> {
        RigidTransform::new(Matrix3::from_row_slice(&self.rotation), Vector3::from(self.translation))
    }
}

impl From<&RigidTransform> for TransformRecord {
    fn from(t: &RigidTransform) -> Self {
        let r = t.rotation();
        TransformRecord {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [t.translation()[0], t.translation()[1], t.translation()[2]],
        }
    }
}

/// One line of an acquisition manifest. `volume` is resolved relative to
/// the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionEntry {
    pub volume: String,
    pub direction: [f64; 3],
    pub transform: TransformRecord,
}

pub fn write_manifest(entries: &[AcquisitionEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(entries)?;
    text.push('\n');
    write_bytes(path.as_ref(), text.as_bytes())
}

/// Loads every volume named in the manifest, in manifest order.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<View>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<AcquisitionEntry> = serde_json::from_str(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_else(PathBuf::new);
    entries
        .iter()
        .map(|e| {
            let volume = read_volume(base.join(&e.volume))?;
            let geometry = ViewGeometry::new(Vector3::from(e.direction), e.transform.to_transform()?, e.volume.clone())?;
            Ok(View { volume, geometry })
        })
        .collect()
}
