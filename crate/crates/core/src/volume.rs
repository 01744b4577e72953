//! 3D scalar volumes and their raw + JSON sidecar file format.
//!
//! Storage is row-major over `dims = [d0, d1, d2]`. A volume in standard
//! orientation stores axial slices along axis 0 (inferior → superior),
//! coronal slices along axis 1 and sagittal slices along axis 2.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Mri,
    Ct,
    Mask,
    Field,
    Labels,
}

impl Modality {
    /// Background value written outside the body and into padding.
    pub fn background(self) -> f32 {
        match self {
            Modality::Ct => -1000.0,
            Modality::Field => 1.0,
            _ => 0.0,
        }
    }
}

/// Anatomical plane; also names the axis normal to that plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    /// Storage axis indexed by this plane in a standardized volume.
    pub fn axis(self) -> usize {
        match self {
            Plane::Axial => 0,
            Plane::Coronal => 1,
            Plane::Sagittal => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisOrientation {
    /// The anatomical axis this storage axis runs along.
    pub normal: Plane,
    /// True when the storage axis runs opposite to the standard direction.
    pub flipped: bool,
}

pub const STANDARD_ORIENTATION: [AxisOrientation; 3] = [
    AxisOrientation {
        normal: Plane::Axial,
        flipped: false,
    },
    AxisOrientation {
        normal: Plane::Coronal,
        flipped: false,
    },
    AxisOrientation {
        normal: Plane::Sagittal,
        flipped: false,
    },
];

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    /// Voxel spacing in mm along each storage axis.
    pub spacing: [f64; 3],
    pub modality: Modality,
    pub orientation: [AxisOrientation; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn filled(dims: [usize; 3], spacing: [f64; 3], modality: Modality, value: f32) -> Self {
        Volume {
            dims,
            spacing,
            modality,
            orientation: STANDARD_ORIENTATION,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_data(
        dims: [usize; 3],
        spacing: [f64; 3],
        modality: Modality,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "volume of dims {dims:?} cannot hold {} voxels",
                data.len()
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            modality,
            orientation: STANDARD_ORIENTATION,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn with_data(&self, modality: Modality, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            modality,
            orientation: self.orientation,
            data,
        }
    }

    pub fn check_same_grid(&self, other: &Volume, op: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "{op}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_standard_orientation(&self) -> bool {
        self.orientation == STANDARD_ORIENTATION
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    dtype: String,
    dims: [usize; 3],
    spacing: [f64; 3],
    modality: Modality,
    orientation: [AxisOrientation; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
}

const SIDECAR_FORMAT: &str = "fedsct-volume";
const SIDECAR_VERSION: u32 = 1;

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Write `stem.raw` (little-endian f32 voxels) and `stem.json` (metadata).
///
/// `mask_ref` names the stem of the matching body mask, if any.
pub fn write_volume(stem: &Path, vol: &Volume, mask_ref: Option<&str>) -> Result<()> {
    let raw = with_ext(stem, "raw");
    let json = with_ext(stem, "json");
    let mut bytes = Vec::with_capacity(vol.data.len() * 4);
    for v in &vol.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let sidecar = Sidecar {
        format: SIDECAR_FORMAT.into(),
        version: SIDECAR_VERSION,
        dtype: "f32le".into(),
        dims: vol.dims,
        spacing: vol.spacing,
        modality: vol.modality,
        orientation: vol.orientation,
        mask: mask_ref.map(str::to_string),
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
}

/// Read a volume written by [`write_volume`]; returns it with its mask reference.
pub fn read_volume(stem: &Path) -> Result<(Volume, Option<String>)> {
    let raw = with_ext(stem, "raw");
    let json = with_ext(stem, "json");
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let sc: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::format(&json, "sidecar", e.to_string()))?;
    if sc.format != SIDECAR_FORMAT {
        return Err(Error::format(&json, "format", format!("unexpected `{}`", sc.format)));
    }
    if sc.version != SIDECAR_VERSION {
        return Err(Error::format(&json, "version", format!("unsupported {}", sc.version)));
    }
    if sc.dtype != "f32le" {
        return Err(Error::format(&json, "dtype", format!("unsupported `{}`", sc.dtype)));
    }
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n: usize = sc.dims.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::format(
            &raw,
            "payload",
            format!("{} bytes for {} voxels", bytes.len(), n),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let vol = Volume {
        dims: sc.dims,
        spacing: sc.spacing,
        modality: sc.modality,
        orientation: sc.orientation,
        data,
    };
    Ok((vol, sc.mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| (i as f32).sin() * 1e3).collect();
        let mut v = Volume::from_data([2, 3, 4], [1.0, 0.5, 2.0], Modality::Ct, data).unwrap();
        v.orientation[0].flipped = true;
        let stem = dir.path().join("p0_ct");
        write_volume(&stem, &v, Some("p0_mask")).unwrap();
        let (back, mask) = read_volume(&stem).unwrap();
        assert_eq!(back, v);
        assert_eq!(mask.as_deref(), Some("p0_mask"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::filled([2, 2, 2], [1.0; 3], Modality::Mri, 0.5);
        let stem = dir.path().join("v");
        write_volume(&stem, &v, None).unwrap();
        let raw = dir.path().join("v.raw");
        let bytes = std::fs::read(&raw).unwrap();
        std::fs::write(&raw, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_volume(&stem).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }
}
