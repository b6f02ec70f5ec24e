//! Raw volume files: a JSON header `<stem>.json` next to a little-endian
//! blob `<stem>.raw`.
//!
//! Header example:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "shape": [4, 155, 240, 240],
//!   "dtype": "f32",
//!   "spacing_mm": [1.0, 1.0, 1.0],
//!   "axis_order": "C,D,H,W; W fastest",
//!   "endianness": "little"
//! }
//! ```
//!
//! To bridge from NIfTI, copy the voxel grid in C order with the last axis
//! varying fastest, take `spacing_mm` from `pixdim[1..4]` reordered to
//! D, H, W, and store intensities as `f32` or labels as `u8`.

use std::path::{Path, PathBuf};

use hnfnet::tensor::Dims3;
use hnfnet::{LabelMap, Tensor4};
use serde::{Deserialize, Serialize};

use crate::error::{IoError, IoResult};
use crate::fsutil::{read, read_json, to_json, write_atomic};

pub const VOLUME_FORMAT_VERSION: u32 = 1;
pub const AXIS_ORDER: &str = "C,D,H,W; W fastest";
pub const ENDIANNESS: &str = "little";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub format_version: u32,
    /// `[C, D, H, W]` or `[D, H, W]`.
    pub shape: Vec<usize>,
    pub dtype: String,
    pub spacing_mm: [f64; 3],
    pub axis_order: String,
    pub endianness: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    Intensity(Tensor4),
    Labels(LabelMap),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: VolumeData,
    pub spacing_mm: [f64; 3],
}

impl Volume {
    pub fn intensity(t: Tensor4, spacing_mm: [f64; 3]) -> Self {
        Self {
            data: VolumeData::Intensity(t),
            spacing_mm,
        }
    }

    pub fn labels(l: LabelMap, spacing_mm: [f64; 3]) -> Self {
        Self {
            data: VolumeData::Labels(l),
            spacing_mm,
        }
    }

    pub fn dims(&self) -> Dims3 {
        match &self.data {
            VolumeData::Intensity(t) => t.dims(),
            VolumeData::Labels(l) => l.dims(),
        }
    }

    /// The intensity tensor, or a validation error naming `path`.
    pub fn into_intensity(self, path: &Path) -> IoResult<Tensor4> {
        match self.data {
            VolumeData::Intensity(t) => Ok(t),
            VolumeData::Labels(_) => Err(IoError::format(path, "dtype: expected f32 intensities, found u8 labels")),
        }
    }

    pub fn into_labels(self, path: &Path) -> IoResult<LabelMap> {
        match self.data {
            VolumeData::Labels(l) => Ok(l),
            VolumeData::Intensity(_) => Err(IoError::format(path, "dtype: expected u8 labels, found f32 intensities")),
        }
    }
}

/// `(header, blob)` paths for any of `stem`, `stem.json` or `stem.raw`.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("raw"))
}

fn header_for(volume: &Volume) -> VolumeHeader {
    let (shape, dtype) = match &volume.data {
        VolumeData::Intensity(t) => {
            let [d, h, w] = t.dims();
            (vec![t.channels(), d, h, w], "f32")
        }
        VolumeData::Labels(l) => (l.dims().to_vec(), "u8"),
    };
    VolumeHeader {
        format_version: VOLUME_FORMAT_VERSION,
        shape,
        dtype: dtype.into(),
        spacing_mm: volume.spacing_mm,
        axis_order: AXIS_ORDER.into(),
        endianness: ENDIANNESS.into(),
    }
}

pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes the blob, then the header; each lands atomically.
pub fn write_volume(path: &Path, volume: &Volume) -> IoResult<()> {
    let (header_path, blob_path) = volume_paths(path);
    let blob = match &volume.data {
        VolumeData::Intensity(t) => encode_f32(t.data()),
        VolumeData::Labels(l) => l.data().to_vec(),
    };
    write_atomic(&blob_path, &blob)?;
    write_atomic(&header_path, &to_json(&header_for(volume)))
}

fn check_header(path: &Path, h: &VolumeHeader) -> IoResult<(usize, Dims3, usize)> {
    if h.format_version != VOLUME_FORMAT_VERSION {
        return Err(IoError::format(
            path,
            format!("format_version: expected {VOLUME_FORMAT_VERSION}, found {}", h.format_version),
        ));
    }
    if h.endianness != ENDIANNESS {
        return Err(IoError::format(path, format!("endianness: expected `little`, found `{}`", h.endianness)));
    }
    if h.axis_order != AXIS_ORDER {
        return Err(IoError::format(
            path,
            format!("axis_order: expected `{AXIS_ORDER}`, found `{}`", h.axis_order),
        ));
    }
    let size = match h.dtype.as_str() {
        "f32" => 4,
        "u8" => 1,
        other => return Err(IoError::format(path, format!("dtype: unknown value `{other}`, expected f32 or u8"))),
    };
    if !h.spacing_mm.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(IoError::format(path, "spacing_mm: entries must be positive"));
    }
    let (channels, dims) = match h.shape.as_slice() {
        &[d, hh, w] => (1, [d, hh, w]),
        &[c, d, hh, w] => (c, [d, hh, w]),
        other => return Err(IoError::format(path, format!("shape: expected 3 or 4 entries, found {}", other.len()))),
    };
    if h.dtype == "u8" && channels != 1 {
        return Err(IoError::format(path, format!("shape: label volumes have one channel, found {channels}")));
    }
    Ok((channels, dims, size))
}

pub fn read_volume(path: &Path) -> IoResult<Volume> {
    let (header_path, blob_path) = volume_paths(path);
    let header: VolumeHeader = read_json(&header_path)?;
    let (channels, dims, size) = check_header(&header_path, &header)?;
    let blob = read(&blob_path)?;
    let expected = channels * dims.iter().product::<usize>() * size;
    if blob.len() != expected {
        return Err(IoError::format(
            &blob_path,
            format!("blob length: expected {expected} bytes, found {}", blob.len()),
        ));
    }
    let data = if size == 4 {
        VolumeData::Intensity(Tensor4::from_vec(channels, dims, decode_f32(&blob))?)
    } else {
        VolumeData::Labels(LabelMap::new(dims, blob)?)
    };
    Ok(Volume {
        data,
        spacing_mm: header.spacing_mm,
    })
}
