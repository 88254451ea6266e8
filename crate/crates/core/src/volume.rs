//! Volume and label containers, the raw volume file format (RVF), and the
//! intensity/size preprocessing applied before supervoxels and training.
//!
//! RVF is a pair of files: `<name>.rvf.json` holding
//! `{"dims":[D,H,W],"spacing":[sz,sy,sx],"dtype":"f32le"|"u32le"}` and
//! `<name>.rvf.raw` holding the little-endian payload in C order (z, y, x).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along (z, y, x).
pub type Dims = [usize; 3];

/// Millimeters per voxel along (z, y, x).
pub type Spacing = [f64; 3];

fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

fn check_geometry(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Invalid(format!("dims must be >= 1, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Invalid(format!(
            "spacing must be finite and > 0, got {spacing:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "volume dims {dims:?} need {} values, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data"));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Result<Self> {
        Volume::new(dims, spacing, vec![value; voxel_count(dims)])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[z * plane..(z + 1) * plane]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: Spacing,
    labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u32>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        if labels.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "label dims {dims:?} need {} values, got {}",
                voxel_count(dims),
                labels.len()
            )));
        }
        Ok(LabelVolume { dims, spacing, labels })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn slice(&self, z: usize) -> &[u32] {
        let plane = self.dims[1] * self.dims[2];
        &self.labels[z * plane..(z + 1) * plane]
    }

    /// Binary mask of one label in slice `z`.
    pub fn slice_mask(&self, z: usize, label: u32) -> Vec<u8> {
        self.slice(z).iter().map(|&l| u8::from(l == label)).collect()
    }

    /// Inclusive z-range of slices that contain `label`, if any.
    pub fn slice_range(&self, label: u32) -> Option<(usize, usize)> {
        let present: Vec<usize> = (0..self.dims[0]).filter(|&z| self.slice(z).contains(&label)).collect();
        Some((*present.first()?, *present.last()?))
    }
}

/// One 2D slice of a volume with an optional binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub source: usize,
    pub z: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub mask: Option<Vec<u8>>,
}

impl Slice2D {
    pub fn from_volume(source: usize, volume: &Volume, z: usize) -> Result<Self> {
        let [d, h, w] = volume.dims();
        if z >= d {
            return Err(Error::Invalid(format!("slice {z} outside depth {d}")));
        }
        Ok(Slice2D {
            source,
            z,
            height: h,
            width: w,
            data: volume.slice(z).to_vec(),
            mask: None,
        })
    }

    pub fn with_mask(mut self, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != self.height * self.width {
            return Err(Error::Shape("slice mask size".into()));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::Invalid("slice mask must be binary".into()));
        }
        self.mask = Some(mask);
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// RVF file format

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "u32le")]
    U32Le,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RvfHeader {
    dims: Dims,
    spacing: Spacing,
    dtype: Dtype,
}

/// Resolves `<base>.rvf.json` / `<base>.rvf.raw` from a base path or either file path.
pub fn rvf_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let base = s
        .strip_suffix(".rvf.json")
        .or_else(|| s.strip_suffix(".rvf.raw"))
        .or_else(|| s.strip_suffix(".rvf"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{base}.rvf.json")),
        PathBuf::from(format!("{base}.rvf.raw")),
    )
}

fn read_rvf(path: &Path, expected: Dtype) -> Result<(RvfHeader, Vec<u8>)> {
    let (meta_path, raw_path) = rvf_paths(path);
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let header: RvfHeader = serde_json::from_str(&meta).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if header.dtype != expected {
        return Err(Error::format(
            &meta_path,
            format!("expected dtype {expected:?}, found {:?}", header.dtype),
        ));
    }
    check_geometry(header.dims, header.spacing).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let payload = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let want = voxel_count(header.dims) * 4;
    if payload.len() != want {
        return Err(Error::format(
            &raw_path,
            format!(
                "payload holds {} bytes, dims {:?} need {want}",
                payload.len(),
                header.dims
            ),
        ));
    }
    Ok((header, payload))
}

fn write_rvf(path: &Path, header: &RvfHeader, payload: &[u8]) -> Result<()> {
    let (meta_path, raw_path) = rvf_paths(path);
    let meta = serde_json::to_string(header).expect("header serializes");
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (header, payload) = read_rvf(path, Dtype::F32Le)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume::new(header.dims, header.spacing, data).map_err(|e| match e {
        Error::NonFinite(_) => Error::format(rvf_paths(path).1, "payload contains non-finite values"),
        other => other,
    })
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    let header = RvfHeader {
        dims: volume.dims,
        spacing: volume.spacing,
        dtype: Dtype::F32Le,
    };
    let payload: Vec<u8> = volume.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_rvf(path, &header, &payload)
}

pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let (header, payload) = read_rvf(path, Dtype::U32Le)?;
    let labels = payload
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    LabelVolume::new(header.dims, header.spacing, labels)
}

pub fn save_labels(labels: &LabelVolume, path: &Path) -> Result<()> {
    let header = RvfHeader {
        dims: labels.dims,
        spacing: labels.spacing,
        dtype: Dtype::U32Le,
    };
    let payload: Vec<u8> = labels.labels.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_rvf(path, &header, &payload)
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Index of the `(1 - pct)` order statistic in an ascending sort of `n` values.
pub fn upper_quantile_index(n: usize, pct: f64) -> usize {
    // The epsilon keeps exact products like 0.995 * 1000 from rounding up.
    let rank = ((1.0 - pct) * n as f64 - 1e-9).ceil() as usize;
    rank.clamp(1, n) - 1
}

/// Saturates the brightest `pct` fraction of voxels at the `(1 - pct)` quantile.
pub fn clip_top_percentile(volume: &Volume, pct: f64) -> Result<Volume> {
    if !(0.0..1.0).contains(&pct) {
        return Err(Error::Invalid(format!("clip fraction must be in [0, 1), got {pct}")));
    }
    if pct == 0.0 {
        return Ok(volume.clone());
    }
    let mut sorted = volume.data.clone();
    sorted.sort_by(f32::total_cmp);
    let cap = sorted[upper_quantile_index(sorted.len(), pct)];
    let data = volume.data.iter().map(|&v| v.min(cap)).collect();
    Ok(Volume {
        dims: volume.dims,
        spacing: volume.spacing,
        data,
    })
}

/// Shifts and scales to zero mean and unit variance over the volume;
/// constant volumes become all zeros.
pub fn standardize(volume: &Volume) -> Volume {
    let n = volume.data.len() as f64;
    let mean = volume.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = volume.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    Volume {
        dims: volume.dims,
        spacing: volume.spacing,
        data: volume.data.iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect(),
    }
}

/// Center crop or zero pad one axis: returns (source start, dest start, copy length).
fn axis_window(src: usize, dst: usize) -> (usize, usize, usize) {
    if dst <= src {
        ((src - dst) / 2, 0, dst)
    } else {
        (0, (dst - src) / 2, src)
    }
}

fn crop_or_pad_planes<T: Copy + Default>(dims: Dims, data: &[T], target: (usize, usize)) -> Vec<T> {
    let [d, h, w] = dims;
    let (th, tw) = target;
    let (sy, dy, ny) = axis_window(h, th);
    let (sx, dx, nx) = axis_window(w, tw);
    let mut out = vec![T::default(); d * th * tw];
    for z in 0..d {
        for y in 0..ny {
            let src = (z * h + sy + y) * w + sx;
            let dst = (z * th + dy + y) * tw + dx;
            out[dst..dst + nx].copy_from_slice(&data[src..src + nx]);
        }
    }
    out
}

/// Center-crops or zero-pads every slice to `target = (H', W')`; odd
/// remainders land on the high-index side.
pub fn crop_or_pad(volume: &Volume, target: (usize, usize)) -> Result<Volume> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::Invalid(format!("crop target must be >= 1, got {target:?}")));
    }
    let data = crop_or_pad_planes(volume.dims, &volume.data, target);
    Ok(Volume {
        dims: [volume.dims[0], target.0, target.1],
        spacing: volume.spacing,
        data,
    })
}

pub fn crop_or_pad_labels(labels: &LabelVolume, target: (usize, usize)) -> Result<LabelVolume> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::Invalid(format!("crop target must be >= 1, got {target:?}")));
    }
    let data = crop_or_pad_planes(labels.dims, &labels.labels, target);
    Ok(LabelVolume {
        dims: [labels.dims[0], target.0, target.1],
        spacing: labels.spacing,
        labels: data,
    })
}
