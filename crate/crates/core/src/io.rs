//! Raw little-endian arrays with a JSON sidecar.
//!
//! `name.raw` holds the samples in index order and `name.json` describes them.
//! Volumes and sinograms are stored as `f32`, Gaussian clouds as `f64` records of
//! `(mu_x, mu_y, mu_z, sigma, intensity)`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims3, GaussianCloud, ScanGeometry, SinoDims, Sinogram, VolumeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayKind {
    Volume,
    Sinogram,
    Cloud,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleType {
    F32Le,
    F64Le,
}

impl SampleType {
    fn width(self) -> usize {
        match self {
            SampleType::F32Le => 4,
            SampleType::F64Le => 8,
        }
    }
}

/// Contents of the sidecar file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: ArrayKind,
    /// `(w, h, c)` for volumes, `(views, detectors, slices)` for sinograms,
    /// `(n, 5, 1)` for clouds.
    pub dims: [usize; 3],
    pub sample_type: SampleType,
    /// Voxel spacing; always 1 since coordinates are in voxels.
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    /// Minimum and maximum of the stored samples.
    pub value_range: [f64; 2],
    /// Raw file name, relative to the sidecar.
    pub data_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<ScanGeometry>,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

/// Paths of the raw file and the sidecar for `path`, whichever of the two it names.
pub fn file_pair(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("raw"), path.with_extension("json"))
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn range(values: impl Iterator<Item = f64>) -> [f64; 2] {
    values.fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], v| [lo.min(v), hi.max(v)])
}

fn write_pair(path: &Path, mut sidecar: Sidecar, bytes: &[u8]) -> Result<()> {
    let (raw, meta) = file_pair(path);
    sidecar.data_file = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| format_error(path, "path has no usable file name"))?
        .to_string();
    if let Some(dir) = raw.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&raw, bytes)?;
    fs::write(&meta, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

fn read_pair(path: &Path, kind: ArrayKind) -> Result<(Sidecar, Vec<f64>)> {
    let (_, meta) = file_pair(path);
    let sidecar: Sidecar =
        serde_json::from_str(&fs::read_to_string(&meta)?).map_err(|e| format_error(&meta, e.to_string()))?;
    if sidecar.kind != kind {
        return Err(format_error(&meta, format!("expected {kind:?}, found {:?}", sidecar.kind)));
    }
    let raw = meta.with_file_name(&sidecar.data_file);
    let bytes = fs::read(&raw)?;
    let count: usize = sidecar.dims.iter().product();
    let width = sidecar.sample_type.width();
    if bytes.len() != count * width {
        return Err(format_error(
            &raw,
            format!("expected {} bytes for dims {:?}, found {}", count * width, sidecar.dims, bytes.len()),
        ));
    }
    let values = match sidecar.sample_type {
        SampleType::F32Le => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")) as f64)
            .collect(),
        SampleType::F64Le => bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect(),
    };
    Ok((sidecar, values))
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn f32_range(values: &[f64]) -> [f64; 2] {
    range(values.iter().map(|&v| v as f32 as f64))
}

pub fn write_volume(path: &Path, vol: &VolumeGrid) -> Result<()> {
    let sidecar = Sidecar {
        kind: ArrayKind::Volume,
        dims: vol.dims().as_array(),
        sample_type: SampleType::F32Le,
        spacing: unit_spacing(),
        value_range: f32_range(vol.data()),
        data_file: String::new(),
        geometry: None,
    };
    write_pair(path, sidecar, &f32_bytes(vol.data()))
}

pub fn read_volume(path: &Path) -> Result<VolumeGrid> {
    let (meta, data) = read_pair(path, ArrayKind::Volume)?;
    let [w, h, c] = meta.dims;
    VolumeGrid::from_data(Dims3::new(w, h, c), data)
}

/// Writes a sinogram, optionally recording the geometry it was acquired with.
pub fn write_sinogram(path: &Path, sino: &Sinogram, geometry: Option<&ScanGeometry>) -> Result<()> {
    let d = sino.dims();
    let sidecar = Sidecar {
        kind: ArrayKind::Sinogram,
        dims: [d.views, d.detectors, d.slices],
        sample_type: SampleType::F32Le,
        spacing: unit_spacing(),
        value_range: f32_range(sino.data()),
        data_file: String::new(),
        geometry: geometry.cloned(),
    };
    write_pair(path, sidecar, &f32_bytes(sino.data()))
}

pub fn read_sinogram(path: &Path) -> Result<(Sinogram, Option<ScanGeometry>)> {
    let (meta, data) = read_pair(path, ArrayKind::Sinogram)?;
    let [m, n, p] = meta.dims;
    let dims = SinoDims::new(m, n, p);
    if let Some(g) = &meta.geometry {
        if SinoDims::for_geometry(g, p) != dims {
            return Err(format_error(path, "recorded geometry does not match the sinogram dimensions"));
        }
    }
    Ok((Sinogram::from_data(dims, data)?, meta.geometry))
}

pub fn write_cloud(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    let records: Vec<f64> = (0..cloud.len())
        .flat_map(|i| {
            let [x, y, z] = cloud.mu[i];
            [x, y, z, cloud.sigma[i], cloud.intensity[i]]
        })
        .collect();
    let sidecar = Sidecar {
        kind: ArrayKind::Cloud,
        dims: [cloud.len(), 5, 1],
        sample_type: SampleType::F64Le,
        spacing: unit_spacing(),
        value_range: range(records.iter().copied()),
        data_file: String::new(),
        geometry: None,
    };
    let bytes: Vec<u8> = records.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(path, sidecar, &bytes)
}

pub fn read_cloud(path: &Path) -> Result<GaussianCloud> {
    let (meta, data) = read_pair(path, ArrayKind::Cloud)?;
    if meta.dims[1..] != [5, 1] {
        return Err(format_error(path, format!("cloud records must be 5 wide, got {:?}", meta.dims)));
    }
    let mut cloud = GaussianCloud::with_capacity(meta.dims[0]);
    for r in data.chunks_exact(5) {
        cloud.push([r[0], r[1], r[2]], r[3], r[4]);
    }
    cloud.validate().map_err(Error::InvalidCloud)?;
    Ok(cloud)
}
