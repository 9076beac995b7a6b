//! Human-facing outputs: 8-bit slice images and the metric trace.

use std::path::Path;

use dgr_core::optim::TraceRow;
use dgr_core::VolumeGrid;
use image::GrayImage;
use serde::Serialize;

use crate::error::CliError;

/// Display window `[center - width/2, center + width/2]` mapped to 0..=255.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowLevel {
    pub width: f64,
    pub level: f64,
}

impl WindowLevel {
    /// The full value range of `vol`.
    pub fn full_range(vol: &VolumeGrid) -> Self {
        let (lo, hi) = (vol.min(), vol.max());
        Self {
            width: (hi - lo).max(f64::MIN_POSITIVE),
            level: (lo + hi) / 2.0,
        }
    }

    pub fn to_byte(self, v: f64) -> u8 {
        let lo = self.level - self.width / 2.0;
        let t = ((v - lo) / self.width).clamp(0.0, 1.0);
        (t * 255.0).round() as u8
    }
}

/// Writes axial slice `z` as a grayscale PNG.
pub fn write_slice_png(path: &Path, vol: &VolumeGrid, z: usize, window: WindowLevel) -> Result<(), CliError> {
    let dims = vol.dims();
    if z >= dims.c {
        return Err(CliError::Config(format!("slice {z} is outside a volume of depth {}", dims.c)));
    }
    let bytes: Vec<u8> = vol.slice(z).iter().map(|&v| window.to_byte(v)).collect();
    let img = GrayImage::from_raw(dims.w as u32, dims.h as u32, bytes).expect("slice length matches dims");
    img.save(path).map_err(|e| CliError::output(path, e))
}

#[derive(Serialize)]
struct CsvRow {
    iteration: usize,
    loss: f64,
    l1: f64,
    ssim_loss: f64,
    tv: f64,
    psnr: Option<f64>,
    ssim: Option<f64>,
    validation_loss: Option<f64>,
    n_gaussians: usize,
    lr: f64,
    wall_seconds: f64,
    clones: Option<usize>,
    splits: Option<usize>,
    prunes: Option<usize>,
    n_after: Option<usize>,
}

impl From<&TraceRow> for CsvRow {
    fn from(r: &TraceRow) -> Self {
        let d = r.densify.as_ref();
        Self {
            iteration: r.iteration,
            loss: r.loss,
            l1: r.l1,
            ssim_loss: r.ssim_loss,
            tv: r.tv,
            psnr: r.psnr,
            ssim: r.ssim,
            validation_loss: r.validation_loss,
            n_gaussians: r.n_gaussians,
            lr: r.lr,
            wall_seconds: r.wall_seconds,
            clones: d.map(|e| e.clones),
            splits: d.map(|e| e.splits),
            prunes: d.map(|e| e.prunes),
            n_after: d.map(|e| e.n_after),
        }
    }
}

/// One CSV row per iteration; densification columns are filled on event rows only.
pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::output(path, e))?;
    for row in trace {
        w.serialize(CsvRow::from(row)).map_err(|e| CliError::output(path, e))?;
    }
    w.flush().map_err(|e| CliError::output(path, e))
}
