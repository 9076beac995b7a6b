//! Image quality metrics and the windowed SSIM engine shared with the loss module.
//!
//! SSIM uses a separable Gaussian window (11 taps, σ = 1.5) evaluated in "valid" mode:
//! only positions where the whole window fits are scored. Along an axis shorter than the
//! window the window is truncated to the axis length and renormalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims3, VolumeGrid};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Reported when the error is exactly zero.
pub const PSNR_SENTINEL_DB: f64 = 200.0;

fn window_weights(len: usize) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..len)
        .map(|i| (-0.5 * ((i as f64 - c) / SSIM_SIGMA).powi(2)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filter over a 3D array stored x-fastest.
#[derive(Clone, Debug)]
pub(crate) struct SeparableWindow {
    dims: [usize; 3],
    weights: [Vec<f64>; 3],
}

impl SeparableWindow {
    /// `axes[d]` selects whether the window extends along axis `d`.
    pub(crate) fn new(dims: Dims3, axes: [bool; 3]) -> Self {
        let dims = dims.as_array();
        let weights = [0, 1, 2].map(|d| {
            if axes[d] {
                window_weights(SSIM_WINDOW.min(dims[d]))
            } else {
                vec![1.0]
            }
        });
        Self { dims, weights }
    }

    pub(crate) fn out_dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|d| self.dims[d] + 1 - self.weights[d].len())
    }

    pub(crate) fn out_len(&self) -> usize {
        self.out_dims().iter().product()
    }

    pub(crate) fn apply(&self, data: &[f64]) -> Vec<f64> {
        let mut cur = data.to_vec();
        let mut dims = self.dims;
        for axis in 0..3 {
            if self.weights[axis].len() == 1 {
                continue;
            }
            let (next, nd) = conv_axis(&cur, dims, axis, &self.weights[axis]);
            cur = next;
            dims = nd;
        }
        cur
    }

    /// Transpose of [`SeparableWindow::apply`].
    pub(crate) fn apply_transpose(&self, data: &[f64]) -> Vec<f64> {
        let mut cur = data.to_vec();
        let mut dims = self.out_dims();
        for axis in (0..3).rev() {
            if self.weights[axis].len() == 1 {
                continue;
            }
            let (next, nd) = conv_axis_transpose(&cur, dims, axis, &self.weights[axis]);
            cur = next;
            dims = nd;
        }
        cur
    }
}

fn strides(dims: [usize; 3]) -> [usize; 3] {
    [1, dims[0], dims[0] * dims[1]]
}

fn conv_axis(data: &[f64], dims: [usize; 3], axis: usize, w: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - w.len();
    let (si, so) = (strides(dims), strides(out_dims));
    let mut out = vec![0.0; out_dims.iter().product()];
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let base = x * si[0] + y * si[1] + z * si[2];
                let acc: f64 = w.iter().enumerate().map(|(k, wk)| wk * data[base + k * si[axis]]).sum();
                out[x * so[0] + y * so[1] + z * so[2]] = acc;
            }
        }
    }
    (out, out_dims)
}

fn conv_axis_transpose(data: &[f64], dims: [usize; 3], axis: usize, w: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let mut in_dims = dims;
    in_dims[axis] = dims[axis] + w.len() - 1;
    let (si, so) = (strides(in_dims), strides(dims));
    let mut out = vec![0.0; in_dims.iter().product()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let v = data[x * so[0] + y * so[1] + z * so[2]];
                let base = x * si[0] + y * si[1] + z * si[2];
                for (k, wk) in w.iter().enumerate() {
                    out[base + k * si[axis]] += wk * v;
                }
            }
        }
    }
    (out, in_dims)
}

/// Mean SSIM of `x` against `y` and, if requested, its gradient with respect to `x`.
/// `range` is the dynamic range `L` in the stabilizing constants.
pub(crate) fn ssim_with_grad(
    x: &[f64],
    y: &[f64],
    window: &SeparableWindow,
    range: f64,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = window.apply(x);
    let my = window.apply(y);
    let mxx = window.apply(&xx);
    let myy = window.apply(&yy);
    let mxy = window.apply(&xy);
    let count = window.out_len();
    let mut total = 0.0;
    let (mut da, mut db, mut dc) = if want_grad {
        (vec![0.0; count], vec![0.0; count], vec![0.0; count])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..count {
        let (ux, uy) = (mx[p], my[p]);
        let vx = mxx[p] - ux * ux;
        let vy = myy[p] - uy * uy;
        let cxy = mxy[p] - ux * uy;
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * cxy + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = vx + vy + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let s_mu = 2.0 * uy * a2 / (b1 * b2) - 2.0 * ux * s / b1;
            let s_var = -s / b2;
            let s_cov = 2.0 * a1 / (b1 * b2);
            // chain through the raw moments E[x], E[x²], E[xy]
            da[p] = s_mu - 2.0 * ux * s_var - uy * s_cov;
            db[p] = s_var;
            dc[p] = s_cov;
        }
    }
    let mean = total / count as f64;
    if !want_grad {
        return (mean, None);
    }
    let ta = window.apply_transpose(&da);
    let tb = window.apply_transpose(&db);
    let tc = window.apply_transpose(&dc);
    let inv = 1.0 / count as f64;
    let grad = (0..x.len())
        .map(|q| (ta[q] + 2.0 * x[q] * tb[q] + y[q] * tc[q]) * inv)
        .collect();
    (mean, Some(grad))
}

/// Dynamic range taken from the reference maximum, falling back to 1 for non-positive data.
pub(crate) fn dynamic_range(reference: &[f64]) -> f64 {
    let m = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn check_dims(a: &VolumeGrid, b: &VolumeGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::mismatch(b.dims(), a.dims()));
    }
    Ok(())
}

fn psnr_raw(a: &[f64], b: &[f64], max: f64) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return PSNR_SENTINEL_DB;
    }
    (10.0 * (max * max / mse).log10()).min(PSNR_SENTINEL_DB)
}

/// `10 log10(MAX² / MSE)`. `max` defaults to the maximum of `truth`.
pub fn psnr(recon: &VolumeGrid, truth: &VolumeGrid, max: Option<f64>) -> Result<f64> {
    check_dims(recon, truth)?;
    let max = max.unwrap_or_else(|| truth.max());
    Ok(psnr_raw(recon.data(), truth.data(), max))
}

/// SSIM over the whole volume with a window spanning every axis longer than one voxel.
pub fn ssim(recon: &VolumeGrid, truth: &VolumeGrid) -> Result<f64> {
    check_dims(recon, truth)?;
    let dims = truth.dims();
    let window = SeparableWindow::new(dims, [dims.w > 1, dims.h > 1, dims.c > 1]);
    let range = dynamic_range(truth.data());
    Ok(ssim_with_grad(recon.data(), truth.data(), &window, range, false).0)
}

/// Slicing direction for per-plane metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    /// Slices of constant z.
    Axial,
    /// Slices of constant y.
    Coronal,
    /// Slices of constant x.
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneMetrics {
    pub plane: Plane,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
    pub max_value: f64,
    pub planes: Vec<PlaneMetrics>,
}

fn extract_plane(v: &VolumeGrid, plane: Plane, index: usize) -> (Vec<f64>, Dims3) {
    let d = v.dims();
    match plane {
        Plane::Axial => (v.slice(index).to_vec(), Dims3::new(d.w, d.h, 1)),
        Plane::Coronal => {
            let mut out = Vec::with_capacity(d.w * d.c);
            for z in 0..d.c {
                for x in 0..d.w {
                    out.push(v.get(x, index, z));
                }
            }
            (out, Dims3::new(d.w, d.c, 1))
        }
        Plane::Sagittal => {
            let mut out = Vec::with_capacity(d.h * d.c);
            for z in 0..d.c {
                for y in 0..d.h {
                    out.push(v.get(index, y, z));
                }
            }
            (out, Dims3::new(d.h, d.c, 1))
        }
    }
}

/// Mean 2D PSNR and SSIM over every slice of one orientation. Both use the volume's
/// `MAX` and dynamic range so slices are scored on a common scale.
pub fn plane_metrics(recon: &VolumeGrid, truth: &VolumeGrid, plane: Plane, max: Option<f64>) -> Result<PlaneMetrics> {
    check_dims(recon, truth)?;
    let d = truth.dims();
    let max = max.unwrap_or_else(|| truth.max());
    let range = dynamic_range(truth.data());
    let count = match plane {
        Plane::Axial => d.c,
        Plane::Coronal => d.h,
        Plane::Sagittal => d.w,
    };
    let (mut p_sum, mut s_sum) = (0.0, 0.0);
    for i in 0..count {
        let (r, pd) = extract_plane(recon, plane, i);
        let (t, _) = extract_plane(truth, plane, i);
        p_sum += psnr_raw(&r, &t, max);
        let window = SeparableWindow::new(pd, [pd.w > 1, pd.h > 1, false]);
        s_sum += ssim_with_grad(&r, &t, &window, range, false).0;
    }
    Ok(PlaneMetrics {
        plane,
        mean_psnr: p_sum / count as f64,
        mean_ssim: s_sum / count as f64,
    })
}

/// Volume-level PSNR/SSIM plus per-plane slice averages.
pub fn evaluate(recon: &VolumeGrid, truth: &VolumeGrid, max: Option<f64>) -> Result<MetricsReport> {
    let max_value = max.unwrap_or_else(|| truth.max());
    Ok(MetricsReport {
        psnr: psnr(recon, truth, Some(max_value))?,
        ssim: ssim(recon, truth)?,
        max_value,
        planes: Plane::ALL
            .iter()
            .map(|&p| plane_metrics(recon, truth, p, Some(max_value)))
            .collect::<Result<_>>()?,
    })
}
