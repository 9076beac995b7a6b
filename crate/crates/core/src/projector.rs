//! Slice-wise line-integral projection, its adjoint, and filtered back projection.
//!
//! Every ray is sampled at the points `a + t_k d` with `t_k = k * step` for all integers
//! `k` whose sample lies within one voxel of the slice, and each sample reads the slice
//! by bilinear interpolation. Pixel `(x, y)` sits at integer coordinates and the slice
//! center is `((w-1)/2, (h-1)/2)`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BeamKind, Dims3, ScanGeometry, SinoDims, Sinogram, VolumeGrid};

/// Number of views accumulated into one partial image by the adjoint.
const ADJOINT_VIEW_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaySamplingConfig {
    /// Distance between samples along a ray, in voxels.
    pub step_length: f64,
}

impl Default for RaySamplingConfig {
    fn default() -> Self {
        Self { step_length: 0.5 }
    }
}

impl RaySamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_length > 0.0 && self.step_length <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "ray step length must lie in (0, 1], got {}",
                self.step_length
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FbpFilter {
    #[default]
    Ramp,
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum NoiseModel {
    Gaussian { sigma: f64 },
    Poisson { photon_count: f64 },
}

/// `floor` for samples inside the clipped range `(-1, extent)`; truncation toward zero
/// after a shift avoids a libm call on targets without a rounding instruction.
#[inline]
fn floor_i64(v: f64) -> i64 {
    (v + 1.0) as i64 - 1
}

#[derive(Clone, Copy, Debug)]
struct Ray {
    origin: [f64; 2],
    /// Unit direction scaled by the step length.
    delta: [f64; 2],
    k0: i64,
    k1: i64,
}

impl Ray {
    fn new(origin: [f64; 2], dir: [f64; 2], step: f64, w: usize, h: usize) -> Self {
        // clip the line to the support of bilinear interpolation, (-1, w) x (-1, h)
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for (d, extent) in [(0, w), (1, h)] {
            let (lo, hi) = (-1.0, extent as f64);
            if dir[d].abs() < 1e-12 {
                if origin[d] <= lo || origin[d] >= hi {
                    t0 = f64::INFINITY;
                }
                continue;
            }
            let a = (lo - origin[d]) / dir[d];
            let b = (hi - origin[d]) / dir[d];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        let (k0, k1) = if t0 < t1 {
            ((t0 / step).ceil() as i64, (t1 / step).floor() as i64)
        } else {
            (1, 0)
        };
        Self {
            origin,
            delta: [dir[0] * step, dir[1] * step],
            k0,
            k1,
        }
    }

    /// Bilinear taps of the sample at `(x, y)`, skipping pixels outside the slice.
    #[inline]
    fn edge_taps(x: f64, y: f64, w: usize, h: usize, mut f: impl FnMut(usize, f64)) {
        let (xf, yf) = (x.floor(), y.floor());
        let (fx, fy) = (x - xf, y - yf);
        let (x0, y0) = (xf as i64, yf as i64);
        let taps = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1, y0, fx * (1.0 - fy)),
            (x0, y0 + 1, (1.0 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ];
        for (px, py, wt) in taps {
            if px >= 0 && px < w as i64 && py >= 0 && py < h as i64 {
                f(px as usize + w * py as usize, wt);
            }
        }
    }

    /// Sum of bilinear samples along the ray (not yet scaled by the step).
    #[inline]
    fn integrate(&self, img: &[f64], w: usize, h: usize) -> f64 {
        let mut acc = 0.0;
        for k in self.k0..=self.k1 {
            let x = self.origin[0] + k as f64 * self.delta[0];
            let y = self.origin[1] + k as f64 * self.delta[1];
            let (x0, y0) = (floor_i64(x), floor_i64(y));
            let (xf, yf) = (x0 as f64, y0 as f64);
            if (x0 as u64) < (w - 1) as u64 && (y0 as u64) < (h - 1) as u64 {
                let (fx, fy) = (x - xf, y - yf);
                let i = x0 as usize + w * y0 as usize;
                let top = img[i] + fx * (img[i + 1] - img[i]);
                let bottom = img[i + w] + fx * (img[i + w + 1] - img[i + w]);
                acc += top + fy * (bottom - top);
            } else {
                Self::edge_taps(x, y, w, h, |p, wt| acc += wt * img[p]);
            }
        }
        acc
    }

    /// Transpose of [`Ray::integrate`]: adds `v` times every tap weight.
    #[inline]
    fn spread(&self, img: &mut [f64], w: usize, h: usize, v: f64) {
        for k in self.k0..=self.k1 {
            let x = self.origin[0] + k as f64 * self.delta[0];
            let y = self.origin[1] + k as f64 * self.delta[1];
            let (x0, y0) = (floor_i64(x), floor_i64(y));
            let (xf, yf) = (x0 as f64, y0 as f64);
            if (x0 as u64) < (w - 1) as u64 && (y0 as u64) < (h - 1) as u64 {
                let (fx, fy) = (x - xf, y - yf);
                let i = x0 as usize + w * y0 as usize;
                let b = v * fy;
                let t = v - b;
                img[i] += t - t * fx;
                img[i + 1] += t * fx;
                img[i + w] += b - b * fx;
                img[i + w + 1] += b * fx;
            } else {
                Self::edge_taps(x, y, w, h, |p, wt| img[p] += wt * v);
            }
        }
    }
}

/// Forward projector and exact adjoint for one geometry and volume size.
#[derive(Clone, Debug)]
pub struct Projector {
    geom: ScanGeometry,
    dims: Dims3,
    step: f64,
    /// Indexed `view * n_detectors + det`.
    rays: Vec<Ray>,
}

impl Projector {
    pub fn new(geom: &ScanGeometry, dims: Dims3, sampling: RaySamplingConfig) -> Result<Self> {
        geom.validate_for(dims)?;
        sampling.validate()?;
        let step = sampling.step_length;
        let (w, h) = (dims.w, dims.h);
        let center = [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0];
        let n = geom.n_detectors;
        let mut rays = Vec::with_capacity(geom.n_views() * n);
        for &theta in &geom.angles {
            let es = [theta.cos(), theta.sin()];
            let eu = [-es[1], es[0]];
            for j in 0..n {
                let u = (j as f64 - (n as f64 - 1.0) / 2.0) * geom.detector_spacing;
                let ray = match geom.kind {
                    BeamKind::Parallel => {
                        let origin = [center[0] + u * eu[0], center[1] + u * eu[1]];
                        Ray::new(origin, [-es[0], -es[1]], step, w, h)
                    }
                    BeamKind::Fan {
                        source_to_origin: sod,
                        origin_to_detector: odd,
                    } => {
                        let src = [center[0] + sod * es[0], center[1] + sod * es[1]];
                        let det = [
                            center[0] - odd * es[0] + u * eu[0],
                            center[1] - odd * es[1] + u * eu[1],
                        ];
                        let d = [det[0] - src[0], det[1] - src[1]];
                        let len = d[0].hypot(d[1]);
                        Ray::new(src, [d[0] / len, d[1] / len], step, w, h)
                    }
                };
                rays.push(ray);
            }
        }
        Ok(Self {
            geom: geom.clone(),
            dims,
            step,
            rays,
        })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geom
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn sino_dims(&self) -> SinoDims {
        SinoDims::for_geometry(&self.geom, self.dims.c)
    }

    pub fn forward(&self, volume: &VolumeGrid) -> Result<Sinogram> {
        if volume.dims() != self.dims {
            return Err(Error::mismatch(self.dims, volume.dims()));
        }
        let sd = self.sino_dims();
        let (w, h) = (self.dims.w, self.dims.h);
        let n = sd.detectors;
        let mut data = vec![0.0; sd.len()];
        let src = volume.data();
        data.par_chunks_mut(n).enumerate().for_each(|(row, out)| {
            let view = row % sd.views;
            let slice = row / sd.views;
            let img = &src[slice * w * h..(slice + 1) * w * h];
            for (j, o) in out.iter_mut().enumerate() {
                *o = self.rays[view * n + j].integrate(img, w, h) * self.step;
            }
        });
        Sinogram::from_data(sd, data)
    }

    /// Exact transpose of [`Projector::forward`]. Accumulation order is fixed, so the
    /// result does not depend on the thread count.
    pub fn adjoint(&self, sino: &Sinogram) -> Result<VolumeGrid> {
        let sd = self.sino_dims();
        if sino.dims() != sd {
            return Err(Error::mismatch(sd, sino.dims()));
        }
        let plane = self.dims.w * self.dims.h;
        let mut out = vec![0.0; self.dims.len()];
        if self.dims.c >= ADJOINT_VIEW_CHUNK {
            out.par_chunks_mut(plane).enumerate().for_each(|(z, img)| {
                self.scatter_views(sino, z, 0..sd.views, img);
            });
        } else {
            let chunks: Vec<_> = (0..sd.views).step_by(ADJOINT_VIEW_CHUNK).collect();
            for (z, img) in out.chunks_mut(plane).enumerate() {
                let partials: Vec<Vec<f64>> = chunks
                    .par_iter()
                    .map(|&v0| {
                        let mut buf = vec![0.0; plane];
                        self.scatter_views(sino, z, v0..(v0 + ADJOINT_VIEW_CHUNK).min(sd.views), &mut buf);
                        buf
                    })
                    .collect();
                for part in partials {
                    img.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                }
            }
        }
        VolumeGrid::from_data(self.dims, out)
    }

    fn scatter_views(&self, sino: &Sinogram, slice: usize, views: std::ops::Range<usize>, img: &mut [f64]) {
        let (w, h) = (self.dims.w, self.dims.h);
        let n = self.geom.n_detectors;
        for view in views {
            for j in 0..n {
                let v = sino.get(view, j, slice) * self.step;
                if v == 0.0 {
                    continue;
                }
                self.rays[view * n + j].spread(img, w, h, v);
            }
        }
    }
}

pub fn forward_project(volume: &VolumeGrid, geom: &ScanGeometry) -> Result<Sinogram> {
    Projector::new(geom, volume.dims(), RaySamplingConfig::default())?.forward(volume)
}

pub fn back_project(sino: &Sinogram, geom: &ScanGeometry, dims: Dims3) -> Result<VolumeGrid> {
    Projector::new(geom, dims, RaySamplingConfig::default())?.adjoint(sino)
}

/// Ramp filter applied row by row through zero-padded FFT convolution with the
/// band-limited spatial kernel for detector spacing `tau`.
struct RampFilter {
    len: usize,
    n: usize,
    response: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    fn new(n: usize, tau: f64, filter: FbpFilter) -> Self {
        let len = (2 * n).next_power_of_two();
        let mut kernel = vec![Complex::new(0.0, 0.0); len];
        kernel[0].re = 1.0 / (4.0 * tau * tau);
        for k in (1..n).step_by(2) {
            let v = -1.0 / ((k * k) as f64 * PI * PI * tau * tau);
            kernel[k].re = v;
            kernel[len - k].re = v;
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(len);
        let ifft = planner.plan_fft_inverse(len);
        fft.process(&mut kernel);
        let half = len as f64 / 2.0;
        let response = kernel
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let f = i.min(len - i) as f64;
                let window = match filter {
                    FbpFilter::Ramp => 1.0,
                    FbpFilter::Hann => 0.5 * (1.0 + (PI * f / half).cos()),
                };
                // kernel scale tau and the unnormalized inverse transform
                c.re * window * tau / len as f64
            })
            .collect();
        Self {
            len,
            n,
            response,
            fft,
            ifft,
        }
    }

    fn apply(&self, row: &mut [f64]) {
        let mut buf = vec![Complex::new(0.0, 0.0); self.len];
        for (b, &v) in buf.iter_mut().zip(row.iter()) {
            b.re = v;
        }
        self.fft.process(&mut buf);
        for (b, r) in buf.iter_mut().zip(&self.response) {
            *b *= r;
        }
        self.ifft.process(&mut buf);
        for (v, b) in row.iter_mut().zip(&buf[..self.n]) {
            *v = b.re;
        }
    }
}

#[inline]
fn interp(row: &[f64], pos: f64) -> f64 {
    if pos < 0.0 || pos > (row.len() - 1) as f64 {
        return 0.0;
    }
    let i = pos.floor() as usize;
    if i + 1 >= row.len() {
        return row[row.len() - 1];
    }
    let f = pos - i as f64;
    row[i] * (1.0 - f) + row[i + 1] * f
}

/// Filtered back projection onto a `dims` volume.
///
/// Views are weighted by `min(range, π) / m` where `range` is the angular span of the
/// scan. Fan data are rescaled to a virtual detector through the rotation center,
/// cosine weighted, filtered, and back-projected with the `1/U²` distance weight.
pub fn fbp(sino: &Sinogram, geom: &ScanGeometry, dims: Dims3, filter: FbpFilter) -> Result<VolumeGrid> {
    geom.validate_for(dims)?;
    let sd = SinoDims::for_geometry(geom, dims.c);
    if sino.dims() != sd {
        return Err(Error::mismatch(sd, sino.dims()));
    }
    let m = geom.n_views();
    if m < 2 {
        return Err(Error::InvalidGeometry("filtered back projection needs at least 2 views".into()));
    }
    let n = geom.n_detectors;
    let center_bin = (n as f64 - 1.0) / 2.0;
    // detector coordinate scale at the rotation center
    let (scale, sod) = match geom.kind {
        BeamKind::Parallel => (1.0, f64::INFINITY),
        BeamKind::Fan {
            source_to_origin,
            origin_to_detector,
        } => (source_to_origin / (source_to_origin + origin_to_detector), source_to_origin),
    };
    let tau = geom.detector_spacing * scale;
    let ramp = RampFilter::new(n, tau, filter);
    let mut filtered = sino.data().to_vec();
    filtered.par_chunks_mut(n).for_each(|row| {
        if sod.is_finite() {
            for (j, v) in row.iter_mut().enumerate() {
                let s = (j as f64 - center_bin) * tau;
                *v *= sod / (sod * sod + s * s).sqrt();
            }
        }
        ramp.apply(row);
    });
    let weight = geom.angular_range().min(PI) / m as f64;
    let trig: Vec<(f64, f64)> = geom.angles.iter().map(|a| (a.cos(), a.sin())).collect();
    let (w, h) = (dims.w, dims.h);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; dims.len()];
    out.par_chunks_mut(w).enumerate().for_each(|(row_idx, out_row)| {
        let y = row_idx % h;
        let z = row_idx / h;
        let ry = y as f64 - cy;
        for (x, o) in out_row.iter_mut().enumerate() {
            let rx = x as f64 - cx;
            let mut acc = 0.0;
            for (v, &(c, s)) in trig.iter().enumerate() {
                let start = sd.idx(v, 0, z);
                let q = &filtered[start..start + n];
                let r_u = -s * rx + c * ry;
                if sod.is_finite() {
                    let r_s = c * rx + s * ry;
                    let u = (sod - r_s) / sod;
                    let s_virtual = r_u / u;
                    acc += interp(q, s_virtual / tau + center_bin) / (u * u);
                } else {
                    acc += interp(q, r_u / tau + center_bin);
                }
            }
            *o = acc * weight;
        }
    });
    VolumeGrid::from_data(dims, out)
}

/// Simulated measurement noise, reproducible for a given seed.
pub fn add_noise(sino: &Sinogram, model: NoiseModel, seed: u64) -> Result<Sinogram> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = sino.data().to_vec();
    match model {
        NoiseModel::Gaussian { sigma } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::InvalidParameter(format!("noise sigma must be non-negative, got {sigma}")));
            }
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("valid normal");
                data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
        }
        NoiseModel::Poisson { photon_count } => {
            if !(photon_count > 0.0 && photon_count.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "photon count must be positive, got {photon_count}"
                )));
            }
            for v in data.iter_mut() {
                let mean = photon_count * (-*v).exp();
                let counts = if mean > 0.0 {
                    Poisson::new(mean).expect("positive mean").sample(&mut rng)
                } else {
                    0.0
                };
                *v = -(counts.max(1.0) / photon_count).ln();
            }
        }
    }
    Sinogram::from_data(sino.dims(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::evenly_spaced_angles;
    use rand::Rng;

    fn random_volume(rng: &mut ChaCha8Rng, dims: Dims3) -> VolumeGrid {
        VolumeGrid::from_fn(dims, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_sino(rng: &mut ChaCha8Rng, dims: SinoDims) -> Sinogram {
        Sinogram::from_data(dims, (0..dims.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn disk(dims: Dims3, radius: f64) -> VolumeGrid {
        let cx = (dims.w as f64 - 1.0) / 2.0;
        let cy = (dims.h as f64 - 1.0) / 2.0;
        VolumeGrid::from_fn(dims, |x, y, _| {
            let r = (x as f64 - cx).hypot(y as f64 - cy);
            if r <= radius {
                1.0
            } else {
                0.0
            }
        })
    }

    fn geometries(n_views: usize) -> Vec<ScanGeometry> {
        let angles = evenly_spaced_angles(n_views, 0.0, PI);
        vec![
            ScanGeometry::parallel(91, 1.0, angles.clone()).unwrap(),
            ScanGeometry::parallel(40, 1.7, evenly_spaced_angles(n_views, 0.3, 2.0 * PI)).unwrap(),
            ScanGeometry::fan(120, 1.5, angles, 150.0, 100.0).unwrap(),
        ]
    }

    #[test]
    fn adjoint_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dims in [Dims3::new(64, 64, 1), Dims3::new(24, 20, 9)] {
            for geom in geometries(30) {
                let p = Projector::new(&geom, dims, RaySamplingConfig::default()).unwrap();
                let x = random_volume(&mut rng, dims);
                let y = random_sino(&mut rng, p.sino_dims());
                let lhs = dot(p.forward(&x).unwrap().data(), y.data());
                let rhs = dot(x.data(), p.adjoint(&y).unwrap().data());
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let dims = Dims3::new(32, 32, 2);
        for geom in geometries(10) {
            let p = Projector::new(&geom, dims, RaySamplingConfig::default()).unwrap();
            assert!(p.forward(&VolumeGrid::zeros(dims)).unwrap().data().iter().all(|&v| v == 0.0));
            assert!(p.adjoint(&Sinogram::zeros(p.sino_dims())).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn central_chord_of_a_disk() {
        let dims = Dims3::new(64, 64, 1);
        let radius = 20.0;
        let geom = ScanGeometry::parallel(91, 1.0, evenly_spaced_angles(12, 0.0, PI)).unwrap();
        let sino = forward_project(&disk(dims, radius), &geom).unwrap();
        for v in 0..12 {
            let center = sino.get(v, 45, 0);
            assert!((center - 2.0 * radius).abs() / (2.0 * radius) < 0.02, "{center}");
        }
    }

    #[test]
    fn disk_sinogram_rows_agree_across_views() {
        let dims = Dims3::new(64, 64, 1);
        let geom = ScanGeometry::parallel(91, 1.0, evenly_spaced_angles(8, 0.0, PI)).unwrap();
        // a smooth radial profile keeps the comparison insensitive to pixelation
        let cx = 31.5;
        let vol = VolumeGrid::from_fn(dims, |x, y, _| {
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cx).powi(2);
            (-r2 / 128.0).exp()
        });
        let sino = forward_project(&vol, &geom).unwrap();
        let peak = sino.max();
        for v in 1..8 {
            for j in 0..91 {
                assert!((sino.get(v, j, 0) - sino.get(0, j, 0)).abs() <= 1e-3 * peak);
            }
        }
    }

    #[test]
    fn forward_is_linear() {
        let dims = Dims3::new(32, 28, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for geom in geometries(7) {
            let p = Projector::new(&geom, dims, RaySamplingConfig::default()).unwrap();
            let a = random_volume(&mut rng, dims);
            let b = random_volume(&mut rng, dims);
            let combo = VolumeGrid::from_data(
                dims,
                a.data().iter().zip(b.data()).map(|(x, y)| 2.5 * x - 0.7 * y).collect(),
            )
            .unwrap();
            let pa = p.forward(&a).unwrap();
            let pb = p.forward(&b).unwrap();
            let pc = p.forward(&combo).unwrap();
            let scale = pc.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for ((x, y), z) in pa.data().iter().zip(pb.data()).zip(pc.data()) {
                assert!((2.5 * x - 0.7 * y - z).abs() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn single_bin_back_projects_along_its_ray() {
        let dims = Dims3::new(40, 40, 1);
        let geom = ScanGeometry::parallel(41, 1.0, vec![0.0]).unwrap();
        let mut sino = Sinogram::zeros(SinoDims::for_geometry(&geom, 1));
        // view 0 rays run along -x; bin 25 sits at y = 19.5 + 5
        let i = sino.dims().idx(0, 25, 0);
        sino.data_mut()[i] = 1.0;
        let vol = back_project(&sino, &geom, dims).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                let v = vol.get(x, y, 0);
                if y == 24 || y == 25 {
                    assert!(v > 0.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn fan_source_inside_volume_is_rejected() {
        let geom = ScanGeometry::fan(64, 1.0, vec![0.0, 1.0], 30.0, 30.0).unwrap();
        let err = forward_project(&VolumeGrid::zeros(Dims3::new(64, 64, 1)), &geom);
        assert!(matches!(err, Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn gaussian_blob_projects_to_analytic_profile() {
        let dims = Dims3::new(64, 64, 1);
        let s = 4.0;
        let c = 31.5;
        let vol = VolumeGrid::from_fn(dims, |x, y, _| {
            let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            (-0.5 * r2 / (s * s)).exp()
        });
        let geom = ScanGeometry::parallel(64, 1.0, evenly_spaced_angles(6, 0.0, PI)).unwrap();
        let sino = forward_project(&vol, &geom).unwrap();
        for v in 0..6 {
            for j in 0..64 {
                let u = j as f64 - 31.5;
                let expected = (2.0 * PI).sqrt() * s * (-0.5 * u * u / (s * s)).exp();
                assert!((sino.get(v, j, 0) - expected).abs() < 0.02 * (2.0 * PI).sqrt() * s);
            }
        }
    }

    #[test]
    fn fbp_recovers_a_blob_in_both_geometries() {
        let dims = Dims3::new(64, 64, 1);
        let c = 31.5;
        let vol = VolumeGrid::from_fn(dims, |x, y, _| {
            let r2 = (x as f64 - c - 5.0).powi(2) + (y as f64 - c + 3.0).powi(2);
            (-0.5 * r2 / 9.0).exp()
        });
        let full = evenly_spaced_angles(180, 0.0, PI);
        let geoms = [
            ScanGeometry::parallel(95, 1.0, full).unwrap(),
            ScanGeometry::fan(190, 1.0, evenly_spaced_angles(360, 0.0, 2.0 * PI), 200.0, 200.0).unwrap(),
        ];
        for geom in geoms {
            let sino = forward_project(&vol, &geom).unwrap();
            let rec = fbp(&sino, &geom, dims, FbpFilter::Ramp).unwrap();
            let err = rec.max_abs_diff(&vol);
            assert!(err < 0.05, "{:?}: max error {err}", geom.kind);
        }
    }

    #[test]
    fn fbp_rejects_single_view_and_maps_zero_to_zero() {
        let dims = Dims3::new(32, 32, 1);
        let one = ScanGeometry::parallel(45, 1.0, vec![0.0]).unwrap();
        assert!(fbp(&Sinogram::zeros(SinoDims::for_geometry(&one, 1)), &one, dims, FbpFilter::Ramp).is_err());
        let two = ScanGeometry::parallel(45, 1.0, vec![0.0, 1.0]).unwrap();
        let rec = fbp(&Sinogram::zeros(SinoDims::for_geometry(&two, 1)), &two, dims, FbpFilter::Hann).unwrap();
        assert!(rec.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_models() {
        let dims = SinoDims::new(100, 1000, 1);
        let sino = Sinogram::from_data(dims, vec![1.0; dims.len()]).unwrap();
        let same = add_noise(&sino, NoiseModel::Gaussian { sigma: 0.0 }, 1).unwrap();
        assert_eq!(same, sino);
        let a = add_noise(&sino, NoiseModel::Gaussian { sigma: 0.01 }, 7).unwrap();
        let b = add_noise(&sino, NoiseModel::Gaussian { sigma: 0.01 }, 7).unwrap();
        assert_eq!(a, b);
        let n = a.data().len() as f64;
        let mean = a.data().iter().sum::<f64>() / n;
        let std = (a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.01).abs() < 0.0005, "{std}");
        let p = add_noise(&sino, NoiseModel::Poisson { photon_count: 1e5 }, 3).unwrap();
        let pm = p.data().iter().sum::<f64>() / n;
        assert!((pm - 1.0).abs() < 1e-3);
        assert!(add_noise(&sino, NoiseModel::Poisson { photon_count: 0.0 }, 3).is_err());
    }
}
