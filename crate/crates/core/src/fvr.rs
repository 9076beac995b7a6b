//! Fast volume reconstruction: splatting isotropic Gaussians onto a voxel grid.
//!
//! Each Gaussian only touches the lattice points of a fixed odd-sided box centered on
//! the voxel that contains its mean. With `dmu = mu - floor(mu)` and box offset `b`, the
//! voxel `floor(mu) + b` receives `I * exp(-D²/2)` where
//!
//! ```text
//! D² = bᵀC⁻¹b − bᵀC⁻¹dmu − dmuᵀC⁻¹b + dmuᵀC⁻¹dmu,   C⁻¹ = Id / σ²
//! ```
//!
//! Because `C⁻¹` is diagonal every one of the four terms is a sum over axes, so the
//! decomposed kernel evaluates them per axis and forms the contribution as a product of
//! three short factor tables. The undecomposed kernel materializes the shifted box
//! `b - dmu` for every offset instead; the dense kernel evaluates every voxel against
//! every Gaussian with no confinement at all.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{make_offset_grid, BoxConfig, Dims3, GaussianCloud, OffsetGrid, ParamGradients, VolumeGrid};

/// Default cap on `N * w * h * c` for [`reconstruct_direct`].
pub const DEFAULT_DENSE_BUDGET: u128 = 1 << 30;

/// Target number of row bands used by the deterministic scatter.
const DETERMINISTIC_BANDS: usize = 64;

/// How Gaussian contributions are accumulated into the volume.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatterMode {
    /// Parallel over Gaussians with atomic `f64` adds. Summation order is unspecified.
    Atomic,
    /// Each worker owns a band of rows and adds contributions in Gaussian index order,
    /// so results are bitwise reproducible for any thread count.
    #[default]
    Deterministic,
}

/// Squared Mahalanobis distance of offset `b` from `dmu`, evaluated directly.
#[inline]
pub fn sq_distance_direct(b: [i64; 3], dmu: [f64; 3], inv_var: f64) -> f64 {
    (0..3)
        .map(|d| {
            let r = b[d] as f64 - dmu[d];
            r * r
        })
        .sum::<f64>()
        * inv_var
}

/// The same distance assembled from the four einsum terms.
#[inline]
pub fn sq_distance_decomposed(b: [i64; 3], dmu: [f64; 3], inv_var: f64) -> f64 {
    let btb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]) as f64 * inv_var;
    four_terms(btb, b, dmu, inv_var)
}

#[inline]
fn four_terms(btb: f64, b: [i64; 3], dmu: [f64; 3], inv_var: f64) -> f64 {
    let bf = b.map(|v| v as f64);
    let btd = (bf[0] * dmu[0] + bf[1] * dmu[1] + bf[2] * dmu[2]) * inv_var;
    let dtb = (dmu[0] * bf[0] + dmu[1] * bf[1] + dmu[2] * bf[2]) * inv_var;
    let dtd = (dmu[0] * dmu[0] + dmu[1] * dmu[1] + dmu[2] * dmu[2]) * inv_var;
    btb - btd - dtb + dtd
}

/// Offset grid of a box together with the per-offset `bᵀb` table.
#[derive(Clone, Debug)]
pub struct FvrWorkspace {
    box_cfg: BoxConfig,
    offsets: OffsetGrid,
    offset_sq: Vec<i64>,
}

impl FvrWorkspace {
    pub fn new(box_cfg: BoxConfig) -> Self {
        let offsets = make_offset_grid(box_cfg);
        let offset_sq = offsets
            .offsets()
            .iter()
            .map(|o| o[0] * o[0] + o[1] * o[1] + o[2] * o[2])
            .collect();
        Self {
            box_cfg,
            offsets,
            offset_sq,
        }
    }

    pub fn box_cfg(&self) -> BoxConfig {
        self.box_cfg
    }

    pub fn offset_grid(&self) -> &OffsetGrid {
        &self.offsets
    }

    /// `bᵀb` for every offset, in offset-grid order.
    pub fn offset_sq(&self) -> &[i64] {
        &self.offset_sq
    }

    /// Four-term `D²` for the offset at `index`, reusing the precomputed `bᵀb`.
    pub fn sq_distance(&self, index: usize, dmu: [f64; 3], inv_var: f64) -> f64 {
        let b = self.offsets.offsets()[index];
        four_terms(self.offset_sq[index] as f64 * inv_var, b, dmu, inv_var)
    }
}

/// Analytic bound on the mass dropped by box confinement:
/// `Σ I · exp(-(hw-1)² / 2σ²)` with `hw` the smallest half-width among axes the box spans.
pub fn truncation_bound(cloud: &GaussianCloud, box_cfg: BoxConfig) -> f64 {
    let hw = box_cfg
        .half_widths()
        .into_iter()
        .filter(|&h| h > 0)
        .min();
    let Some(hw) = hw else {
        return cloud.total_intensity();
    };
    let reach = (hw - 1) as f64;
    cloud
        .sigma
        .iter()
        .zip(&cloud.intensity)
        .map(|(s, i)| i * (-0.5 * reach * reach / (s * s)).exp())
        .sum()
}

/// The part of one Gaussian's box that lands inside the volume.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    base: [i64; 3],
    /// Inclusive offset ranges after clipping to the volume.
    lo: [i64; 3],
    hi: [i64; 3],
    dmu: [f64; 3],
    inv_var: f64,
    intensity: f64,
}

impl Footprint {
    fn new(mu: [f64; 3], sigma: f64, intensity: f64, half: [i64; 3], dims: [usize; 3]) -> Option<Self> {
        let base = mu.map(|m| m.floor() as i64);
        let dmu = [mu[0] - base[0] as f64, mu[1] - base[1] as f64, mu[2] - base[2] as f64];
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for d in 0..3 {
            lo[d] = (-half[d]).max(-base[d]);
            hi[d] = half[d].min(dims[d] as i64 - 1 - base[d]);
            if lo[d] > hi[d] {
                return None;
            }
        }
        Some(Self {
            base,
            lo,
            hi,
            dmu,
            inv_var: 1.0 / (sigma * sigma),
            intensity,
        })
    }

    fn row_span(&self, dims: Dims3) -> (usize, usize) {
        let y0 = (self.base[1] + self.lo[1]) as usize;
        let y1 = (self.base[1] + self.hi[1]) as usize;
        let z0 = (self.base[2] + self.lo[2]) as usize;
        let z1 = (self.base[2] + self.hi[2]) as usize;
        (y0 + dims.h * z0, y1 + dims.h * z1)
    }

    /// Per-axis factors `exp(-½(bᵀC⁻¹b − 2 bᵀC⁻¹dmu + dmuᵀC⁻¹dmu))` over the clipped range.
    fn fill_factors(&self, factors: &mut [Vec<f64>; 3]) {
        for (d, f) in factors.iter_mut().enumerate() {
            f.clear();
            let dm = self.dmu[d];
            let dtd = dm * dm * self.inv_var;
            for b in self.lo[d]..=self.hi[d] {
                let bf = b as f64;
                let btb = bf * bf * self.inv_var;
                let btd = bf * dm * self.inv_var;
                f.push((-0.5 * (btb - btd - btd + dtd)).exp());
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kernel {
    Decomposed,
    Materialized,
}

#[derive(Default)]
struct Scratch {
    factors: [Vec<f64>; 3],
    shifted: Vec<[f64; 3]>,
}

/// Splatting and its adjoint for a fixed box and volume size.
#[derive(Clone, Debug)]
pub struct Fvr {
    workspace: FvrWorkspace,
    dims: Dims3,
    mode: ScatterMode,
}

impl Fvr {
    pub fn new(box_cfg: BoxConfig, dims: Dims3) -> Result<Self> {
        box_cfg.check_fits(dims)?;
        Ok(Self {
            workspace: FvrWorkspace::new(box_cfg),
            dims,
            mode: ScatterMode::default(),
        })
    }

    pub fn with_mode(mut self, mode: ScatterMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn box_cfg(&self) -> BoxConfig {
        self.workspace.box_cfg
    }

    pub fn mode(&self) -> ScatterMode {
        self.mode
    }

    pub fn workspace(&self) -> &FvrWorkspace {
        &self.workspace
    }

    /// Decomposed splatting.
    pub fn reconstruct(&self, cloud: &GaussianCloud) -> Result<VolumeGrid> {
        self.splat(cloud, Kernel::Decomposed)
    }

    /// Splatting through the materialized shifted box `b - dmu`; same clipping and
    /// result as [`Fvr::reconstruct`] up to rounding.
    pub fn reconstruct_nodecomp(&self, cloud: &GaussianCloud) -> Result<VolumeGrid> {
        self.splat(cloud, Kernel::Materialized)
    }

    fn check_cloud(&self, cloud: &GaussianCloud) -> Result<()> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        cloud.validate().map_err(Error::InvalidCloud)?;
        let dims = self.dims.as_array();
        let outside = cloud
            .mu
            .iter()
            .filter(|m| (0..3).any(|d| m[d] < 0.0 || m[d] >= dims[d] as f64))
            .count();
        if outside > 0 {
            log::debug!("{outside} gaussian centers lie outside the {} volume", self.dims);
        }
        Ok(())
    }

    fn footprints(&self, cloud: &GaussianCloud) -> Vec<Option<Footprint>> {
        let half = self.workspace.box_cfg.half_widths();
        let dims = self.dims.as_array();
        (0..cloud.len())
            .into_par_iter()
            .map(|i| Footprint::new(cloud.mu[i], cloud.sigma[i], cloud.intensity[i], half, dims))
            .collect()
    }

    fn splat(&self, cloud: &GaussianCloud, kernel: Kernel) -> Result<VolumeGrid> {
        self.check_cloud(cloud)?;
        let footprints = self.footprints(cloud);
        let data = match self.mode {
            ScatterMode::Atomic => self.splat_atomic(&footprints, kernel),
            ScatterMode::Deterministic => self.splat_banded(&footprints, kernel),
        };
        VolumeGrid::from_data(self.dims, data)
    }

    fn splat_atomic(&self, footprints: &[Option<Footprint>], kernel: Kernel) -> Vec<f64> {
        let acc: Vec<AtomicU64> = (0..self.dims.len()).map(|_| AtomicU64::new(0)).collect();
        let all_rows = 0..self.dims.h * self.dims.c;
        footprints
            .par_iter()
            .flatten()
            .for_each_init(Scratch::default, |scratch, fp| {
                let sink = &mut AtomicSink(&acc);
                match kernel {
                    Kernel::Decomposed => {
                        fp.fill_factors(&mut scratch.factors);
                        let [fx, fy, fz] = &scratch.factors;
                        self.splat_decomposed(fp, [fx, fy, fz], all_rows.clone(), sink);
                    }
                    Kernel::Materialized => self.splat_materialized(fp, all_rows.clone(), scratch, sink),
                }
            });
        acc.into_iter().map(|a| f64::from_bits(a.into_inner())).collect()
    }

    /// Owner-computes scatter over bands of rows. The decomposed kernel evaluates its
    /// factor tables once per Gaussian up front; the materialized kernel materializes
    /// only the box rows owned by the current band.
    fn splat_banded(&self, footprints: &[Option<Footprint>], kernel: Kernel) -> Vec<f64> {
        let dims = self.dims;
        let rows = dims.h * dims.c;
        let band_rows = rows.div_ceil(DETERMINISTIC_BANDS).max(1);
        let n_bands = rows.div_ceil(band_rows);
        let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); n_bands];
        for (i, fp) in footprints.iter().enumerate() {
            if let Some(fp) = fp {
                let (r0, r1) = fp.row_span(dims);
                for bucket in &mut buckets[r0 / band_rows..=r1 / band_rows] {
                    bucket.push(i as u32);
                }
            }
        }
        let [bw, bh, _] = self.workspace.box_cfg.dims();
        let stride = self.workspace.box_cfg.dims().iter().sum::<usize>();
        let mut table = Vec::new();
        if kernel == Kernel::Decomposed {
            table = vec![0.0; footprints.len() * stride];
            table
                .par_chunks_mut(stride)
                .zip(footprints.par_iter())
                .for_each_init(Scratch::default, |scratch, (t, fp)| {
                    if let Some(fp) = fp {
                        fp.fill_factors(&mut scratch.factors);
                        for (offset, f) in [0, bw, bw + bh].into_iter().zip(&scratch.factors) {
                            t[offset..offset + f.len()].copy_from_slice(f);
                        }
                    }
                });
        }
        let mut data = vec![0.0; dims.len()];
        data.par_chunks_mut(band_rows * dims.w)
            .zip(buckets.par_iter())
            .enumerate()
            .for_each_init(Scratch::default, |scratch, (band, (chunk, bucket))| {
                let row0 = band * band_rows;
                let rows = row0..row0 + chunk.len() / dims.w;
                let mut sink = BandSink {
                    origin: row0 * dims.w,
                    chunk,
                };
                for &i in bucket {
                    let i = i as usize;
                    let fp = footprints[i].as_ref().expect("bucketed footprint");
                    match kernel {
                        Kernel::Decomposed => {
                            let t = &table[i * stride..(i + 1) * stride];
                            let len = |d: usize| (fp.hi[d] - fp.lo[d] + 1) as usize;
                            let factors = [&t[..len(0)], &t[bw..bw + len(1)], &t[bw + bh..bw + bh + len(2)]];
                            self.splat_decomposed(fp, factors, rows.clone(), &mut sink);
                        }
                        Kernel::Materialized => self.splat_materialized(fp, rows.clone(), scratch, &mut sink),
                    }
                }
            });
        data
    }

    /// Adds the product of the per-axis factor tables to every voxel of the clipped box
    /// whose row `y + h*z` lies in `rows`.
    fn splat_decomposed(&self, fp: &Footprint, factors: [&[f64]; 3], rows: Range<usize>, sink: &mut impl Sink) {
        let dims = self.dims;
        let [fx, fy, fz] = factors;
        let x0 = (fp.base[0] + fp.lo[0]) as usize;
        for (kz, &gz) in fz.iter().enumerate() {
            let z = (fp.base[2] + fp.lo[2]) as usize + kz;
            let scale_z = fp.intensity * gz;
            for (ky, &gy) in fy.iter().enumerate() {
                let y = (fp.base[1] + fp.lo[1]) as usize + ky;
                let row = y + dims.h * z;
                if !rows.contains(&row) {
                    continue;
                }
                sink.add_row(x0 + dims.w * row, scale_z * gy, fx);
            }
        }
    }

    /// Evaluates `D²` offset by offset on the materialized shifted box `b - dmu`,
    /// restricted to the box rows that land in `rows`.
    fn splat_materialized(&self, fp: &Footprint, rows: Range<usize>, scratch: &mut Scratch, sink: &mut impl Sink) {
        let dims = self.dims;
        let offsets = self.workspace.offsets.offsets();
        let run = self.workspace.box_cfg.dims()[0];
        let (w, h, c) = (dims.w as i64, dims.h as i64, dims.c as i64);
        for box_row in offsets.chunks_exact(run) {
            let [_, by, bz] = box_row[0];
            let (py, pz) = (fp.base[1] + by, fp.base[2] + bz);
            if py < 0 || py >= h || pz < 0 || pz >= c {
                continue;
            }
            let row = (py + h * pz) as usize;
            if !rows.contains(&row) {
                continue;
            }
            scratch.shifted.clear();
            scratch.shifted.extend(box_row.iter().map(|b| {
                [
                    b[0] as f64 - fp.dmu[0],
                    b[1] as f64 - fp.dmu[1],
                    b[2] as f64 - fp.dmu[2],
                ]
            }));
            for (b, s) in box_row.iter().zip(&scratch.shifted) {
                let px = fp.base[0] + b[0];
                if px < 0 || px >= w {
                    continue;
                }
                let d2 = s[0] * fp.inv_var * s[0] + s[1] * fp.inv_var * s[1] + s[2] * fp.inv_var * s[2];
                sink.add(px as usize + dims.w * row, (-0.5 * d2).exp() * fp.intensity);
            }
        }
    }

    pub fn backward(&self, cloud: &GaussianCloud, dl_dv: &VolumeGrid) -> Result<ParamGradients> {
        let mut grads = ParamGradients::zeros(cloud.len());
        self.backward_into(cloud, dl_dv, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Fvr::backward`] but keeps the densification statistics already in `grads`:
    /// `|dL/dmu|` is added to the running sum and the window counter advances.
    ///
    /// `floor(mu)` is treated as locally constant, so position gradients flow through
    /// `dmu` only.
    pub fn backward_into(&self, cloud: &GaussianCloud, dl_dv: &VolumeGrid, grads: &mut ParamGradients) -> Result<()> {
        if dl_dv.dims() != self.dims {
            return Err(Error::mismatch(self.dims, dl_dv.dims()));
        }
        self.check_cloud(cloud)?;
        grads.check_matches(cloud)?;
        let footprints = self.footprints(cloud);
        let upstream = dl_dv.data();
        let per_gaussian: Vec<([f64; 3], f64, f64)> = footprints
            .par_iter()
            .map_init(Scratch::default, |scratch, fp| match fp {
                Some(fp) => self.gather_one(fp, upstream, scratch),
                None => ([0.0; 3], 0.0, 0.0),
            })
            .collect();
        for (i, (d_mu, d_sigma, d_int)) in per_gaussian.into_iter().enumerate() {
            grads.d_mu[i] = d_mu;
            grads.d_sigma[i] = d_sigma;
            grads.d_intensity[i] = d_int;
            grads.accum_pos_grad_norm[i] += (d_mu[0] * d_mu[0] + d_mu[1] * d_mu[1] + d_mu[2] * d_mu[2]).sqrt();
        }
        grads.iters_since_densify += 1;
        Ok(())
    }

    fn gather_one(&self, fp: &Footprint, upstream: &[f64], scratch: &mut Scratch) -> ([f64; 3], f64, f64) {
        let dims = self.dims;
        fp.fill_factors(&mut scratch.factors);
        let [fx, fy, fz] = &scratch.factors;
        let r = |d: usize, k: usize| (fp.lo[d] + k as i64) as f64 - fp.dmu[d];
        let x0 = (fp.base[0] + fp.lo[0]) as usize;
        // Σ u·g, Σ u·g·r_d and Σ u·g·|r|² over the clipped box
        let (mut s0, mut sx, mut sy, mut sz, mut sr2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (kz, &gz) in fz.iter().enumerate() {
            let z = (fp.base[2] + fp.lo[2]) as usize + kz;
            let rz = r(2, kz);
            for (ky, &gy) in fy.iter().enumerate() {
                let y = (fp.base[1] + fp.lo[1]) as usize + ky;
                let ry = r(1, ky);
                let start = x0 + dims.w * (y + dims.h * z);
                let row = &upstream[start..start + fx.len()];
                let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
                for (kx, (&gx, &u)) in fx.iter().zip(row).enumerate() {
                    let rx = r(0, kx);
                    let ug = u * gx;
                    a0 += ug;
                    a1 += ug * rx;
                    a2 += ug * rx * rx;
                }
                let g = gy * gz;
                s0 += g * a0;
                sx += g * a1;
                sy += g * ry * a0;
                sz += g * rz * a0;
                sr2 += g * (a2 + (ry * ry + rz * rz) * a0);
            }
        }
        let i = fp.intensity;
        let d_mu = [i * fp.inv_var * sx, i * fp.inv_var * sy, i * fp.inv_var * sz];
        // σ⁻³ = inv_var^(3/2)
        let d_sigma = i * sr2 * fp.inv_var * fp.inv_var.sqrt();
        (d_mu, d_sigma, s0)
    }
}

trait Sink {
    fn add(&mut self, idx: usize, v: f64);

    /// Adds `scale * factors[k]` at `start + k`.
    fn add_row(&mut self, start: usize, scale: f64, factors: &[f64]) {
        for (k, f) in factors.iter().enumerate() {
            self.add(start + k, scale * f);
        }
    }
}

struct AtomicSink<'a>(&'a [AtomicU64]);

impl Sink for AtomicSink<'_> {
    #[inline]
    fn add(&mut self, idx: usize, v: f64) {
        let cell = &self.0[idx];
        let mut cur = cell.load(Ordering::Relaxed);
        loop {
            let next = (f64::from_bits(cur) + v).to_bits();
            match cell.compare_exchange_weak(cur, next, Ordering::Relaxed, Ordering::Relaxed) {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }
}

/// Rows owned by one worker; `origin` is the linear index of the first element.
struct BandSink<'a> {
    origin: usize,
    chunk: &'a mut [f64],
}

impl Sink for BandSink<'_> {
    #[inline]
    fn add(&mut self, idx: usize, v: f64) {
        self.chunk[idx - self.origin] += v;
    }

    #[inline]
    fn add_row(&mut self, start: usize, scale: f64, factors: &[f64]) {
        let s = start - self.origin;
        for (o, f) in self.chunk[s..s + factors.len()].iter_mut().zip(factors) {
            *o += scale * f;
        }
    }
}

/// Decomposed splatting with the default scatter mode.
pub fn reconstruct(cloud: &GaussianCloud, box_cfg: BoxConfig, dims: Dims3) -> Result<VolumeGrid> {
    Fvr::new(box_cfg, dims)?.reconstruct(cloud)
}

pub fn reconstruct_nodecomp(cloud: &GaussianCloud, box_cfg: BoxConfig, dims: Dims3) -> Result<VolumeGrid> {
    Fvr::new(box_cfg, dims)?.reconstruct_nodecomp(cloud)
}

pub fn backward(cloud: &GaussianCloud, box_cfg: BoxConfig, dims: Dims3, dl_dv: &VolumeGrid) -> Result<ParamGradients> {
    Fvr::new(box_cfg, dims)?.backward(cloud, dl_dv)
}

/// Unconfined dense sum of every Gaussian over every voxel, refused above `budget`
/// Gaussian-voxel pairs.
pub fn reconstruct_direct(cloud: &GaussianCloud, dims: Dims3, budget: u128) -> Result<VolumeGrid> {
    let required = cloud.len() as u128 * dims.len() as u128;
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    cloud.validate().map_err(Error::InvalidCloud)?;
    let data = (0..dims.len())
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = dims.coords(i);
            let p = [x as f64, y as f64, z as f64];
            let mut acc = 0.0;
            for ((m, s), a) in cloud.mu.iter().zip(&cloud.sigma).zip(&cloud.intensity) {
                let r2 = (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2) + (p[2] - m[2]).powi(2);
                acc += (-0.5 * r2 / (s * s)).exp() * a;
            }
            acc
        })
        .collect();
    VolumeGrid::from_data(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(mu: [f64; 3], sigma: f64, intensity: f64) -> GaussianCloud {
        GaussianCloud::new(vec![mu], vec![sigma], vec![intensity]).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, dims: Dims3, margin: f64) -> GaussianCloud {
        let mut cloud = GaussianCloud::with_capacity(n);
        for _ in 0..n {
            let mu = [dims.w, dims.h, dims.c].map(|d| rng.gen_range(margin..d as f64 - margin));
            cloud.push(mu, rng.gen_range(0.5..1.5), rng.gen_range(0.1..1.0));
        }
        cloud
    }

    #[test]
    fn integer_center_gives_analytic_values() {
        let dims = Dims3::new(17, 17, 17);
        let v = reconstruct(&single([8.0, 8.0, 8.0], 1.0, 1.0), BoxConfig::cube(17).unwrap(), dims).unwrap();
        assert_eq!(v.get(8, 8, 8), 1.0);
        assert!((v.get(9, 8, 8) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v.get(9, 8, 8) - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn half_offset_is_symmetric() {
        let dims = Dims3::new(17, 17, 17);
        let v = reconstruct(&single([8.5, 8.0, 8.0], 1.0, 1.0), BoxConfig::cube(17).unwrap(), dims).unwrap();
        let expected = (-0.125f64).exp();
        assert!((v.get(8, 8, 8) - expected).abs() < 1e-15);
        assert!((v.get(9, 8, 8) - expected).abs() < 1e-15);
        assert!((expected - 0.8825).abs() < 1e-4);
    }

    #[test]
    fn workspace_distance_matches_direct() {
        let ws = FvrWorkspace::new(BoxConfig::cube(5).unwrap());
        let dmu = [0.3, 0.71, 0.05];
        for (i, b) in ws.offset_grid().offsets().iter().enumerate() {
            assert_eq!(ws.offset_sq()[i], b[0] * b[0] + b[1] * b[1] + b[2] * b[2]);
            let direct = sq_distance_direct(*b, dmu, 0.8);
            assert!((ws.sq_distance(i, dmu, 0.8) - direct).abs() <= 1e-12 * direct.max(1e-300));
        }
    }

    #[test]
    fn clipping_drops_out_of_volume_voxels() {
        let dims = Dims3::new(9, 9, 9);
        let cloud = single([0.2, 4.0, 8.9], 1.0, 1.0);
        let box_cfg = BoxConfig::cube(5).unwrap();
        let v = reconstruct(&cloud, box_cfg, dims).unwrap();
        let dense = reconstruct_direct(&cloud, dims, DEFAULT_DENSE_BUDGET).unwrap();
        // every in-volume voxel within the box matches the dense sum exactly
        for z in 6..9 {
            for y in 2..7 {
                for x in 0..3 {
                    assert!((v.get(x, y, z) - dense.get(x, y, z)).abs() < 1e-12);
                }
            }
        }
        assert_eq!(v.get(3, 4, 8), 0.0);
    }

    #[test]
    fn center_entirely_outside_contributes_nothing_inside_reach() {
        let dims = Dims3::new(9, 9, 9);
        let cloud = single([-6.0, 4.0, 4.0], 1.0, 1.0);
        let v = reconstruct(&cloud, BoxConfig::cube(5).unwrap(), dims).unwrap();
        assert_eq!(v.sum(), 0.0);
    }

    #[test]
    fn rejects_box_larger_than_volume_and_empty_cloud() {
        let dims = Dims3::new(8, 8, 8);
        let cloud = single([4.0; 3], 1.0, 1.0);
        assert!(matches!(
            reconstruct(&cloud, BoxConfig::cube(9).unwrap(), dims),
            Err(Error::BoxExceedsVolume { .. })
        ));
        assert!(matches!(
            reconstruct(&GaussianCloud::default(), BoxConfig::cube(3).unwrap(), dims),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn dense_budget_is_enforced() {
        let cloud = single([1.0; 3], 1.0, 1.0);
        let err = reconstruct_direct(&cloud, Dims3::new(8, 8, 8), 100).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { required: 512, budget: 100 }));
        assert!(err.to_string().contains("100"));
    }

    #[test]
    fn dense_matches_fast_path_for_narrow_gaussians() {
        let dims = Dims3::new(24, 24, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cloud = random_cloud(&mut rng, 15, dims, 0.0);
        cloud.sigma.iter_mut().for_each(|s| *s = 0.6);
        let fast = reconstruct(&cloud, BoxConfig::cube(17).unwrap(), dims).unwrap();
        let dense = reconstruct_direct(&cloud, dims, DEFAULT_DENSE_BUDGET).unwrap();
        assert!(fast.max_abs_diff(&dense) <= 1e-5);
    }

    #[test]
    fn zero_intensity_gives_zero_volume() {
        let dims = Dims3::new(6, 6, 6);
        let cloud = single([3.0; 3], 1.0, 0.0);
        assert_eq!(reconstruct_direct(&cloud, dims, DEFAULT_DENSE_BUDGET).unwrap().sum(), 0.0);
    }

    #[test]
    fn integer_center_agrees_across_paths() {
        let dims = Dims3::new(17, 17, 17);
        let cloud = single([8.0; 3], 1.3, 0.7);
        let box_cfg = BoxConfig::cube(17).unwrap();
        let a = reconstruct(&cloud, box_cfg, dims).unwrap();
        let b = reconstruct_nodecomp(&cloud, box_cfg, dims).unwrap();
        let c = reconstruct_direct(&cloud, dims, DEFAULT_DENSE_BUDGET).unwrap();
        assert_eq!(a.get(8, 8, 8), c.get(8, 8, 8));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12 * y.abs());
        }
    }

    #[test]
    fn scatter_modes_agree_and_deterministic_is_reproducible() {
        let dims = Dims3::new(20, 18, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cloud = random_cloud(&mut rng, 200, dims, 0.0);
        let box_cfg = BoxConfig::cube(7).unwrap();
        let atomic = Fvr::new(box_cfg, dims).unwrap();
        let det = atomic.clone().with_mode(ScatterMode::Deterministic);
        let a = atomic.reconstruct(&cloud).unwrap();
        let d1 = det.reconstruct(&cloud).unwrap();
        let d2 = det.reconstruct(&cloud).unwrap();
        assert_eq!(d1.data(), d2.data());
        assert!(a.max_abs_diff(&d1) < 1e-12);
        let n1 = det.reconstruct_nodecomp(&cloud).unwrap();
        assert!(n1.max_abs_diff(&d1) < 1e-12);
    }

    #[test]
    fn linear_in_intensity() {
        let dims = Dims3::new(16, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = random_cloud(&mut rng, 30, dims, 0.0);
        let mut doubled = cloud.clone();
        doubled.intensity.iter_mut().for_each(|i| *i *= 2.0);
        let fvr = Fvr::new(BoxConfig::cube(9).unwrap(), dims).unwrap().with_mode(ScatterMode::Deterministic);
        let a = fvr.reconstruct(&cloud).unwrap();
        let b = fvr.reconstruct(&doubled).unwrap();
        // doubling is exact in binary floating point
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn translation_covariance_on_interior() {
        let dims = Dims3::new(24, 24, 24);
        let box_cfg = BoxConfig::cube(7).unwrap();
        let cloud = GaussianCloud::new(
            vec![[8.3, 9.6, 7.2], [10.1, 8.8, 9.9]],
            vec![0.9, 1.2],
            vec![1.0, 0.4],
        )
        .unwrap();
        let mut shifted = cloud.clone();
        shifted.mu.iter_mut().for_each(|m| {
            m[0] += 3.0;
            m[1] -= 2.0;
            m[2] += 4.0;
        });
        let fvr = Fvr::new(box_cfg, dims).unwrap().with_mode(ScatterMode::Deterministic);
        let a = fvr.reconstruct(&cloud).unwrap();
        let b = fvr.reconstruct(&shifted).unwrap();
        for z in 4..14 {
            for y in 5..14 {
                for x in 4..15 {
                    assert!((a.get(x, y, z) - b.get(x + 3, y - 2, z + 4)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let dims = Dims3::new(12, 12, 12);
        let cloud = single([5.4, 6.3, 5.5], 1.1, 0.8);
        let g = backward(&cloud, BoxConfig::cube(7).unwrap(), dims, &VolumeGrid::zeros(dims)).unwrap();
        assert_eq!(g.d_mu[0], [0.0; 3]);
        assert_eq!(g.d_sigma[0], 0.0);
        assert_eq!(g.d_intensity[0], 0.0);
        assert_eq!(g.iters_since_densify, 1);
    }

    #[test]
    fn intensity_gradient_at_center_voxel() {
        let dims = Dims3::new(12, 12, 12);
        let cloud = single([6.0; 3], 1.0, 0.3);
        let mut up = VolumeGrid::zeros(dims);
        up.set(6, 6, 6, 1.0);
        let g = backward(&cloud, BoxConfig::cube(7).unwrap(), dims, &up).unwrap();
        assert_eq!(g.d_intensity[0], 1.0);
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let cloud = single([3.0; 3], 1.0, 1.0);
        let box_cfg = BoxConfig::cube(3).unwrap();
        let err = backward(&cloud, box_cfg, Dims3::new(8, 8, 8), &VolumeGrid::zeros(Dims3::new(8, 8, 7)));
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    /// loss = Σ V² / 2 so that dL/dV = V.
    fn half_sq_loss(fvr: &Fvr, cloud: &GaussianCloud) -> f64 {
        fvr.reconstruct(cloud).unwrap().data().iter().map(|v| 0.5 * v * v).sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        let dims = Dims3::new(16, 16, 16);
        let fvr = Fvr::new(BoxConfig::cube(11).unwrap(), dims)
            .unwrap()
            .with_mode(ScatterMode::Deterministic);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let mu = [0, 1, 2].map(|_| rng.gen_range(6..10) as f64 + rng.gen_range(0.2..0.8));
            let cloud = single(mu, rng.gen_range(0.8..1.6), rng.gen_range(0.3..1.2));
            let v = fvr.reconstruct(&cloud).unwrap();
            let g = fvr.backward(&cloud, &v).unwrap();
            let h = 1e-3;
            let fd = |perturb: &dyn Fn(&mut GaussianCloud, f64)| {
                let mut p = cloud.clone();
                perturb(&mut p, h);
                let mut m = cloud.clone();
                perturb(&mut m, -h);
                (half_sq_loss(&fvr, &p) - half_sq_loss(&fvr, &m)) / (2.0 * h)
            };
            let check = |analytic: f64, numeric: f64| {
                let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
                assert!(rel < 1e-3, "analytic {analytic} vs numeric {numeric}");
            };
            for d in 0..3 {
                check(g.d_mu[0][d], fd(&|c, e| c.mu[0][d] += e));
            }
            check(g.d_sigma[0], fd(&|c, e| c.sigma[0] += e));
            check(g.d_intensity[0], fd(&|c, e| c.intensity[0] += e));
        }
    }

    #[test]
    fn backward_accumulates_densify_statistics() {
        let dims = Dims3::new(10, 10, 10);
        let fvr = Fvr::new(BoxConfig::cube(5).unwrap(), dims).unwrap();
        let cloud = single([4.3, 5.6, 4.4], 1.0, 1.0);
        let up = fvr.reconstruct(&cloud).unwrap();
        let mut g = ParamGradients::zeros(1);
        fvr.backward_into(&cloud, &up, &mut g).unwrap();
        let first = g.accum_pos_grad_norm[0];
        assert!(first > 0.0);
        fvr.backward_into(&cloud, &up, &mut g).unwrap();
        assert!((g.accum_pos_grad_norm[0] - 2.0 * first).abs() < 1e-15);
        assert_eq!(g.iters_since_densify, 2);
        assert!((g.avg_pos_grad()[0] - first).abs() < 1e-15);
    }

    #[test]
    fn truncation_bound_shrinks_with_box() {
        let cloud = single([8.0; 3], 1.5, 2.0);
        let small = truncation_bound(&cloud, BoxConfig::cube(7).unwrap());
        let large = truncation_bound(&cloud, BoxConfig::cube(17).unwrap());
        assert!(large < small);
        assert!((large - 2.0 * (-0.5 * 49.0 / 2.25f64).exp()).abs() < 1e-18);
    }
}
