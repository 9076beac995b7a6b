//! Domain types shared by every stage of the pipeline.
//!
//! Coordinates are voxel units. Voxel `(x, y, z)` covers the unit cube `[x, x+1)³`
//! and is sampled at the integer point `(x, y, z)`, so `floor(mu)` is the voxel that
//! contains a Gaussian center. Volumes are stored x-fastest:
//! `idx(x, y, z) = x + w * (y + h * z)`.

use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extent of a volume along x, y and z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims3 {
    pub w: usize,
    pub h: usize,
    pub c: usize,
}

impl Dims3 {
    pub const fn new(w: usize, h: usize, c: usize) -> Self {
        Self { w, h, c }
    }

    pub const fn len(&self) -> usize {
        self.w * self.h * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.w, self.h, self.c]
    }

    #[inline]
    pub const fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.w * (y + self.h * z)
    }

    /// Inverse of [`Dims3::idx`].
    #[inline]
    pub const fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.w;
        let yz = i / self.w;
        (x, yz % self.h, yz / self.h)
    }

    /// Length of the diagonal of the volume in voxel units.
    pub fn body_diagonal(&self) -> f64 {
        let [w, h, c] = self.as_array().map(|v| v as f64);
        (w * w + h * h + c * c).sqrt()
    }
}

impl fmt::Display for Dims3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.w, self.h, self.c)
    }
}

/// Dense scalar attenuation field.
///
/// Values are held in `f64` in memory; the on-disk format is little-endian `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    dims: Dims3,
    data: Vec<f64>,
}

impl VolumeGrid {
    pub fn zeros(dims: Dims3) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn from_data(dims: Dims3, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::mismatch(dims.len(), data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.c {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.idx(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.dims.idx(x, y, z);
        self.data[i] = v;
    }

    /// The `z`-th axial slice as a w×h row-major image.
    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.dims.w * self.dims.h;
        &self.data[z * n..(z + 1) * n]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &VolumeGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Side lengths of the local cuboid each Gaussian is confined to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxConfig {
    w0: usize,
    h0: usize,
    c0: usize,
}

impl BoxConfig {
    pub fn new(w0: usize, h0: usize, c0: usize) -> Result<Self> {
        let ok = |v: usize| v > 0 && v % 2 == 1;
        if ok(w0) && ok(h0) && ok(c0) {
            Ok(Self { w0, h0, c0 })
        } else {
            Err(Error::InvalidBox(w0, h0, c0))
        }
    }

    pub fn cube(side: usize) -> Result<Self> {
        Self::new(side, side, side)
    }

    /// A `side × side` box in-plane that is only one voxel thick along any axis where the
    /// volume is a single voxel thick.
    pub fn fitted(side: usize, dims: Dims3) -> Result<Self> {
        let fit = |d: usize| if d == 1 { 1 } else { side };
        Self::new(fit(dims.w), fit(dims.h), fit(dims.c))
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.w0, self.h0, self.c0]
    }

    pub fn half_widths(&self) -> [i64; 3] {
        self.dims().map(|d| ((d - 1) / 2) as i64)
    }

    pub fn len(&self) -> usize {
        self.w0 * self.h0 * self.c0
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Largest side length.
    pub fn extent(&self) -> usize {
        self.w0.max(self.h0).max(self.c0)
    }

    pub fn check_fits(&self, dims: Dims3) -> Result<()> {
        let b = self.dims();
        let v = dims.as_array();
        if b.iter().zip(v.iter()).any(|(b, v)| b > v) {
            return Err(Error::BoxExceedsVolume {
                box_dims: b,
                volume_dims: v,
            });
        }
        Ok(())
    }
}

/// Integer offsets of every lattice point in a centered box, ordered by (z, y, x).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffsetGrid {
    offsets: Vec<[i64; 3]>,
}

impl OffsetGrid {
    pub fn offsets(&self) -> &[[i64; 3]] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

pub fn make_offset_grid(box_cfg: BoxConfig) -> OffsetGrid {
    let [hx, hy, hz] = box_cfg.half_widths();
    let mut offsets = Vec::with_capacity(box_cfg.len());
    for z in -hz..=hz {
        for y in -hy..=hy {
            for x in -hx..=hx {
                offsets.push([x, y, z]);
            }
        }
    }
    OffsetGrid { offsets }
}

/// N isotropic Gaussians. Means are in voxel coordinates, `sigma` is the standard
/// deviation in voxels.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GaussianCloud {
    pub mu: Vec<[f64; 3]>,
    pub sigma: Vec<f64>,
    pub intensity: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudField {
    Mu,
    Sigma,
    Intensity,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    LengthMismatch {
        mu: usize,
        sigma: usize,
        intensity: usize,
    },
    Empty,
    NonPositive { index: usize, field: CloudField },
    Negative { index: usize, field: CloudField },
    NonFinite { index: usize, field: CloudField },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shown: Vec<String> = self.violations.iter().take(8).map(|v| format!("{v:?}")).collect();
        write!(f, "{}", shown.join(", "))?;
        if self.violations.len() > 8 {
            write!(f, " (+{} more)", self.violations.len() - 8)?;
        }
        Ok(())
    }
}

impl GaussianCloud {
    pub fn new(mu: Vec<[f64; 3]>, sigma: Vec<f64>, intensity: Vec<f64>) -> Result<Self> {
        let cloud = Self {
            mu,
            sigma,
            intensity,
        };
        cloud.validate().map_err(Error::InvalidCloud)?;
        Ok(cloud)
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            mu: Vec::with_capacity(n),
            sigma: Vec::with_capacity(n),
            intensity: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, mu: [f64; 3], sigma: f64, intensity: f64) {
        self.mu.push(mu);
        self.sigma.push(sigma);
        self.intensity.push(intensity);
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_intensity(&self) -> f64 {
        self.intensity.iter().sum()
    }

    /// Checks every invariant and reports all violations, not just the first.
    pub fn validate(&self) -> std::result::Result<(), ValidationReport> {
        let mut violations = Vec::new();
        let (nm, ns, ni) = (self.mu.len(), self.sigma.len(), self.intensity.len());
        if nm != ns || ns != ni {
            violations.push(Violation::LengthMismatch {
                mu: nm,
                sigma: ns,
                intensity: ni,
            });
        } else if ns == 0 {
            violations.push(Violation::Empty);
        }
        for (index, m) in self.mu.iter().enumerate() {
            if m.iter().any(|v| !v.is_finite()) {
                violations.push(Violation::NonFinite {
                    index,
                    field: CloudField::Mu,
                });
            }
        }
        for (index, &s) in self.sigma.iter().enumerate() {
            if !s.is_finite() {
                violations.push(Violation::NonFinite {
                    index,
                    field: CloudField::Sigma,
                });
            } else if s <= 0.0 {
                violations.push(Violation::NonPositive {
                    index,
                    field: CloudField::Sigma,
                });
            }
        }
        for (index, &v) in self.intensity.iter().enumerate() {
            if !v.is_finite() {
                violations.push(Violation::NonFinite {
                    index,
                    field: CloudField::Intensity,
                });
            } else if v < 0.0 {
                violations.push(Violation::Negative {
                    index,
                    field: CloudField::Intensity,
                });
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ValidationReport { violations })
        }
    }
}

/// Free-function form of [`GaussianCloud::validate`].
pub fn validate_cloud(cloud: &GaussianCloud) -> std::result::Result<(), ValidationReport> {
    cloud.validate()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum BeamKind {
    Parallel,
    /// Point source on a circle with a flat detector opposite it.
    Fan {
        source_to_origin: f64,
        origin_to_detector: f64,
    },
}

/// 2D acquisition geometry applied independently to every z-slice.
///
/// View angle `theta` places the source in direction `(cos θ, sin θ)` from the slice
/// center (counterclockwise from +x). Detector bin `j` sits at coordinate
/// `(j - (n-1)/2) * spacing` along `(-sin θ, cos θ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub kind: BeamKind,
    pub n_detectors: usize,
    pub detector_spacing: f64,
    pub angles: Vec<f64>,
}

impl ScanGeometry {
    pub fn parallel(n_detectors: usize, detector_spacing: f64, angles: Vec<f64>) -> Result<Self> {
        let g = Self {
            kind: BeamKind::Parallel,
            n_detectors,
            detector_spacing,
            angles,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn fan(
        n_detectors: usize,
        detector_spacing: f64,
        angles: Vec<f64>,
        source_to_origin: f64,
        origin_to_detector: f64,
    ) -> Result<Self> {
        let g = Self {
            kind: BeamKind::Fan {
                source_to_origin,
                origin_to_detector,
            },
            n_detectors,
            detector_spacing,
            angles,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn is_fan(&self) -> bool {
        matches!(self.kind, BeamKind::Fan { .. })
    }

    /// Checks the geometry on its own (no volume).
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGeometry(msg));
        if self.angles.is_empty() {
            return bad("at least one view is required".into());
        }
        if self.n_detectors == 0 {
            return bad("at least one detector bin is required".into());
        }
        if !(self.detector_spacing > 0.0 && self.detector_spacing.is_finite()) {
            return bad(format!("detector spacing must be positive, got {}", self.detector_spacing));
        }
        if self.angles.iter().any(|a| !(0.0..TAU).contains(a)) {
            return bad("view angles must lie in [0, 2π)".into());
        }
        if self.angles.windows(2).any(|p| p[1] <= p[0]) {
            return bad("view angles must be strictly increasing".into());
        }
        if let BeamKind::Fan {
            source_to_origin,
            origin_to_detector,
        } = self.kind
        {
            if !(source_to_origin > 0.0 && origin_to_detector > 0.0) {
                return bad("fan distances must be positive".into());
            }
        }
        Ok(())
    }

    /// Checks that the geometry can image slices of the given volume.
    pub fn validate_for(&self, dims: Dims3) -> Result<()> {
        self.validate()?;
        if dims.is_empty() {
            return Err(Error::InvalidGeometry("volume is empty".into()));
        }
        if let BeamKind::Fan {
            source_to_origin, ..
        } = self.kind
        {
            let r = slice_radius(dims);
            if source_to_origin <= r {
                return Err(Error::InvalidGeometry(format!(
                    "fan source at distance {source_to_origin} lies inside the slice's circumscribed radius {r:.2}"
                )));
            }
        }
        Ok(())
    }

    /// Angular span covered by the views, assuming even spacing.
    pub fn angular_range(&self) -> f64 {
        let m = self.angles.len();
        if m < 2 {
            return std::f64::consts::PI;
        }
        let step = (self.angles[m - 1] - self.angles[0]) / (m - 1) as f64;
        step * m as f64
    }

    /// Keeps only the views selected by `keep`.
    pub fn subset(&self, keep: impl Fn(usize) -> bool) -> Self {
        Self {
            angles: self
                .angles
                .iter()
                .enumerate()
                .filter(|(i, _)| keep(*i))
                .map(|(_, &a)| a)
                .collect(),
            ..self.clone()
        }
    }
}

/// Radius of the circle circumscribing a slice, measured from the slice center.
pub fn slice_radius(dims: Dims3) -> f64 {
    let hw = dims.w as f64 / 2.0;
    let hh = dims.h as f64 / 2.0;
    (hw * hw + hh * hh).sqrt()
}

/// `count` angles evenly covering `[start, start + extent)`, wrapped into `[0, 2π)`.
pub fn evenly_spaced_angles(count: usize, start: f64, extent: f64) -> Vec<f64> {
    let mut angles: Vec<f64> = (0..count)
        .map(|k| (start + extent * k as f64 / count as f64).rem_euclid(TAU))
        .collect();
    angles.sort_by(f64::total_cmp);
    angles
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SinoDims {
    pub views: usize,
    pub detectors: usize,
    pub slices: usize,
}

impl SinoDims {
    pub const fn new(views: usize, detectors: usize, slices: usize) -> Self {
        Self {
            views,
            detectors,
            slices,
        }
    }

    pub const fn len(&self) -> usize {
        self.views * self.detectors * self.slices
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn idx(&self, view: usize, det: usize, slice: usize) -> usize {
        det + self.detectors * (view + self.views * slice)
    }

    pub fn for_geometry(geom: &ScanGeometry, slices: usize) -> Self {
        Self::new(geom.n_views(), geom.n_detectors, slices)
    }

    /// Same layout viewed as a volume: detectors along x, views along y, slices along z.
    pub const fn as_dims3(&self) -> Dims3 {
        Dims3::new(self.detectors, self.views, self.slices)
    }
}

/// Line-integral measurements, detector-fastest: `idx = det + n * (view + m * slice)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    dims: SinoDims,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(dims: SinoDims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn from_data(dims: SinoDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::mismatch(dims.len(), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("sinogram contains non-finite values".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> SinoDims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, view: usize, det: usize, slice: usize) -> f64 {
        self.data[self.dims.idx(view, det, slice)]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Keeps the views selected by `keep`, preserving order.
    pub fn select_views(&self, keep: impl Fn(usize) -> bool) -> Self {
        let SinoDims {
            views,
            detectors,
            slices,
        } = self.dims;
        let kept: Vec<usize> = (0..views).filter(|&v| keep(v)).collect();
        let dims = SinoDims::new(kept.len(), detectors, slices);
        let mut data = Vec::with_capacity(dims.len());
        for s in 0..slices {
            for &v in &kept {
                let start = self.dims.idx(v, 0, s);
                data.extend_from_slice(&self.data[start..start + detectors]);
            }
        }
        Self { dims, data }
    }
}

/// Per-Gaussian gradients plus the positional-gradient statistics used by densification.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGradients {
    pub d_mu: Vec<[f64; 3]>,
    pub d_sigma: Vec<f64>,
    pub d_intensity: Vec<f64>,
    /// Running sum of `|dL/dmu|` since the last densification.
    pub accum_pos_grad_norm: Vec<f64>,
    pub iters_since_densify: usize,
}

impl ParamGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_mu: vec![[0.0; 3]; n],
            d_sigma: vec![0.0; n],
            d_intensity: vec![0.0; n],
            accum_pos_grad_norm: vec![0.0; n],
            iters_since_densify: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.d_sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean positional gradient norm per Gaussian over the current window.
    pub fn avg_pos_grad(&self) -> Vec<f64> {
        let k = self.iters_since_densify.max(1) as f64;
        self.accum_pos_grad_norm.iter().map(|a| a / k).collect()
    }

    pub fn check_matches(&self, cloud: &GaussianCloud) -> Result<()> {
        let n = cloud.len();
        let lens = [
            self.d_mu.len(),
            self.d_sigma.len(),
            self.d_intensity.len(),
            self.accum_pos_grad_norm.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::mismatch(n, lens));
        }
        Ok(())
    }
}
