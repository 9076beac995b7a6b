//! Composite objective: L1 and SSIM on sinograms, anisotropic TV on the volume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Sinogram, VolumeGrid};
use crate::metrics::{dynamic_range, ssim_with_grad, SeparableWindow};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::FULL
    }
}

impl LossWeights {
    /// L1 + SSIM + TV.
    pub const FULL: Self = Self {
        lambda1: 0.6,
        lambda2: 0.2,
        lambda3: 1.0,
    };
    /// L1 + SSIM.
    pub const L1_SSIM: Self = Self {
        lambda1: 0.8,
        lambda2: 0.2,
        lambda3: 0.0,
    };
    pub const L1: Self = Self {
        lambda1: 1.0,
        lambda2: 0.0,
        lambda3: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda1, self.lambda2, self.lambda3];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(format!("loss weights must be non-negative, got {w:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidParameter("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

fn check(pred: &Sinogram, reference: &Sinogram) -> Result<()> {
    if pred.dims() != reference.dims() {
        return Err(Error::mismatch(reference.dims(), pred.dims()));
    }
    Ok(())
}

/// Mean absolute error and its subgradient `sign(pred - ref) / count`.
pub fn l1_loss(pred: &Sinogram, reference: &Sinogram) -> Result<(f64, Sinogram)> {
    check(pred, reference)?;
    let n = pred.data().len() as f64;
    let mut value = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(p, r)| {
            let d = p - r;
            value += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((value / n, Sinogram::from_data(pred.dims(), grad)?))
}

/// `1 - SSIM`, with every slice's (view × detector) sinogram scored as a 2D image.
pub fn ssim_loss(pred: &Sinogram, reference: &Sinogram) -> Result<(f64, Sinogram)> {
    check(pred, reference)?;
    let dims = pred.dims().as_dims3();
    let window = SeparableWindow::new(dims, [true, true, false]);
    let range = dynamic_range(reference.data());
    let (s, grad) = ssim_with_grad(pred.data(), reference.data(), &window, range, true);
    let grad = grad.expect("gradient requested").into_iter().map(|g| -g).collect();
    Ok((1.0 - s, Sinogram::from_data(pred.dims(), grad)?))
}

/// Anisotropic TV: mean over voxels of the summed absolute forward differences.
/// Axes of length one are not differenced.
pub fn tv_loss(vol: &VolumeGrid) -> Result<(f64, VolumeGrid)> {
    let dims = vol.dims();
    let extents = dims.as_array();
    if extents.iter().all(|&e| e < 2) {
        return Err(Error::InvalidParameter(format!("total variation needs an axis of length ≥ 2, got {dims}")));
    }
    let n = dims.len() as f64;
    let data = vol.data();
    let mut grad = vec![0.0; data.len()];
    let mut total = 0.0;
    let strides = [1, dims.w, dims.w * dims.h];
    for axis in 0..3 {
        if extents[axis] < 2 {
            continue;
        }
        let stride = strides[axis];
        for i in 0..data.len() {
            let (x, y, z) = dims.coords(i);
            if [x, y, z][axis] + 1 == extents[axis] {
                continue;
            }
            let d = data[i + stride] - data[i];
            total += d.abs();
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[i + stride] += s / n;
            grad[i] -= s / n;
        }
    }
    Ok((total / n, VolumeGrid::from_data(dims, grad)?))
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub value: f64,
    /// Unweighted component values; zero for skipped components.
    pub l1: f64,
    pub ssim: f64,
    pub tv: f64,
    pub grad_pred: Sinogram,
    pub grad_vol: Option<VolumeGrid>,
}

/// Weighted sum of the three components; zero-weighted components are not evaluated.
pub fn total_loss(pred: &Sinogram, reference: &Sinogram, vol: &VolumeGrid, weights: LossWeights) -> Result<TotalLoss> {
    weights.validate()?;
    check(pred, reference)?;
    let mut grad = vec![0.0; pred.data().len()];
    let mut out = TotalLoss {
        value: 0.0,
        l1: 0.0,
        ssim: 0.0,
        tv: 0.0,
        grad_pred: Sinogram::zeros(pred.dims()),
        grad_vol: None,
    };
    let mut add = |scale: f64, g: &Sinogram| {
        grad.iter_mut().zip(g.data()).for_each(|(a, b)| *a += scale * b);
    };
    if weights.lambda1 > 0.0 {
        let (v, g) = l1_loss(pred, reference)?;
        out.l1 = v;
        out.value += weights.lambda1 * v;
        add(weights.lambda1, &g);
    }
    if weights.lambda2 > 0.0 {
        let (v, g) = ssim_loss(pred, reference)?;
        out.ssim = v;
        out.value += weights.lambda2 * v;
        add(weights.lambda2, &g);
    }
    if weights.lambda3 > 0.0 {
        let (v, mut g) = tv_loss(vol)?;
        out.tv = v;
        out.value += weights.lambda3 * v;
        g.data_mut().iter_mut().for_each(|x| *x *= weights.lambda3);
        out.grad_vol = Some(g);
    }
    out.grad_pred = Sinogram::from_data(pred.dims(), grad)?;
    Ok(out)
}
