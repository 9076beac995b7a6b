//! Modified Shepp-Logan head phantoms.
//!
//! Ellipses are given in normalized coordinates `[-1, 1]`; pixel `x` maps to
//! `(2x - (w-1)) / w` and rows run top to bottom, so `y` is flipped.

use crate::error::{Error, Result};
use crate::grid::{Dims3, VolumeGrid};

pub const MIN_PHANTOM_SIDE: usize = 32;

/// (value, a, b, x0, y0, phi in degrees)
const ELLIPSES_2D: [[f64; 6]; 10] = [
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0],
    [-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0],
    [-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0],
    [0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0],
    [0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0],
    [0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0],
    [0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0],
    [0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0],
    [0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0],
];

/// (value, a, b, c, x0, y0, z0, phi, theta, psi) with Euler angles in degrees.
const ELLIPSOIDS_3D: [[f64; 10]; 10] = [
    [1.0, 0.6900, 0.920, 0.810, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.780, 0.0, -0.0184, 0.0, 0.0, 0.0, 0.0],
    [-0.2, 0.1100, 0.310, 0.220, 0.22, 0.0, 0.0, -18.0, 0.0, 10.0],
    [-0.2, 0.1600, 0.410, 0.280, -0.22, 0.0, 0.0, 18.0, 0.0, 10.0],
    [0.1, 0.2100, 0.250, 0.410, 0.0, 0.35, -0.15, 0.0, 0.0, 0.0],
    [0.1, 0.0460, 0.046, 0.050, 0.0, 0.1, 0.25, 0.0, 0.0, 0.0],
    [0.1, 0.0460, 0.046, 0.050, 0.0, -0.1, 0.25, 0.0, 0.0, 0.0],
    [0.1, 0.0460, 0.023, 0.050, -0.08, -0.605, 0.0, 0.0, 0.0, 0.0],
    [0.1, 0.0230, 0.023, 0.020, 0.0, -0.606, 0.0, 0.0, 0.0, 0.0],
    [0.1, 0.0230, 0.046, 0.020, 0.06, -0.605, 0.0, 0.0, 0.0, 0.0],
];

fn check_side(dims: &[usize]) -> Result<()> {
    if dims.iter().any(|&d| d < MIN_PHANTOM_SIDE) {
        return Err(Error::InvalidParameter(format!(
            "phantom dimensions must be at least {MIN_PHANTOM_SIDE}, got {dims:?}"
        )));
    }
    Ok(())
}

fn norm(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 - (n as f64 - 1.0)) / n as f64
}

/// 2D phantom as a `w × h × 1` volume with values in `[0, 1]`.
pub fn shepp_logan_2d(w: usize, h: usize) -> Result<VolumeGrid> {
    check_side(&[w, h])?;
    let rot: Vec<(f64, f64)> = ELLIPSES_2D
        .iter()
        .map(|e| (e[5].to_radians().cos(), e[5].to_radians().sin()))
        .collect();
    Ok(VolumeGrid::from_fn(Dims3::new(w, h, 1), |x, y, _| {
        let px = norm(x, w);
        let py = -norm(y, h);
        let mut v = 0.0;
        for (e, &(c, s)) in ELLIPSES_2D.iter().zip(&rot) {
            let dx = px - e[3];
            let dy = py - e[4];
            let u = dx * c + dy * s;
            let t = -dx * s + dy * c;
            if (u / e[1]).powi(2) + (t / e[2]).powi(2) <= 1.0 {
                v += e[0];
            }
        }
        v.clamp(0.0, 1.0)
    }))
}

/// 3D phantom with values in `[0, 1]`.
pub fn shepp_logan_3d(dims: Dims3) -> Result<VolumeGrid> {
    check_side(&dims.as_array())?;
    let rotations: Vec<[[f64; 3]; 3]> = ELLIPSOIDS_3D
        .iter()
        .map(|e| {
            let (sp, cp) = e[7].to_radians().sin_cos();
            let (st, ct) = e[8].to_radians().sin_cos();
            let (ss, cs) = e[9].to_radians().sin_cos();
            [
                [cs * cp - ct * sp * ss, cs * sp + ct * cp * ss, ss * st],
                [-ss * cp - ct * sp * cs, -ss * sp + ct * cp * cs, cs * st],
                [st * sp, -st * cp, ct],
            ]
        })
        .collect();
    Ok(VolumeGrid::from_fn(dims, |x, y, z| {
        let p = [norm(x, dims.w), -norm(y, dims.h), norm(z, dims.c)];
        let mut v = 0.0;
        for (e, r) in ELLIPSOIDS_3D.iter().zip(&rotations) {
            let d = [p[0] - e[4], p[1] - e[5], p[2] - e[6]];
            let q = [0, 1, 2].map(|i| r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2]);
            if (q[0] / e[1]).powi(2) + (q[1] / e[2]).powi(2) + (q[2] / e[3]).powi(2) <= 1.0 {
                v += e[0];
            }
        }
        v.clamp(0.0, 1.0)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_d_range_and_background() {
        let p = shepp_logan_2d(256, 256).unwrap();
        assert_eq!(p.max(), 1.0);
        assert_eq!(p.get(0, 0, 0), 0.0);
        assert_eq!(p.min(), 0.0);
        assert_eq!(p, shepp_logan_2d(256, 256).unwrap());
    }

    #[test]
    fn undersized_is_rejected() {
        assert!(shepp_logan_2d(16, 64).is_err());
        assert!(shepp_logan_3d(Dims3::new(64, 64, 8)).is_err());
    }

    #[test]
    fn central_slice_matches_2d() {
        let p3 = shepp_logan_3d(Dims3::new(64, 64, 64)).unwrap();
        let p2 = shepp_logan_2d(64, 64).unwrap();
        let a = p3.slice(32);
        let b = p2.data();
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let corr = cov / (va * vb).sqrt();
        assert!(corr >= 0.95, "{corr}");
    }
}
