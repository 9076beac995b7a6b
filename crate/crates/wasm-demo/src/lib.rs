//! Browser bindings: simulate a 2D scan, run FBP, and step a Gaussian reconstruction.

use dgr_core::metrics::{psnr, ssim};
use dgr_core::optim::{InitMode, ReconConfig, ReconProblem, Reconstruction};
use dgr_core::phantom::shepp_logan_2d;
use dgr_core::projector::{add_noise, fbp, forward_project, FbpFilter, NoiseModel};
use dgr_core::{evenly_spaced_angles, Error, Result, ScanGeometry, Sinogram, VolumeGrid};
use wasm_bindgen::prelude::*;

/// Image quality against the phantom.
#[wasm_bindgen]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
}

/// One phantom, its simulated parallel-beam scan, and an optional reconstruction in progress.
pub struct Session {
    truth: VolumeGrid,
    geom: ScanGeometry,
    sino: Sinogram,
    recon: Option<Reconstruction>,
}

impl Session {
    pub fn new(size: usize) -> Result<Self> {
        let truth = shepp_logan_2d(size, size)?;
        let (geom, sino) = scan(&truth, 60, 180.0, 0.0, 0)?;
        Ok(Self {
            truth,
            geom,
            sino,
            recon: None,
        })
    }

    pub fn size(&self) -> usize {
        self.truth.dims().w
    }

    pub fn truth(&self) -> &VolumeGrid {
        &self.truth
    }

    pub fn sinogram(&self) -> &Sinogram {
        &self.sino
    }

    /// Rescans the phantom and drops any reconstruction.
    pub fn simulate(&mut self, views: usize, extent_deg: f64, noise_sigma: f64, seed: u64) -> Result<()> {
        let (geom, sino) = scan(&self.truth, views, extent_deg, noise_sigma, seed)?;
        self.geom = geom;
        self.sino = sino;
        self.recon = None;
        Ok(())
    }

    pub fn fbp(&self) -> Result<VolumeGrid> {
        fbp(&self.sino, &self.geom, self.truth.dims(), FbpFilter::Ramp)
    }

    pub fn quality(&self, vol: &VolumeGrid) -> Result<Quality> {
        Ok(Quality {
            psnr: psnr(vol, &self.truth, None)?,
            ssim: ssim(vol, &self.truth)?,
        })
    }

    /// Starts a reconstruction from `n` Gaussians sampled from the FBP image.
    pub fn start(&mut self, n: usize, max_iters: usize) -> Result<()> {
        let dims = self.truth.dims();
        let mut config = ReconConfig::for_volume(dims)?;
        config.init = InitMode::Fbp { n };
        config.max_iters = max_iters;
        config.eval_every = usize::MAX;
        let problem = ReconProblem {
            measured: &self.sino,
            geom: &self.geom,
            dims,
            truth: None,
            initial_cloud: None,
        };
        self.recon = Some(Reconstruction::new(&problem, &config)?);
        Ok(())
    }

    /// Runs up to `iterations` more steps and returns the current image.
    pub fn step(&mut self, iterations: usize) -> Result<VolumeGrid> {
        let recon = self
            .recon
            .as_mut()
            .ok_or_else(|| Error::InvalidParameter("no reconstruction has been started".into()))?;
        for _ in 0..iterations {
            if recon.step()?.is_none() {
                break;
            }
        }
        recon.render()
    }

    pub fn iteration(&self) -> usize {
        self.recon.as_ref().map_or(0, |r| r.trace().len())
    }

    pub fn n_gaussians(&self) -> usize {
        self.recon.as_ref().map_or(0, |r| r.cloud().len())
    }
}

fn scan(truth: &VolumeGrid, views: usize, extent_deg: f64, noise_sigma: f64, seed: u64) -> Result<(ScanGeometry, Sinogram)> {
    if !(extent_deg > 0.0 && extent_deg <= 360.0) {
        return Err(Error::InvalidParameter(format!("angular extent must be in (0, 360], got {extent_deg}")));
    }
    let side = truth.dims().w;
    // covers the diagonal of the square
    let detectors = (side as f64 * std::f64::consts::SQRT_2).ceil() as usize + 2;
    let geom = ScanGeometry::parallel(detectors, 1.0, evenly_spaced_angles(views, 0.0, extent_deg.to_radians()))?;
    let clean = forward_project(truth, &geom)?;
    let sino = if noise_sigma > 0.0 {
        add_noise(&clean, NoiseModel::Gaussian { sigma: noise_sigma }, seed)?
    } else {
        clean
    };
    Ok((geom, sino))
}

/// Row-major f32 copy of the first slice, for canvas upload.
fn pixels(vol: &VolumeGrid) -> Vec<f32> {
    vol.slice(0).iter().map(|&v| v as f32).collect()
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize) -> std::result::Result<Demo, JsError> {
        Session::new(size).map(Demo).map_err(js)
    }

    pub fn size(&self) -> usize {
        self.0.size()
    }

    pub fn phantom(&self) -> Vec<f32> {
        pixels(self.0.truth())
    }

    pub fn simulate(&mut self, views: usize, extent_deg: f64, noise_sigma: f64, seed: u64) -> std::result::Result<(), JsError> {
        self.0.simulate(views, extent_deg, noise_sigma, seed).map_err(js)
    }

    /// Sinogram as `views` rows of `detectors` values.
    pub fn sinogram(&self) -> Vec<f32> {
        self.0.sinogram().data().iter().map(|&v| v as f32).collect()
    }

    pub fn sinogram_views(&self) -> usize {
        self.0.sinogram().dims().views
    }

    pub fn sinogram_detectors(&self) -> usize {
        self.0.sinogram().dims().detectors
    }

    pub fn fbp(&self) -> std::result::Result<Vec<f32>, JsError> {
        self.0.fbp().map(|v| pixels(&v)).map_err(js)
    }

    pub fn fbp_quality(&self) -> std::result::Result<Quality, JsError> {
        self.0.fbp().and_then(|v| self.0.quality(&v)).map_err(js)
    }

    pub fn start(&mut self, n_gaussians: usize, max_iters: usize) -> std::result::Result<(), JsError> {
        self.0.start(n_gaussians, max_iters).map_err(js)
    }

    pub fn step(&mut self, iterations: usize) -> std::result::Result<Vec<f32>, JsError> {
        self.0.step(iterations).map(|v| pixels(&v)).map_err(js)
    }

    pub fn quality_of(&self, image: &[f32]) -> std::result::Result<Quality, JsError> {
        let vol = VolumeGrid::from_data(self.0.truth().dims(), image.iter().map(|&v| v as f64).collect()).map_err(js)?;
        self.0.quality(&vol).map_err(js)
    }

    pub fn iteration(&self) -> usize {
        self.0.iteration()
    }

    pub fn n_gaussians(&self) -> usize {
        self.0.n_gaussians()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_extent() {
        let mut s = Session::new(32).unwrap();
        assert!(s.simulate(10, 0.0, 0.0, 0).is_err());
        assert!(s.simulate(10, 400.0, 0.0, 0).is_err());
    }
}
