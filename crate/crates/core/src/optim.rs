//! Adam on Gaussian parameters, cloud initialization, and the reconstruction loop.

#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;
#[cfg(target_arch = "wasm32")]
use web_time::Instant;

use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::densify::{densify_and_prune, DensifyParams, DensifyReport, Origin};
use crate::error::{Error, Result};
use crate::fvr::{truncation_bound, Fvr, ScatterMode};
use crate::grid::{BoxConfig, Dims3, GaussianCloud, ParamGradients, ScanGeometry, Sinogram, VolumeGrid};
use crate::loss::{l1_loss, total_loss, LossWeights};
use crate::metrics;
use crate::projector::{fbp, FbpFilter, Projector, RaySamplingConfig};

pub const DEFAULT_INIT_SIGMA: f64 = 1.5;
pub const RANDOM_INIT_INTENSITY: f64 = 1e-3;
pub const SIGMA_FLOOR: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr_initial: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optimize μ and σ in coordinates normalized by the longest volume side, so the
    /// learning rate does not depend on the grid resolution. Intensities are unscaled.
    pub normalized_coordinates: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_initial: 3e-4,
            lr_final: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            normalized_coordinates: true,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_initial > 0.0
            && self.lr_final > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::InvalidParameter(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam moments for every Gaussian parameter plus the step counters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: usize,
    pub max_iters: usize,
    pub m_mu: Vec<[f64; 3]>,
    pub v_mu: Vec<[f64; 3]>,
    pub m_sigma: Vec<f64>,
    pub v_sigma: Vec<f64>,
    pub m_intensity: Vec<f64>,
    pub v_intensity: Vec<f64>,
    /// Updates each Gaussian has received; bias correction is per Gaussian so that
    /// densified ones start like a fresh optimizer.
    pub age: Vec<i32>,
    /// Voxels per normalized coordinate unit (1 when coordinates are not normalized).
    pub coord_scale: f64,
    pub sigma_max: f64,
}

impl OptimizerState {
    pub fn new(n: usize, config: AdamConfig, max_iters: usize, dims: Dims3, box_cfg: BoxConfig) -> Self {
        let coord_scale = if config.normalized_coordinates {
            dims.as_array().into_iter().max().unwrap_or(1) as f64
        } else {
            1.0
        };
        Self {
            config,
            step: 0,
            max_iters,
            m_mu: vec![[0.0; 3]; n],
            v_mu: vec![[0.0; 3]; n],
            m_sigma: vec![0.0; n],
            v_sigma: vec![0.0; n],
            m_intensity: vec![0.0; n],
            v_intensity: vec![0.0; n],
            age: vec![0; n],
            coord_scale,
            sigma_max: 3.0 * box_cfg.extent() as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.m_sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `lr0 * (lr_f / lr0)^(t / T)` at the current step.
    pub fn learning_rate(&self) -> f64 {
        let c = &self.config;
        let t = if self.max_iters == 0 {
            0.0
        } else {
            (self.step as f64 / self.max_iters as f64).min(1.0)
        };
        c.lr_initial * (c.lr_final / c.lr_initial).powf(t)
    }

    /// Rearranges moments to follow a densified cloud; new Gaussians start at zero.
    pub fn remap(&mut self, origin: &[Origin]) {
        fn pick<T: Copy + Default>(v: &[T], origin: &[Origin]) -> Vec<T> {
            origin
                .iter()
                .map(|o| match o {
                    Origin::Kept(i) => v[*i],
                    Origin::New => T::default(),
                })
                .collect()
        }
        self.m_mu = pick(&self.m_mu, origin);
        self.v_mu = pick(&self.v_mu, origin);
        self.m_sigma = pick(&self.m_sigma, origin);
        self.v_sigma = pick(&self.v_sigma, origin);
        self.m_intensity = pick(&self.m_intensity, origin);
        self.v_intensity = pick(&self.v_intensity, origin);
        self.age = pick(&self.age, origin);
    }
}

#[inline]
fn adam_delta(m: &mut f64, v: &mut f64, g: f64, c: &AdamConfig, bc1: f64, bc2: f64) -> f64 {
    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
    (*m / bc1) / ((*v / bc2).sqrt() + c.eps)
}

/// One bias-corrected Adam update followed by the σ and intensity projections.
pub fn adam_step(cloud: &mut GaussianCloud, grads: &ParamGradients, state: &mut OptimizerState) -> Result<()> {
    grads.check_matches(cloud)?;
    if state.len() != cloud.len() {
        return Err(Error::mismatch(cloud.len(), state.len()));
    }
    let lr = state.learning_rate();
    state.step += 1;
    let c = state.config;
    let s = state.coord_scale;
    for i in 0..cloud.len() {
        state.age[i] = state.age[i].saturating_add(1);
        let bc1 = 1.0 - c.beta1.powi(state.age[i]);
        let bc2 = 1.0 - c.beta2.powi(state.age[i]);
        for d in 0..3 {
            let step = adam_delta(&mut state.m_mu[i][d], &mut state.v_mu[i][d], grads.d_mu[i][d] * s, &c, bc1, bc2);
            cloud.mu[i][d] -= lr * s * step;
        }
        let step = adam_delta(&mut state.m_sigma[i], &mut state.v_sigma[i], grads.d_sigma[i] * s, &c, bc1, bc2);
        cloud.sigma[i] = (cloud.sigma[i] - lr * s * step).clamp(SIGMA_FLOOR, state.sigma_max);
        let step = adam_delta(
            &mut state.m_intensity[i],
            &mut state.v_intensity[i],
            grads.d_intensity[i],
            &c,
            bc1,
            bc2,
        );
        cloud.intensity[i] = (cloud.intensity[i] - lr * step).max(0.0);
    }
    Ok(())
}

fn spanned_axes(dims: Dims3) -> [bool; 3] {
    dims.as_array().map(|d| d > 1)
}

fn jittered(rng: &mut ChaCha8Rng, dims: Dims3, voxel: usize) -> [f64; 3] {
    let (x, y, z) = dims.coords(voxel);
    let spans = spanned_axes(dims);
    let base = [x as f64, y as f64, z as f64];
    [0, 1, 2].map(|d| if spans[d] { base[d] + rng.gen::<f64>() } else { base[d] })
}

/// Samples `n` centers with probability proportional to the positive part of `fbp_vol`.
/// Intensities follow the sampled values, rescaled so the splatted mass matches the
/// positive FBP mass.
pub fn init_cloud_fbp(fbp_vol: &VolumeGrid, n: usize, seed: u64) -> Result<GaussianCloud> {
    if n == 0 {
        return Err(Error::InvalidParameter("initial cloud needs at least one gaussian".into()));
    }
    if fbp_vol.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("initialization volume contains non-finite values".into()));
    }
    let dims = fbp_vol.dims();
    let clamped: Vec<f64> = fbp_vol.data().iter().map(|v| v.max(0.0)).collect();
    let mass: f64 = clamped.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if mass <= 0.0 {
        log::warn!("initialization volume has no positive values; sampling centers uniformly");
        let mut cloud = GaussianCloud::with_capacity(n);
        for _ in 0..n {
            let voxel = rng.gen_range(0..dims.len());
            cloud.push(jittered(&mut rng, dims, voxel), DEFAULT_INIT_SIGMA, RANDOM_INIT_INTENSITY);
        }
        return Ok(cloud);
    }
    let sampler = WeightedIndex::new(&clamped).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut cloud = GaussianCloud::with_capacity(n);
    for _ in 0..n {
        let voxel = rng.sample(&sampler);
        cloud.push(jittered(&mut rng, dims, voxel), DEFAULT_INIT_SIGMA, clamped[voxel]);
    }
    let d = spanned_axes(dims).iter().filter(|&&s| s).count() as i32;
    let per_unit = (2.0 * std::f64::consts::PI * DEFAULT_INIT_SIGMA * DEFAULT_INIT_SIGMA).powf(d as f64 / 2.0);
    let raw: f64 = cloud.intensity.iter().sum::<f64>() * per_unit;
    let scale = mass / raw;
    cloud.intensity.iter_mut().for_each(|i| *i *= scale);
    Ok(cloud)
}

/// `n` centers uniform in the volume interior, keeping half a box from every border
/// along axes the box spans.
pub fn init_cloud_random(dims: Dims3, box_cfg: BoxConfig, n: usize, seed: u64) -> Result<GaussianCloud> {
    if n == 0 {
        return Err(Error::InvalidParameter("initial cloud needs at least one gaussian".into()));
    }
    box_cfg.check_fits(dims)?;
    let half = box_cfg.half_widths();
    let extents = dims.as_array();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::with_capacity(n);
    for _ in 0..n {
        let mu = [0, 1, 2].map(|d| {
            if extents[d] == 1 {
                return 0.0;
            }
            let margin = (half[d] as f64).min((extents[d] as f64 - 1.0) / 2.0);
            rng.gen_range(margin..extents[d] as f64 - margin)
        });
        cloud.push(mu, DEFAULT_INIT_SIGMA, RANDOM_INIT_INTENSITY);
    }
    Ok(cloud)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InitMode {
    Fbp { n: usize },
    Random { n: usize },
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::Fbp { n: 150_000 }
    }
}

/// Stop when the projection-domain loss on held-out views stops improving.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationStop {
    /// Fraction of views withheld from training.
    pub holdout_fraction: f64,
    pub check_every: usize,
    /// Number of consecutive checks without relative improvement `min_rel_improvement`.
    pub patience: usize,
    pub min_rel_improvement: f64,
}

impl Default for ValidationStop {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.1,
            check_every: 10,
            patience: 5,
            min_rel_improvement: 1e-3,
        }
    }
}

impl ValidationStop {
    /// Views with `v % k == k / 2` are held out, `k = round(1 / fraction)`.
    pub fn is_holdout(&self, view: usize) -> bool {
        let k = (1.0 / self.holdout_fraction).round().max(2.0) as usize;
        view % k == k / 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub box_cfg: BoxConfig,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub max_iters: usize,
    /// `None` disables densification.
    pub densify: Option<DensifyParams>,
    pub init: InitMode,
    pub seed: u64,
    pub scatter: ScatterMode,
    pub sampling: RaySamplingConfig,
    /// Ground-truth metrics are recorded every this many iterations and at the end.
    pub eval_every: usize,
    pub validation: Option<ValidationStop>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            box_cfg: BoxConfig::cube(17).expect("odd box"),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            max_iters: 1000,
            densify: None,
            init: InitMode::default(),
            seed: 0,
            scatter: ScatterMode::default(),
            sampling: RaySamplingConfig::default(),
            eval_every: 10,
            validation: None,
        }
    }
}

impl ReconConfig {
    /// Defaults for a volume, with densification enabled.
    pub fn for_volume(dims: Dims3) -> Result<Self> {
        let box_cfg = BoxConfig::fitted(17, dims)?;
        Ok(Self {
            box_cfg,
            densify: Some(DensifyParams::new(dims, box_cfg)),
            ..Self::default()
        })
    }

    pub fn validate(&self, dims: Dims3) -> Result<()> {
        self.box_cfg.check_fits(dims)?;
        self.weights.validate()?;
        self.adam.validate()?;
        self.sampling.validate()?;
        if let Some(d) = &self.densify {
            d.validate(0)?;
            if d.dims != dims {
                return Err(Error::mismatch(dims, d.dims));
            }
        }
        if let InitMode::Fbp { n: 0 } | InitMode::Random { n: 0 } = self.init {
            return Err(Error::InvalidParameter("initial cloud needs at least one gaussian".into()));
        }
        if let Some(v) = &self.validation {
            if !(v.holdout_fraction > 0.0 && v.holdout_fraction < 0.5) {
                return Err(Error::InvalidParameter(format!(
                    "holdout fraction must lie in (0, 0.5), got {}",
                    v.holdout_fraction
                )));
            }
            if v.check_every == 0 {
                return Err(Error::InvalidParameter("validation interval must be positive".into()));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidParameter("evaluation interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensifyEvent {
    pub clones: usize,
    pub splits: usize,
    pub prunes: usize,
    pub n_after: usize,
}

impl From<&DensifyReport> for DensifyEvent {
    fn from(r: &DensifyReport) -> Self {
        Self {
            clones: r.clones,
            splits: r.splits,
            prunes: r.prunes,
            n_after: r.n_after,
        }
    }
}

/// One row of the metric trace. `iteration` counts completed updates; loss values
/// describe the cloud before that update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub l1: f64,
    pub ssim_loss: f64,
    pub tv: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub validation_loss: Option<f64>,
    pub n_gaussians: usize,
    pub lr: f64,
    pub wall_seconds: f64,
    pub densify: Option<DensifyEvent>,
}

#[derive(Clone, Debug)]
pub struct ReconOutput {
    pub volume: VolumeGrid,
    pub cloud: GaussianCloud,
    pub trace: Vec<TraceRow>,
    pub stopped_early: bool,
}

/// Inputs other than the configuration.
#[derive(Clone, Copy, Debug)]
pub struct ReconProblem<'a> {
    pub measured: &'a Sinogram,
    pub geom: &'a ScanGeometry,
    pub dims: Dims3,
    pub truth: Option<&'a VolumeGrid>,
    /// Start from this cloud instead of the configured initialization.
    pub initial_cloud: Option<&'a GaussianCloud>,
}

/// Initial cloud for a problem as configured (FBP of the training views, or random).
pub fn initialize(problem: &ReconProblem, config: &ReconConfig) -> Result<GaussianCloud> {
    match config.init {
        InitMode::Fbp { n } => {
            let (measured, geom) = training_split(problem, config);
            let vol = fbp(&measured, &geom, problem.dims, FbpFilter::Ramp)?;
            init_cloud_fbp(&vol, n, config.seed)
        }
        InitMode::Random { n } => init_cloud_random(problem.dims, config.box_cfg, n, config.seed),
    }
}

fn training_split(problem: &ReconProblem, config: &ReconConfig) -> (Sinogram, ScanGeometry) {
    match &config.validation {
        Some(v) => (
            problem.measured.select_views(|i| !v.is_holdout(i)),
            problem.geom.subset(|i| !v.is_holdout(i)),
        ),
        None => (problem.measured.clone(), problem.geom.clone()),
    }
}

/// Optimizes a Gaussian cloud against measured projections.
pub fn run_reconstruction(problem: &ReconProblem, config: &ReconConfig) -> Result<ReconOutput> {
    run_reconstruction_with(problem, config, |_, _| {})
}

/// As [`run_reconstruction`], calling `observe` with every trace row and the cloud after that iteration.
pub fn run_reconstruction_with(
    problem: &ReconProblem,
    config: &ReconConfig,
    mut observe: impl FnMut(&TraceRow, &GaussianCloud),
) -> Result<ReconOutput> {
    let mut recon = Reconstruction::new(problem, config)?;
    while !recon.is_done() {
        recon.step()?;
        let row = recon.trace.last().expect("a step appends a row");
        observe(row, &recon.cloud);
    }
    recon.finish()
}

/// The optimization loop driven one iteration at a time. Owns copies of its inputs.
#[derive(Debug)]
pub struct Reconstruction {
    config: ReconConfig,
    truth: Option<VolumeGrid>,
    fvr: Fvr,
    projector: Projector,
    train_sino: Sinogram,
    holdout: Option<(ValidationStop, Sinogram, Projector)>,
    cloud: GaussianCloud,
    state: OptimizerState,
    grads: ParamGradients,
    trace: Vec<TraceRow>,
    best_val: f64,
    stale_checks: usize,
    stopped_early: bool,
    start: Instant,
}

impl Reconstruction {
    /// Validates the inputs and builds the initial cloud.
    pub fn new(problem: &ReconProblem, config: &ReconConfig) -> Result<Self> {
        let dims = problem.dims;
        config.validate(dims)?;
        problem.geom.validate_for(dims)?;
        let expected = crate::grid::SinoDims::for_geometry(problem.geom, dims.c);
        if problem.measured.dims() != expected {
            return Err(Error::mismatch(expected, problem.measured.dims()));
        }
        if let Some(t) = problem.truth {
            if t.dims() != dims {
                return Err(Error::mismatch(dims, t.dims()));
            }
        }
        let start = Instant::now();
        let (train_sino, train_geom) = training_split(problem, config);
        let mut holdout = None;
        if let Some(v) = config.validation {
            let geom = problem.geom.subset(|i| v.is_holdout(i));
            if !geom.angles.is_empty() {
                let sino = problem.measured.select_views(|i| v.is_holdout(i));
                holdout = Some((v, sino, Projector::new(&geom, dims, config.sampling)?));
            }
        }
        let cloud = match problem.initial_cloud {
            Some(c) => c.clone(),
            None => initialize(problem, config)?,
        };
        log::info!(
            "starting reconstruction: {} gaussians, box {:?}, truncation bound {:.3e}",
            cloud.len(),
            config.box_cfg.dims(),
            truncation_bound(&cloud, config.box_cfg)
        );
        Ok(Self {
            fvr: Fvr::new(config.box_cfg, dims)?.with_mode(config.scatter),
            projector: Projector::new(&train_geom, dims, config.sampling)?,
            state: OptimizerState::new(cloud.len(), config.adam, config.max_iters, dims, config.box_cfg),
            grads: ParamGradients::zeros(cloud.len()),
            config: config.clone(),
            truth: problem.truth.cloned(),
            train_sino,
            holdout,
            cloud,
            trace: Vec::new(),
            best_val: f64::INFINITY,
            stale_checks: 0,
            stopped_early: false,
            start,
        })
    }

    pub fn is_done(&self) -> bool {
        self.stopped_early || self.trace.len() >= self.config.max_iters
    }

    pub fn cloud(&self) -> &GaussianCloud {
        &self.cloud
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    /// Splats the current cloud.
    pub fn render(&self) -> Result<VolumeGrid> {
        self.fvr.reconstruct(&self.cloud)
    }

    fn evaluate(&self, vol: &VolumeGrid) -> Result<(Option<f64>, Option<f64>)> {
        match &self.truth {
            Some(t) => Ok((Some(metrics::psnr(vol, t, None)?), Some(metrics::ssim(vol, t)?))),
            None => Ok((None, None)),
        }
    }

    /// Runs one iteration and returns its trace row. Does nothing once [`is_done`](Self::is_done).
    pub fn step(&mut self) -> Result<Option<&TraceRow>> {
        if self.is_done() {
            return Ok(None);
        }
        let config = &self.config;
        let it = self.trace.len();
        let vol = self.fvr.reconstruct(&self.cloud)?;
        let pred = self.projector.forward(&vol)?;
        let loss = total_loss(&pred, &self.train_sino, &vol, config.weights)?;
        if !loss.value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                snapshot: Box::new(self.cloud.clone()),
            });
        }
        let mut dl_dv = self.projector.adjoint(&loss.grad_pred)?;
        if let Some(g) = &loss.grad_vol {
            dl_dv.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
        self.fvr.backward_into(&self.cloud, &dl_dv, &mut self.grads)?;
        let lr = self.state.learning_rate();
        adam_step(&mut self.cloud, &self.grads, &mut self.state)?;

        let done = it + 1;
        let (psnr, ssim) = if done.is_multiple_of(config.eval_every) {
            self.evaluate(&vol)?
        } else {
            (None, None)
        };
        let mut validation_loss = None;
        if let Some((stop, val_sino, vp)) = &self.holdout {
            if done.is_multiple_of(stop.check_every) {
                let v = l1_loss(&vp.forward(&vol)?, val_sino)?.0;
                validation_loss = Some(v);
                if v < self.best_val * (1.0 - stop.min_rel_improvement) {
                    self.best_val = v;
                    self.stale_checks = 0;
                } else {
                    self.stale_checks += 1;
                    self.stopped_early = self.stale_checks >= stop.patience;
                }
            }
        }
        let mut event = None;
        if let Some(params) = &config.densify {
            if done.is_multiple_of(params.interval) && done < config.max_iters && !self.stopped_early {
                // τ applies to gradients in the optimizer's coordinate frame
                let params = DensifyParams {
                    tau: params.tau / self.state.coord_scale,
                    ..params.clone()
                };
                let seed = config.seed.wrapping_add(done as u64);
                let (next, report) = densify_and_prune(&self.cloud, &self.grads, &params, seed)?;
                if next.is_empty() {
                    log::warn!("densification at iteration {done} would remove every gaussian; skipped");
                } else {
                    self.state.remap(&report.origin);
                    self.cloud = next;
                    log::debug!(
                        "iteration {done}: {} clones, {} splits, {} prunes, {} gaussians",
                        report.clones,
                        report.splits,
                        report.prunes,
                        report.n_after
                    );
                    event = Some(DensifyEvent::from(&report));
                }
                self.grads = ParamGradients::zeros(self.cloud.len());
            }
        }
        if self.stopped_early {
            log::info!("validation loss converged after {done} iterations");
        }
        self.trace.push(TraceRow {
            iteration: done,
            loss: loss.value,
            l1: loss.l1,
            ssim_loss: loss.ssim,
            tv: loss.tv,
            psnr,
            ssim,
            validation_loss,
            n_gaussians: self.cloud.len(),
            lr,
            wall_seconds: self.start.elapsed().as_secs_f64(),
            densify: event,
        });
        Ok(self.trace.last())
    }

    /// Final volume, with metrics filled in on the last trace row.
    pub fn finish(mut self) -> Result<ReconOutput> {
        let volume = self.render()?;
        if self.trace.last().is_some_and(|r| r.psnr.is_none()) {
            let (p, s) = self.evaluate(&volume)?;
            let last = self.trace.last_mut().expect("checked above");
            last.psnr = p;
            last.ssim = s;
        }
        Ok(ReconOutput {
            volume,
            cloud: self.cloud,
            trace: self.trace,
            stopped_early: self.stopped_early,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_for(n: usize) -> OptimizerState {
        OptimizerState::new(
            n,
            AdamConfig {
                normalized_coordinates: false,
                ..AdamConfig::default()
            },
            1000,
            Dims3::new(32, 32, 32),
            BoxConfig::cube(17).unwrap(),
        )
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut cloud = GaussianCloud::new(vec![[1.5, 2.5, 3.5]], vec![1.2], vec![0.4]).unwrap();
        let before = cloud.clone();
        let mut state = state_for(1);
        adam_step(&mut cloud, &ParamGradients::zeros(1), &mut state).unwrap();
        assert_eq!(cloud, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn sigma_is_clamped_to_floor() {
        let mut cloud = GaussianCloud::new(vec![[1.0; 3]], vec![0.3 + 1e-5], vec![0.4]).unwrap();
        let mut state = state_for(1);
        let mut g = ParamGradients::zeros(1);
        g.d_sigma[0] = 1.0;
        adam_step(&mut cloud, &g, &mut state).unwrap();
        assert_eq!(cloud.sigma[0], SIGMA_FLOOR);
    }

    #[test]
    fn quadratic_toy_converges() {
        // minimize (I - 0.25)² starting from I = 0.5
        let mut cloud = GaussianCloud::new(vec![[1.0; 3]], vec![1.0], vec![0.5]).unwrap();
        let mut state = state_for(1);
        state.config.lr_initial = 1e-2;
        state.config.lr_final = 1e-3;
        state.max_iters = 2000;
        let mut g = ParamGradients::zeros(1);
        for _ in 0..2000 {
            g.d_intensity[0] = 2.0 * (cloud.intensity[0] - 0.25);
            adam_step(&mut cloud, &g, &mut state).unwrap();
        }
        assert!((cloud.intensity[0] - 0.25).abs() < 1e-3);
    }

    #[test]
    fn learning_rate_schedule_endpoints() {
        let mut state = state_for(1);
        assert!((state.learning_rate() - 3e-4).abs() < 1e-18);
        state.step = 1000;
        assert!((state.learning_rate() - 3e-5).abs() < 1e-18);
    }

    #[test]
    fn remap_keeps_survivor_moments() {
        let mut state = state_for(2);
        state.m_sigma = vec![1.0, 2.0];
        state.remap(&[Origin::Kept(1), Origin::New, Origin::Kept(0)]);
        assert_eq!(state.m_sigma, vec![2.0, 0.0, 1.0]);
        assert_eq!(state.len(), 3);
    }

    #[test]
    fn new_gaussians_take_a_first_adam_step() {
        let mut state = state_for(1);
        let mut cloud = GaussianCloud::new(vec![[4.5; 3]], vec![1.0], vec![5.0]).unwrap();
        let mut grads = ParamGradients::zeros(1);
        grads.d_intensity = vec![1.0];
        for _ in 0..50 {
            adam_step(&mut cloud, &grads, &mut state).unwrap();
        }
        state.remap(&[Origin::Kept(0), Origin::New]);
        cloud.push([4.5; 3], 1.0, 5.0);
        let mut grads = ParamGradients::zeros(2);
        grads.d_intensity = vec![1.0, 1.0];
        let lr = state.learning_rate();
        adam_step(&mut cloud, &grads, &mut state).unwrap();
        // the first bias-corrected Adam step has length lr
        assert!((5.0 - cloud.intensity[1] - lr).abs() < 1e-10);
        assert_eq!(state.age, vec![51, 1]);
    }

    #[test]
    fn fbp_init_follows_the_volume() {
        let dims = Dims3::new(8, 8, 8);
        let mut vol = VolumeGrid::zeros(dims);
        vol.set(3, 4, 5, 2.0);
        let cloud = init_cloud_fbp(&vol, 50, 1).unwrap();
        for m in &cloud.mu {
            assert_eq!(m.map(|v| v.floor()), [3.0, 4.0, 5.0]);
        }
        let per = (2.0 * std::f64::consts::PI * 2.25f64).powf(1.5);
        assert!((cloud.total_intensity() * per - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fbp_init_is_uniform_for_uniform_volume() {
        let dims = Dims3::new(8, 8, 8);
        let vol = VolumeGrid::from_fn(dims, |_, _, _| 1.0);
        let n = 51_200;
        let cloud = init_cloud_fbp(&vol, n, 2).unwrap();
        let mut counts = vec![0usize; dims.len()];
        for m in &cloud.mu {
            counts[dims.idx(m[0] as usize, m[1] as usize, m[2] as usize)] += 1;
        }
        let expected = n as f64 / dims.len() as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 511 degrees of freedom; the 99.9th percentile is about 622
        assert!(chi2 < 622.0, "{chi2}");
    }

    #[test]
    fn fbp_init_falls_back_to_uniform() {
        let vol = VolumeGrid::from_fn(Dims3::new(8, 8, 1), |_, _, _| -1.0);
        let cloud = init_cloud_fbp(&vol, 20, 3).unwrap();
        assert_eq!(cloud.len(), 20);
        assert!(cloud.mu.iter().all(|m| m[2] == 0.0));
    }

    #[test]
    fn random_init_respects_margin_and_seed() {
        let dims = Dims3::new(40, 40, 40);
        let b = BoxConfig::cube(17).unwrap();
        let a = init_cloud_random(dims, b, 100, 1).unwrap();
        assert_eq!(a, init_cloud_random(dims, b, 100, 1).unwrap());
        assert_ne!(a.mu, init_cloud_random(dims, b, 100, 2).unwrap().mu);
        assert!(a.mu.iter().flatten().all(|&v| (8.0..32.0).contains(&v)));
    }
}
