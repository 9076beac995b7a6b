//! TOML run configuration shared by every subcommand.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use dgr_core::bench::BenchCase;
use dgr_core::densify::DensifyParams;
use dgr_core::fvr::ScatterMode;
use dgr_core::loss::LossWeights;
use dgr_core::optim::{AdamConfig, InitMode, ReconConfig, ValidationStop};
use dgr_core::projector::{FbpFilter, NoiseModel, RaySamplingConfig};
use dgr_core::{evenly_spaced_angles, BoxConfig, Dims3, ScanGeometry};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Volume to project, or the phantom written by `phantom`.
    pub volume: Option<PathBuf>,
    pub sinogram: Option<PathBuf>,
    /// Ground truth for metrics during reconstruction.
    pub truth: Option<PathBuf>,
    /// Cloud snapshot to resume from.
    pub resume: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Beam {
    Parallel,
    Fan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub beam: Beam,
    pub views: usize,
    /// Views cover `[start_deg, start_deg + extent_deg)`, counterclockwise from +x.
    pub start_deg: f64,
    pub extent_deg: f64,
    pub detectors: usize,
    pub spacing: f64,
    pub source_to_origin: f64,
    pub origin_to_detector: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            beam: Beam::Fan,
            views: 60,
            start_deg: 0.0,
            extent_deg: 180.0,
            detectors: 388,
            spacing: 2.0,
            source_to_origin: 500.0,
            origin_to_detector: 500.0,
        }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> Result<ScanGeometry, CliError> {
        if self.views == 0 || !(self.extent_deg > 0.0 && self.extent_deg <= 360.0) {
            return Err(CliError::Config(format!(
                "geometry needs at least one view and an extent in (0, 360], got {} views over {}°",
                self.views, self.extent_deg
            )));
        }
        let angles = evenly_spaced_angles(self.views, self.start_deg.to_radians(), self.extent_deg.to_radians());
        let geom = match self.beam {
            Beam::Parallel => ScanGeometry::parallel(self.detectors, self.spacing, angles)?,
            Beam::Fan => ScanGeometry::fan(
                self.detectors,
                self.spacing,
                angles,
                self.source_to_origin,
                self.origin_to_detector,
            )?,
        };
        Ok(geom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    L1,
    Ssim,
    Tv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Active terms. `[l1]`, `[l1, ssim]` and `[l1, ssim, tv]` select the standard presets.
    pub terms: Vec<LossTerm>,
    /// Explicit weights; take precedence over `terms`.
    pub weights: Option<LossWeights>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            terms: vec![LossTerm::L1, LossTerm::Ssim, LossTerm::Tv],
            weights: None,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> Result<LossWeights, CliError> {
        if let Some(w) = self.weights {
            return Ok(w);
        }
        let set: BTreeSet<LossTerm> = self.terms.iter().copied().collect();
        use LossTerm::*;
        let w = if set == BTreeSet::from([L1]) {
            LossWeights::L1
        } else if set == BTreeSet::from([L1, Ssim]) {
            LossWeights::L1_SSIM
        } else {
            let f = LossWeights::FULL;
            LossWeights {
                lambda1: if set.contains(&L1) { f.lambda1 } else { 0.0 },
                lambda2: if set.contains(&Ssim) { f.lambda2 } else { 0.0 },
                lambda3: if set.contains(&Tv) { f.lambda3 } else { 0.0 },
            }
        };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_initial: f64,
    pub lr_final: f64,
    pub max_iters: usize,
    pub normalized_coordinates: bool,
    pub eval_every: usize,
    /// Write a cloud snapshot every this many iterations.
    pub checkpoint_every: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr_initial: adam.lr_initial,
            lr_final: adam.lr_final,
            max_iters: 1000,
            normalized_coordinates: adam.normalized_coordinates,
            eval_every: 10,
            checkpoint_every: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub n_max: usize,
    pub tau: f64,
    /// Clone/split threshold in voxels; defaults to 0.5% of the volume diagonal.
    pub theta: Option<f64>,
    pub interval: usize,
    pub grad_prune: bool,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_max: DensifyParams::DEFAULT_N_MAX,
            tau: DensifyParams::DEFAULT_TAU,
            theta: None,
            interval: DensifyParams::DEFAULT_INTERVAL,
            grad_prune: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub n_gaussians: Vec<usize>,
    pub boxes: Vec<usize>,
    pub dims: Vec<[usize; 3]>,
    pub iterations: usize,
    pub warmup: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            n_gaussians: vec![1, 50_000],
            boxes: vec![17],
            dims: vec![[128, 128, 128]],
            iterations: 10,
            warmup: 2,
        }
    }
}

impl BenchSection {
    /// Every combination of the configured sizes.
    pub fn cases(&self) -> Vec<BenchCase> {
        let mut cases = Vec::new();
        for &[w, h, c] in &self.dims {
            for &box_side in &self.boxes {
                for &n_gaussians in &self.n_gaussians {
                    cases.push(BenchCase {
                        n_gaussians,
                        box_side,
                        dims: Dims3::new(w, h, c),
                    });
                }
            }
        }
        cases
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Forces the reproducible scatter mode whatever `scatter` says.
    pub deterministic: bool,
    pub scatter: ScatterMode,
    /// Volume size `[w, h, c]`; taken from the input files when omitted.
    pub dims: Option<[usize; 3]>,
    #[serde(rename = "box")]
    pub box_side: usize,
    pub step_length: f64,
    pub fbp_filter: FbpFilter,
    pub paths: Paths,
    pub geometry: GeometryConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub densify: DensifyConfig,
    pub init: InitMode,
    pub noise: Option<NoiseModel>,
    /// Hold out this fraction of views and stop when their loss converges.
    pub holdout_views: Option<f64>,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            scatter: ScatterMode::default(),
            dims: None,
            box_side: 17,
            step_length: RaySamplingConfig::default().step_length,
            fbp_filter: FbpFilter::Ramp,
            paths: Paths::default(),
            geometry: GeometryConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            densify: DensifyConfig::default(),
            init: InitMode::Fbp { n: 40_000 },
            noise: None,
            holdout_views: None,
            bench: BenchSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn dims3(&self) -> Option<Dims3> {
        self.dims.map(|[w, h, c]| Dims3::new(w, h, c))
    }

    pub fn sampling(&self) -> RaySamplingConfig {
        RaySamplingConfig {
            step_length: self.step_length,
        }
    }

    pub fn scatter_mode(&self) -> ScatterMode {
        if self.deterministic {
            ScatterMode::Deterministic
        } else {
            self.scatter
        }
    }

    /// Library configuration for a reconstruction of a `dims` volume.
    pub fn recon_config(&self, dims: Dims3) -> Result<ReconConfig, CliError> {
        let box_cfg = BoxConfig::fitted(self.box_side, dims)?;
        let densify = self.densify.enabled.then(|| {
            let mut d = DensifyParams::new(dims, box_cfg);
            d.n_max = self.densify.n_max;
            d.tau = self.densify.tau;
            if let Some(theta) = self.densify.theta {
                d.theta = theta;
            }
            d.interval = self.densify.interval;
            d.grad_prune_enabled = self.densify.grad_prune;
            d
        });
        let config = ReconConfig {
            box_cfg,
            weights: self.loss.weights()?,
            adam: AdamConfig {
                lr_initial: self.optimizer.lr_initial,
                lr_final: self.optimizer.lr_final,
                normalized_coordinates: self.optimizer.normalized_coordinates,
                ..AdamConfig::default()
            },
            max_iters: self.optimizer.max_iters,
            densify,
            init: self.init,
            seed: self.seed,
            scatter: self.scatter_mode(),
            sampling: self.sampling(),
            eval_every: self.optimizer.eval_every,
            validation: self.holdout_views.map(|f| ValidationStop {
                holdout_fraction: f,
                ..ValidationStop::default()
            }),
        };
        config.validate(dims)?;
        if self.optimizer.checkpoint_every == Some(0) {
            return Err(CliError::Config("checkpoint interval must be positive".into()));
        }
        Ok(config)
    }
}

/// Fails unless every path exists.
pub fn require_existing<'a>(paths: impl IntoIterator<Item = (&'a str, &'a Path)>) -> Result<(), CliError> {
    for (what, p) in paths {
        let (raw, meta) = dgr_core::io::file_pair(p);
        if !raw.exists() || !meta.exists() {
            return Err(CliError::Config(format!("{what} {} does not exist", p.display())));
        }
    }
    Ok(())
}
