//! Timing of the decomposed and materialized voxelization kernels.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fvr::{Fvr, ScatterMode};
use crate::grid::{BoxConfig, Dims3, GaussianCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelPath {
    Decomp,
    Nodecomp,
}

impl fmt::Display for KernelPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelPath::Decomp => "decomp",
            KernelPath::Nodecomp => "nodecomp",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub n_gaussians: usize,
    /// Cubic box side; fitted to the volume along short axes.
    pub box_side: usize,
    pub dims: Dims3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub cases: Vec<BenchCase>,
    pub paths: Vec<KernelPath>,
    pub warmup: usize,
    pub iterations: usize,
    pub seed: u64,
    pub scatter: ScatterMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            cases: vec![BenchCase {
                n_gaussians: 50_000,
                box_side: 17,
                dims: Dims3::new(128, 128, 128),
            }],
            paths: vec![KernelPath::Decomp, KernelPath::Nodecomp],
            warmup: 2,
            iterations: 10,
            seed: 0,
            // both paths share the same scatter so only the kernel differs
            scatter: ScatterMode::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 10 {
            return Err(Error::InvalidParameter(format!(
                "at least 10 timed iterations are required, got {}",
                self.iterations
            )));
        }
        if self.cases.is_empty() || self.paths.is_empty() {
            return Err(Error::InvalidParameter("benchmark needs at least one case and one path".into()));
        }
        for case in &self.cases {
            if case.n_gaussians == 0 {
                return Err(Error::EmptyCloud);
            }
            BoxConfig::fitted(case.box_side, case.dims)?.check_fits(case.dims)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub path: KernelPath,
    pub n_gaussians: usize,
    pub r#box: String,
    pub dims: String,
    pub seconds_per_iteration: f64,
    /// Estimated peak bytes held by the kernel.
    #[serde(skip)]
    pub memory_bytes: usize,
}

/// Random cloud with centers at least half a box away from the borders where possible.
pub fn random_cloud(n: usize, dims: Dims3, box_cfg: BoxConfig, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = box_cfg.half_widths();
    let extents = dims.as_array();
    let mut cloud = GaussianCloud::with_capacity(n);
    for _ in 0..n {
        let mu = [0, 1, 2].map(|d| {
            let e = extents[d] as f64;
            let m = (half[d] as f64).min((e - 1.0) / 2.0);
            if e == 1.0 {
                0.0
            } else {
                rng.gen_range(m..e - m)
            }
        });
        cloud.push(mu, rng.gen_range(0.5..1.5), rng.gen_range(0.0..1.0));
    }
    cloud
}

fn memory_estimate(path: KernelPath, case: &BenchCase, box_cfg: BoxConfig) -> usize {
    let f64s = std::mem::size_of::<f64>();
    let volume = case.dims.len() * f64s;
    let cloud = case.n_gaussians * 5 * f64s;
    let per_thread = match path {
        KernelPath::Decomp => box_cfg.dims().iter().sum::<usize>() * f64s,
        KernelPath::Nodecomp => box_cfg.len() * f64s,
    };
    volume + cloud + per_thread * rayon::current_num_threads()
}

/// Times every (case, path) pair; rows follow the case order, then the path order.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    config.validate()?;
    let mut rows = Vec::new();
    for case in &config.cases {
        let box_cfg = BoxConfig::fitted(case.box_side, case.dims)?;
        let fvr = Fvr::new(box_cfg, case.dims)?.with_mode(config.scatter);
        let cloud = random_cloud(case.n_gaussians, case.dims, box_cfg, config.seed);
        for &path in &config.paths {
            let call = || match path {
                KernelPath::Decomp => fvr.reconstruct(&cloud),
                KernelPath::Nodecomp => fvr.reconstruct_nodecomp(&cloud),
            };
            for _ in 0..config.warmup {
                call()?;
            }
            let start = Instant::now();
            for _ in 0..config.iterations {
                std::hint::black_box(call()?);
            }
            let [bw, bh, bc] = box_cfg.dims();
            rows.push(BenchRow {
                path,
                n_gaussians: case.n_gaussians,
                r#box: format!("{bw}x{bh}x{bc}"),
                dims: case.dims.to_string(),
                seconds_per_iteration: start.elapsed().as_secs_f64() / config.iterations as f64,
                memory_bytes: memory_estimate(path, case, box_cfg),
            });
        }
    }
    Ok(rows)
}
