//! Adaptive density control: clone, split and prune Gaussians from their averaged
//! positional-gradient magnitudes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoxConfig, Dims3, GaussianCloud, ParamGradients};

/// σ multiplier applied to split children: `2^(-1/3)`, so two children keep the parent volume.
pub const SPLIT_SCALE: f64 = 0.793_700_525_984_099_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifyParams {
    pub n_max: usize,
    /// Averaged positional-gradient threshold.
    pub tau: f64,
    /// σ threshold separating clones (σ ≤ θ) from splits (σ > θ), in voxels.
    pub theta: f64,
    /// Box extent used by the size prune `σ > 3 * box_size`.
    pub box_size: usize,
    pub interval: usize,
    pub grad_prune_enabled: bool,
    /// Volume the cloud lives in; split children are not scattered along axes of length one.
    pub dims: Dims3,
}

impl DensifyParams {
    pub const DEFAULT_N_MAX: usize = 500_000;
    pub const DEFAULT_TAU: f64 = 2e-4;
    pub const DEFAULT_THETA_FRACTION: f64 = 0.005;
    pub const DEFAULT_INTERVAL: usize = 100;

    pub fn new(dims: Dims3, box_cfg: BoxConfig) -> Self {
        Self {
            n_max: Self::DEFAULT_N_MAX,
            tau: Self::DEFAULT_TAU,
            theta: Self::DEFAULT_THETA_FRACTION * dims.body_diagonal(),
            box_size: box_cfg.extent(),
            interval: Self::DEFAULT_INTERVAL,
            grad_prune_enabled: true,
            dims,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.n_max < n {
            return Err(Error::InvalidParameter(format!(
                "n_max {} is below the current cloud size {n}",
                self.n_max
            )));
        }
        if !(self.tau > 0.0 && self.theta > 0.0) {
            return Err(Error::InvalidParameter("tau and theta must be positive".into()));
        }
        if self.interval == 0 {
            return Err(Error::InvalidParameter("densify interval must be positive".into()));
        }
        Ok(())
    }
}

/// Where an output Gaussian came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Kept(usize),
    New,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyReport {
    pub clones: usize,
    pub splits: usize,
    pub prunes: usize,
    pub n_before: usize,
    pub n_after: usize,
    /// One entry per output Gaussian.
    pub origin: Vec<Origin>,
}

/// Indices satisfying `keep`, ordered by descending score and then ascending index,
/// truncated to `limit`.
fn top_k(scores: &[f64], keep: impl Fn(usize) -> bool, limit: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| keep(i)).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(limit);
    idx
}

/// One densification event. The caller starts a fresh gradient window afterwards.
pub fn densify_and_prune(
    cloud: &GaussianCloud,
    grads: &ParamGradients,
    params: &DensifyParams,
    seed: u64,
) -> Result<(GaussianCloud, DensifyReport)> {
    grads.check_matches(cloud)?;
    params.validate(cloud.len())?;
    let n = cloud.len();
    let avg = grads.avg_pos_grad();
    let mut budget = params.n_max - n;

    let clones = top_k(&avg, |i| avg[i] >= params.tau && cloud.sigma[i] <= params.theta, budget);
    budget -= clones.len();
    // a split replaces one Gaussian by two
    let splits = top_k(&avg, |i| avg[i] >= params.tau && cloud.sigma[i] > params.theta, budget);

    let size_limit = 3.0 * params.box_size as f64;
    let mut cloned = vec![false; n];
    clones.iter().for_each(|&i| cloned[i] = true);
    let mut removed = vec![false; n];
    splits.iter().for_each(|&i| removed[i] = true);
    let mut prunes = 0;
    for i in 0..n {
        if removed[i] {
            continue;
        }
        let stale = params.grad_prune_enabled && avg[i] <= params.tau && !cloned[i];
        if stale || cloud.sigma[i] > size_limit {
            removed[i] = true;
            prunes += 1;
        }
    }

    let mut out = GaussianCloud::with_capacity(n + clones.len() + splits.len());
    let mut origin = Vec::with_capacity(out.mu.capacity());
    for i in (0..n).filter(|&i| !removed[i]) {
        let intensity = if cloned[i] { cloud.intensity[i] / 2.0 } else { cloud.intensity[i] };
        out.push(cloud.mu[i], cloud.sigma[i], intensity);
        origin.push(Origin::Kept(i));
    }
    for &i in clones.iter().filter(|&&i| !removed[i]) {
        out.push(cloud.mu[i], cloud.sigma[i], cloud.intensity[i] / 2.0);
        origin.push(Origin::New);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spans = params.dims.as_array().map(|d| d > 1);
    for &i in &splits {
        let sigma = cloud.sigma[i] * SPLIT_SCALE;
        for _ in 0..2 {
            let mut mu = cloud.mu[i];
            for d in 0..3 {
                if spans[d] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu[d] += cloud.sigma[i] * z;
                }
            }
            if sigma > size_limit {
                prunes += 1;
                continue;
            }
            out.push(mu, sigma, cloud.intensity[i]);
            origin.push(Origin::New);
        }
    }
    let report = DensifyReport {
        clones: clones.iter().filter(|&&i| !removed[i]).count(),
        splits: splits.len(),
        prunes,
        n_before: n,
        n_after: out.len(),
        origin,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> DensifyParams {
        DensifyParams::new(Dims3::new(64, 64, 64), BoxConfig::cube(17).unwrap())
    }

    fn grads_with(avg: &[f64]) -> ParamGradients {
        let mut g = ParamGradients::zeros(avg.len());
        g.accum_pos_grad_norm = avg.iter().map(|a| a * 4.0).collect();
        g.iters_since_densify = 4;
        g
    }

    #[test]
    fn clone_halves_intensity() {
        let p = params();
        let cloud = GaussianCloud::new(vec![[3.2, 4.1, 5.7]], vec![0.5], vec![0.8]).unwrap();
        assert!(0.5 <= p.theta);
        let (out, rep) = densify_and_prune(&cloud, &grads_with(&[1e-3]), &p, 0).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.intensity, vec![0.4, 0.4]);
        assert_eq!(out.mu[0], out.mu[1]);
        assert_eq!(out.total_intensity(), 0.8);
        assert_eq!(rep.clones, 1);
        assert_eq!(rep.origin, vec![Origin::Kept(0), Origin::New]);
    }

    #[test]
    fn split_scales_sigma() {
        let p = params();
        let sigma = 2.0 * p.theta;
        let cloud = GaussianCloud::new(vec![[30.0; 3]], vec![sigma], vec![0.3]).unwrap();
        let (out, rep) = densify_and_prune(&cloud, &grads_with(&[1e-3]), &p, 9).unwrap();
        assert_eq!(rep.splits, 1);
        assert_eq!(out.len(), 2);
        for s in &out.sigma {
            assert_eq!(*s, sigma * SPLIT_SCALE);
        }
        assert!((SPLIT_SCALE - 2f64.powf(-1.0 / 3.0)).abs() <= f64::EPSILON);
        assert_eq!(out.intensity, vec![0.3, 0.3]);
        assert_ne!(out.mu[0], out.mu[1]);
    }

    #[test]
    fn oversized_is_pruned() {
        let p = params();
        let cloud = GaussianCloud::new(vec![[30.0; 3], [20.0; 3]], vec![3.5 * 17.0, 1.0], vec![0.3, 0.2]).unwrap();
        let mut p = p;
        p.grad_prune_enabled = false;
        let (out, rep) = densify_and_prune(&cloud, &grads_with(&[0.0, 0.0]), &p, 0).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(rep.prunes, 1);
        assert_eq!(rep.origin, vec![Origin::Kept(1)]);
    }

    #[test]
    fn budget_caps_growth() {
        let mut p = params();
        p.n_max = 3;
        let cloud = GaussianCloud::new(vec![[5.0; 3]; 3], vec![0.5; 3], vec![1.0; 3]).unwrap();
        let (out, rep) = densify_and_prune(&cloud, &grads_with(&[1.0; 3]), &p, 0).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(rep.clones, 0);
    }

    #[test]
    fn top_k_prefers_larger_gradients() {
        let mut p = params();
        p.n_max = 4;
        let cloud = GaussianCloud::new(vec![[5.0; 3]; 3], vec![0.5; 3], vec![1.0; 3]).unwrap();
        let (out, _) = densify_and_prune(&cloud, &grads_with(&[1e-3, 5e-3, 5e-3]), &p, 0).unwrap();
        assert_eq!(out.intensity, vec![1.0, 0.5, 1.0, 0.5]);
    }

    #[test]
    fn stale_gaussians_are_pruned_when_enabled() {
        let p = params();
        let cloud = GaussianCloud::new(vec![[5.0; 3]; 2], vec![1.0; 2], vec![1.0; 2]).unwrap();
        let (out, rep) = densify_and_prune(&cloud, &grads_with(&[1e-6, 1e-3]), &p, 0).unwrap();
        // the second one splits, the first one is dropped
        assert_eq!(rep.prunes, 1);
        assert_eq!(rep.splits, 1);
        assert_eq!(out.len(), 2);
        assert!(out.sigma.iter().all(|&s| s < 1.0));
    }

    #[test]
    fn flat_volumes_keep_split_children_in_plane() {
        let mut p = params();
        p.dims = Dims3::new(64, 64, 1);
        p.theta = 0.1;
        let cloud = GaussianCloud::new(vec![[30.5, 20.5, 0.0]], vec![1.5], vec![1.0]).unwrap();
        let (out, _) = densify_and_prune(&cloud, &grads_with(&[1.0]), &p, 3).unwrap();
        assert!(out.mu.iter().all(|m| m[2] == 0.0));
    }

    #[test]
    fn same_seed_same_result() {
        let p = params();
        let cloud = GaussianCloud::new(vec![[30.0; 3]; 4], vec![2.0; 4], vec![0.5; 4]).unwrap();
        let g = grads_with(&[1e-3; 4]);
        assert_eq!(densify_and_prune(&cloud, &g, &p, 5).unwrap().0, densify_and_prune(&cloud, &g, &p, 5).unwrap().0);
    }
}
