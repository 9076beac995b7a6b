//! Sparse-view fan-beam reconstruction of a 256² Shepp-Logan phantom, compared with FBP.
//!
//! Usage: `cargo run --release -p dgr-core --example sparse_view -- [iters] [n_gaussians] [view_extent_deg]`

use std::f64::consts::PI;

use dgr_core::metrics::{psnr, ssim};
use dgr_core::optim::{run_reconstruction_with, InitMode, ReconConfig, ReconProblem};
use dgr_core::phantom::shepp_logan_2d;
use dgr_core::projector::{fbp, forward_project, FbpFilter};
use dgr_core::{evenly_spaced_angles, ScanGeometry};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let iters = arg(0, 1000.0) as usize;
    let n = arg(1, 40_000.0) as usize;
    let extent = arg(2, 180.0).to_radians();

    let truth = shepp_logan_2d(256, 256)?;
    let dims = truth.dims();
    let geom = ScanGeometry::fan(388, 2.0, evenly_spaced_angles(60, 0.0, extent.min(PI)), 500.0, 500.0)?;
    let sino = forward_project(&truth, &geom)?;
    let baseline = fbp(&sino, &geom, dims, FbpFilter::Ramp)?;
    println!("fbp: psnr {:.2} dB, ssim {:.4}", psnr(&baseline, &truth, None)?, ssim(&baseline, &truth)?);

    let mut config = ReconConfig::for_volume(dims)?;
    config.max_iters = iters;
    config.init = InitMode::Fbp { n };
    config.eval_every = 50;
    let problem = ReconProblem {
        measured: &sino,
        geom: &geom,
        dims,
        truth: Some(&truth),
        initial_cloud: None,
    };
    let out = run_reconstruction_with(&problem, &config, |row, _| {
        if let Some(p) = row.psnr {
            println!(
                "iter {:5} loss {:.5} psnr {:.2} ssim {:.4} n {} t {:.1}s{}",
                row.iteration,
                row.loss,
                p,
                row.ssim.unwrap_or(f64::NAN),
                row.n_gaussians,
                row.wall_seconds,
                row.densify.as_ref().map(|e| format!(" densify {e:?}")).unwrap_or_default()
            );
        }
    })?;
    println!(
        "dgr: psnr {:.2} dB, ssim {:.4}, {} gaussians",
        psnr(&out.volume, &truth, None)?,
        ssim(&out.volume, &truth)?,
        out.cloud.len()
    );
    Ok(())
}
