//! `dgr`: phantoms, projections, FBP, Gaussian reconstruction, metrics and kernel benchmarks.

mod config;
mod error;
mod export;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dgr_core::bench::{run_bench, BenchConfig};
use dgr_core::metrics::evaluate;
use dgr_core::optim::{run_reconstruction_with, InitMode, ReconProblem};
use dgr_core::phantom::{shepp_logan_2d, shepp_logan_3d};
use dgr_core::projector::{add_noise, fbp, FbpFilter, NoiseModel, Projector};
use dgr_core::{io, Dims3, ScanGeometry, Sinogram, VolumeGrid};

use config::{require_existing, Beam, LossTerm, RunConfig};
use error::CliError;
use export::{write_slice_png, write_trace, WindowLevel};

#[derive(Parser, Debug)]
#[command(name = "dgr", version, about = "Sparse-view CT reconstruction with discretized Gaussians")]
struct Cli {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use only reproducible accumulation orders.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize a Shepp-Logan phantom.
    Phantom(PhantomArgs),
    /// Simulate a sinogram from a volume.
    Project(ProjectArgs),
    /// Filtered back-projection baseline.
    Fbp(FbpArgs),
    /// Optimize a Gaussian cloud against a sinogram.
    Reconstruct(ReconstructArgs),
    /// PSNR and SSIM of a volume against ground truth.
    Metrics(MetricsArgs),
    /// Time the decomposed and materialized voxelization kernels.
    Bench(BenchArgs),
}

/// `WxH` or `WxHxC`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct DimsArg(Dims3);

impl FromStr for DimsArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [w, h] => Ok(Self(Dims3::new(w, h, 1))),
            [w, h, c] => Ok(Self(Dims3::new(w, h, c))),
            _ => Err(format!("expected WxH or WxHxC, got {s:?}")),
        }
    }
}

#[derive(Args, Debug, Default)]
struct PngArgs {
    /// Also write the middle axial slice as a PNG.
    #[arg(long)]
    png: bool,
    /// Display window width (defaults to the value range).
    #[arg(long, requires = "level")]
    window: Option<f64>,
    /// Display window center.
    #[arg(long, requires = "window")]
    level: Option<f64>,
}

impl PngArgs {
    fn write(&self, out: &Path, name: &str, vol: &VolumeGrid) -> Result<(), CliError> {
        if !self.png {
            return Ok(());
        }
        let wl = match (self.window, self.level) {
            (Some(width), Some(level)) if width > 0.0 => WindowLevel { width, level },
            (Some(width), _) => return Err(CliError::Config(format!("window width must be positive, got {width}"))),
            _ => WindowLevel::full_range(vol),
        };
        write_slice_png(&out.join(format!("{name}.png")), vol, vol.dims().c / 2, wl)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PhantomKind {
    #[value(name = "shepp-logan-2d")]
    SheppLogan2d,
    #[value(name = "shepp-logan-3d")]
    SheppLogan3d,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long, value_enum, default_value = "shepp-logan-2d")]
    kind: PhantomKind,
    /// Defaults to 256x256 (2D) or 64x64x64 (3D).
    #[arg(long)]
    dims: Option<DimsArg>,
    #[arg(long, default_value = "phantom")]
    name: String,
    #[command(flatten)]
    png: PngArgs,
}

#[derive(Args, Debug, Default)]
struct GeometryArgs {
    #[arg(long, value_enum)]
    beam: Option<BeamArg>,
    #[arg(long)]
    views: Option<usize>,
    /// First view angle in degrees, counterclockwise from +x.
    #[arg(long)]
    start_deg: Option<f64>,
    /// Views cover `[start, start + extent)`; 90 gives a limited-angle scan.
    #[arg(long)]
    extent_deg: Option<f64>,
    #[arg(long)]
    detectors: Option<usize>,
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long)]
    source_to_origin: Option<f64>,
    #[arg(long)]
    origin_to_detector: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BeamArg {
    Parallel,
    Fan,
}

impl GeometryArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let g = &mut cfg.geometry;
        if let Some(b) = self.beam {
            g.beam = match b {
                BeamArg::Parallel => Beam::Parallel,
                BeamArg::Fan => Beam::Fan,
            };
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { g.$f = v; })* };
        }
        set!(views, start_deg, extent_deg, detectors, spacing, source_to_origin, origin_to_detector);
    }
}

#[derive(Args, Debug)]
struct ProjectArgs {
    /// Volume to project.
    #[arg(long)]
    volume: Option<PathBuf>,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Additive Gaussian noise standard deviation.
    #[arg(long, conflicts_with = "photons")]
    noise_sigma: Option<f64>,
    /// Poisson noise with this many incident photons per ray.
    #[arg(long)]
    photons: Option<f64>,
    #[arg(long, default_value = "sinogram")]
    name: String,
}

#[derive(Args, Debug)]
struct FbpArgs {
    #[arg(long)]
    sinogram: Option<PathBuf>,
    /// Volume size; defaults to the ground truth's when one is given.
    #[arg(long)]
    dims: Option<DimsArg>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_enum)]
    filter: Option<FilterArg>,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long, default_value = "fbp")]
    name: String,
    #[command(flatten)]
    png: PngArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FilterArg {
    Ramp,
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Fbp,
    Random,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    sinogram: Option<PathBuf>,
    /// Ground truth; enables PSNR/SSIM in the trace.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    dims: Option<DimsArg>,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Odd box side, e.g. 13, 15, 17 or 19.
    #[arg(long = "box")]
    box_side: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    n_gaussians: Option<usize>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    /// Start from a saved cloud snapshot instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Active loss terms, e.g. `l1,ssim`.
    #[arg(long, value_delimiter = ',', value_enum)]
    losses: Option<Vec<LossArg>>,
    /// Hold out this fraction of views and stop once their loss converges.
    #[arg(long)]
    holdout_views: Option<f64>,
    #[arg(long)]
    no_densify: bool,
    #[arg(long)]
    no_grad_prune: bool,
    #[arg(long)]
    tau: Option<f64>,
    /// Save the cloud every this many iterations.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long, default_value = "recon")]
    name: String,
    #[command(flatten)]
    png: PngArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LossArg {
    L1,
    Ssim,
    Tv,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Peak value for PSNR; defaults to the maximum of the truth.
    #[arg(long)]
    max: Option<f64>,
    /// Also write `metrics.json` to the output directory.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    n_gaussians: Option<Vec<usize>>,
    #[arg(long = "box", value_delimiter = ',')]
    boxes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<DimsArg>>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= cli.deterministic;
    if let Some(o) = cli.out {
        cfg.paths.out_dir = Some(o);
    }
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| CliError::output(&out, e))?;
    match cli.command {
        Command::Phantom(a) => cmd_phantom(&a, &out),
        Command::Project(a) => cmd_project(&a, cfg, &out),
        Command::Fbp(a) => cmd_fbp(&a, cfg, &out),
        Command::Reconstruct(a) => cmd_reconstruct(&a, cfg, &out),
        Command::Metrics(a) => cmd_metrics(&a, &out),
        Command::Bench(a) => cmd_bench(&a, cfg, &out),
    }
}

fn cmd_phantom(a: &PhantomArgs, out: &Path) -> Result<(), CliError> {
    let vol = match a.kind {
        PhantomKind::SheppLogan2d => {
            let d = a.dims.map_or(Dims3::new(256, 256, 1), |d| d.0);
            if d.c != 1 {
                return Err(CliError::Config(format!("a 2D phantom has depth 1, got {d}")));
            }
            shepp_logan_2d(d.w, d.h)?
        }
        PhantomKind::SheppLogan3d => shepp_logan_3d(a.dims.map_or(Dims3::new(64, 64, 64), |d| d.0))?,
    };
    let path = out.join(format!("{}.raw", a.name));
    io::write_volume(&path, &vol)?;
    a.png.write(out, &a.name, &vol)?;
    println!("wrote {} ({})", path.display(), vol.dims());
    Ok(())
}

fn cmd_project(a: &ProjectArgs, mut cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    a.geometry.apply(&mut cfg);
    if let Some(sigma) = a.noise_sigma {
        cfg.noise = Some(NoiseModel::Gaussian { sigma });
    }
    if let Some(photon_count) = a.photons {
        cfg.noise = Some(NoiseModel::Poisson { photon_count });
    }
    let input = a
        .volume
        .clone()
        .or(cfg.paths.volume.clone())
        .ok_or_else(|| CliError::Config("no input volume given (--volume or paths.volume)".into()))?;
    require_existing([("volume", input.as_path())])?;
    let geom = cfg.geometry.build()?;
    let vol = io::read_volume(&input)?;
    geom.validate_for(vol.dims())?;
    let mut sino = Projector::new(&geom, vol.dims(), cfg.sampling())?.forward(&vol)?;
    if let Some(model) = cfg.noise {
        sino = add_noise(&sino, model, cfg.seed)?;
    }
    let path = out.join(format!("{}.raw", a.name));
    io::write_sinogram(&path, &sino, Some(&geom))?;
    let d = sino.dims();
    println!("wrote {} ({} views x {} detectors x {} slices)", path.display(), d.views, d.detectors, d.slices);
    Ok(())
}

/// Reads the sinogram and settles the geometry and volume size it is reconstructed with.
struct Inputs {
    sino: Sinogram,
    geom: ScanGeometry,
    dims: Dims3,
    truth: Option<VolumeGrid>,
}

fn load_inputs(
    sinogram: Option<&PathBuf>,
    truth: Option<&PathBuf>,
    dims: Option<DimsArg>,
    cfg: &RunConfig,
) -> Result<Inputs, CliError> {
    let sino_path = sinogram
        .or(cfg.paths.sinogram.as_ref())
        .ok_or_else(|| CliError::Config("no input sinogram given (--sinogram or paths.sinogram)".into()))?;
    let truth_path = truth.or(cfg.paths.truth.as_ref());
    require_existing([("sinogram", sino_path.as_path())])?;
    if let Some(t) = truth_path {
        require_existing([("ground truth", t.as_path())])?;
    }
    let (sino, recorded) = io::read_sinogram(sino_path)?;
    let geom = match recorded {
        Some(g) => g,
        None => cfg.geometry.build()?,
    };
    let truth = truth_path.map(|p| io::read_volume(p)).transpose()?;
    let dims = dims
        .map(|d| d.0)
        .or(cfg.dims3())
        .or(truth.as_ref().map(|t| t.dims()))
        .ok_or_else(|| CliError::Config("volume size unknown: pass --dims or a ground truth".into()))?;
    if let Some(t) = &truth {
        if t.dims() != dims {
            return Err(CliError::Config(format!("ground truth is {} but the volume is {dims}", t.dims())));
        }
    }
    geom.validate_for(dims)?;
    let expected = dgr_core::SinoDims::for_geometry(&geom, dims.c);
    if sino.dims() != expected {
        return Err(CliError::Config(format!(
            "sinogram is {:?} but the geometry and volume imply {expected:?}",
            sino.dims()
        )));
    }
    Ok(Inputs { sino, geom, dims, truth })
}

fn print_metrics(label: &str, vol: &VolumeGrid, truth: Option<&VolumeGrid>) -> Result<(), CliError> {
    if let Some(t) = truth {
        let r = evaluate(vol, t, None)?;
        println!("{label}: PSNR {:.2} dB, SSIM {:.4}", r.psnr, r.ssim);
    }
    Ok(())
}

fn cmd_fbp(a: &FbpArgs, mut cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    a.geometry.apply(&mut cfg);
    if let Some(f) = a.filter {
        cfg.fbp_filter = match f {
            FilterArg::Ramp => FbpFilter::Ramp,
            FilterArg::Hann => FbpFilter::Hann,
        };
    }
    let inputs = load_inputs(a.sinogram.as_ref(), a.truth.as_ref(), a.dims, &cfg)?;
    let vol = fbp(&inputs.sino, &inputs.geom, inputs.dims, cfg.fbp_filter)?;
    let path = out.join(format!("{}.raw", a.name));
    io::write_volume(&path, &vol)?;
    a.png.write(out, &a.name, &vol)?;
    println!("wrote {}", path.display());
    print_metrics("fbp", &vol, inputs.truth.as_ref())
}

fn cmd_reconstruct(a: &ReconstructArgs, mut cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    a.geometry.apply(&mut cfg);
    if let Some(b) = a.box_side {
        cfg.box_side = b;
    }
    if let Some(i) = a.iters {
        cfg.optimizer.max_iters = i;
    }
    if let Some(n) = a.n_gaussians {
        cfg.init = match cfg.init {
            InitMode::Random { .. } => InitMode::Random { n },
            InitMode::Fbp { .. } => InitMode::Fbp { n },
        };
    }
    if let Some(init) = a.init {
        let n = match cfg.init {
            InitMode::Fbp { n } | InitMode::Random { n } => n,
        };
        cfg.init = match init {
            InitArg::Fbp => InitMode::Fbp { n },
            InitArg::Random => InitMode::Random { n },
        };
    }
    if let Some(r) = &a.resume {
        cfg.paths.resume = Some(r.clone());
    }
    if let Some(terms) = &a.losses {
        cfg.loss.weights = None;
        cfg.loss.terms = terms
            .iter()
            .map(|t| match t {
                LossArg::L1 => LossTerm::L1,
                LossArg::Ssim => LossTerm::Ssim,
                LossArg::Tv => LossTerm::Tv,
            })
            .collect();
    }
    if let Some(f) = a.holdout_views {
        cfg.holdout_views = Some(f);
    }
    cfg.densify.enabled &= !a.no_densify;
    cfg.densify.grad_prune &= !a.no_grad_prune;
    if let Some(t) = a.tau {
        cfg.densify.tau = t;
    }
    if let Some(k) = a.checkpoint_every {
        cfg.optimizer.checkpoint_every = Some(k);
    }
    if let Some(r) = &cfg.paths.resume {
        require_existing([("cloud snapshot", r.as_path())])?;
    }

    let inputs = load_inputs(a.sinogram.as_ref(), a.truth.as_ref(), a.dims, &cfg)?;
    let recon_cfg = cfg.recon_config(inputs.dims)?;
    let resume = cfg.paths.resume.as_ref().map(|p| io::read_cloud(p)).transpose()?;
    let problem = ReconProblem {
        measured: &inputs.sino,
        geom: &inputs.geom,
        dims: inputs.dims,
        truth: inputs.truth.as_ref(),
        initial_cloud: resume.as_ref(),
    };
    let checkpoint = cfg.optimizer.checkpoint_every;
    let mut checkpoint_error = None;
    let result = run_reconstruction_with(&problem, &recon_cfg, |row, cloud| {
        if let (Some(p), Some(s)) = (row.psnr, row.ssim) {
            log::info!("iteration {}: loss {:.5}, PSNR {p:.2} dB, SSIM {s:.4}", row.iteration, row.loss);
        }
        if checkpoint.is_some_and(|k| row.iteration % k == 0) && checkpoint_error.is_none() {
            let path = out.join(format!("cloud_{:05}.raw", row.iteration));
            checkpoint_error = io::write_cloud(&path, cloud).err();
        }
    });
    if let Some(e) = checkpoint_error {
        return Err(e.into());
    }
    let output = match result {
        Ok(o) => o,
        Err(dgr_core::Error::NonFiniteLoss { iteration, snapshot }) => {
            let path = out.join("nonfinite_snapshot.raw");
            io::write_cloud(&path, &snapshot)?;
            eprintln!("saved the last finite cloud to {}", path.display());
            return Err(dgr_core::Error::NonFiniteLoss { iteration, snapshot }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let vol_path = out.join(format!("{}.raw", a.name));
    io::write_volume(&vol_path, &output.volume)?;
    io::write_cloud(&out.join("cloud.raw"), &output.cloud)?;
    write_trace(&out.join("trace.csv"), &output.trace)?;
    a.png.write(out, &a.name, &output.volume)?;
    println!(
        "wrote {} after {} iterations{} ({} gaussians)",
        vol_path.display(),
        output.trace.len(),
        if output.stopped_early { ", validation loss converged" } else { "" },
        output.cloud.len()
    );
    print_metrics("dgr", &output.volume, inputs.truth.as_ref())
}

fn cmd_metrics(a: &MetricsArgs, out: &Path) -> Result<(), CliError> {
    require_existing([("reconstruction", a.recon.as_path()), ("ground truth", a.truth.as_path())])?;
    let recon = io::read_volume(&a.recon)?;
    let truth = io::read_volume(&a.truth)?;
    let report = evaluate(&recon, &truth, a.max)?;
    println!("volume: PSNR {:.4} dB, SSIM {:.6} (MAX {})", report.psnr, report.ssim, report.max_value);
    for p in &report.planes {
        println!("{:?} slices: PSNR {:.4} dB, SSIM {:.6}", p.plane, p.mean_psnr, p.mean_ssim);
    }
    if a.json {
        let path = out.join("metrics.json");
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::output(&path, e))?;
        std::fs::write(&path, text).map_err(|e| CliError::output(&path, e))?;
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs, mut cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    let b = &mut cfg.bench;
    if let Some(n) = &a.n_gaussians {
        b.n_gaussians = n.clone();
    }
    if let Some(x) = &a.boxes {
        b.boxes = x.clone();
    }
    if let Some(d) = &a.dims {
        b.dims = d.iter().map(|d| d.0.as_array()).collect();
    }
    if let Some(i) = a.iterations {
        b.iterations = i;
    }
    if let Some(w) = a.warmup {
        b.warmup = w;
    }
    let config = BenchConfig {
        cases: cfg.bench.cases(),
        warmup: cfg.bench.warmup,
        iterations: cfg.bench.iterations,
        seed: cfg.seed,
        scatter: cfg.scatter_mode(),
        ..BenchConfig::default()
    };
    let rows = run_bench(&config)?;
    let path = out.join("bench.csv");
    let mut file = csv::Writer::from_path(&path).map_err(|e| CliError::output(&path, e))?;
    let mut stdout = csv::Writer::from_writer(std::io::stdout());
    for r in &rows {
        file.serialize(r).map_err(|e| CliError::output(&path, e))?;
        stdout.serialize(r).map_err(|e| CliError::output("stdout", e))?;
        eprintln!(
            "{} n={} box={} dims={}: estimated peak memory {:.1} MiB",
            r.path,
            r.n_gaussians,
            r.r#box,
            r.dims,
            r.memory_bytes as f64 / (1024.0 * 1024.0)
        );
    }
    file.flush().map_err(|e| CliError::output(&path, e))?;
    stdout.flush().map_err(|e| CliError::output("stdout", e))?;
    Ok(())
}
