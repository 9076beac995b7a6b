use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dgr_core::projector::forward_project;
use dgr_core::{io, Dims3, VolumeGrid};

fn dgr(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgr"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = dgr(out, args);
    assert!(
        o.status.success(),
        "dgr {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_SCAN: [&str; 6] = ["--views", "24", "--detectors", "100", "--spacing", "2"];

/// 64² phantom and its sinogram.
fn small_problem(dir: &Path) -> (PathBuf, PathBuf) {
    ok(dir, &["phantom", "--dims", "64x64"]);
    let phantom = dir.join("phantom.raw");
    let mut args = vec!["project", "--volume", s(&phantom)];
    args.extend(SMALL_SCAN);
    ok(dir, &args);
    (phantom, dir.join("sinogram.raw"))
}

fn trace_losses(path: &Path) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let col = r.headers().unwrap().iter().position(|h| h == "loss").unwrap();
    r.records().map(|rec| rec.unwrap()[col].parse().unwrap()).collect()
}

#[test]
fn phantom_is_deterministic_and_normalized() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["phantom", "--png"]);
    ok(b.path(), &["phantom"]);
    for f in ["phantom.raw", "phantom.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    assert!(a.path().join("phantom.png").exists());
    let v = io::read_volume(&a.path().join("phantom.raw")).unwrap();
    assert_eq!(v.dims(), Dims3::new(256, 256, 1));
    assert_eq!(v.max(), 1.0);
    assert_eq!(v.get(0, 0, 0), 0.0);
    assert_eq!(dgr(a.path(), &["phantom", "--dims", "16x64"]).status.code(), Some(2));
}

#[test]
fn noiseless_projection_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (phantom, sino) = small_problem(dir.path());
    let vol = io::read_volume(&phantom).unwrap();
    let (read, geom) = io::read_sinogram(&sino).unwrap();
    let expected = forward_project(&vol, &geom.unwrap()).unwrap();
    let as_f32: Vec<f64> = expected.data().iter().map(|&v| v as f32 as f64).collect();
    assert_eq!(read.data(), &as_f32[..]);
}

#[test]
fn limited_angle_views_stay_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let (phantom, _) = small_problem(dir.path());
    let mut args = vec!["project", "--volume", s(&phantom), "--extent-deg", "90", "--name", "la"];
    args.extend(SMALL_SCAN);
    ok(dir.path(), &args);
    let (_, geom) = io::read_sinogram(&dir.path().join("la.raw")).unwrap();
    let angles = geom.unwrap().angles;
    assert_eq!(angles.len(), 24);
    assert!(angles.iter().all(|&a| (0.0..std::f64::consts::FRAC_PI_2).contains(&a)));
}

#[test]
fn noise_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (phantom, _) = small_problem(dir.path());
    let run = |name: &str, seed: &str| {
        let mut args = vec!["project", "--volume", s(&phantom), "--noise-sigma", "0.1", "--seed", seed, "--name", name];
        args.extend(SMALL_SCAN);
        ok(dir.path(), &args);
        fs::read(dir.path().join(format!("{name}.raw"))).unwrap()
    };
    assert_eq!(run("a", "3"), run("b", "3"));
    assert_ne!(run("a", "3"), run("c", "4"));
}

#[test]
fn fbp_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (phantom, sino) = small_problem(dir.path());
    let stdout = ok(dir.path(), &["fbp", "--sinogram", s(&sino), "--truth", s(&phantom), "--png"]);
    assert!(stdout.contains("fbp: PSNR"));
    assert!(dir.path().join("fbp.png").exists());
    let stdout = ok(dir.path(), &["metrics", "--recon", s(&phantom), "--truth", s(&phantom), "--json"]);
    assert!(stdout.contains("PSNR 200.0000 dB, SSIM 1.000000"), "{stdout}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["planes"].as_array().unwrap().len(), 3);
}

#[test]
fn metrics_analytic_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let dims = Dims3::new(32, 32, 1);
    io::write_volume(&dir.path().join("zero.raw"), &VolumeGrid::zeros(dims)).unwrap();
    // 0.1 is not exact in f32, so PSNR is compared loosely
    io::write_volume(&dir.path().join("tenth.raw"), &VolumeGrid::from_fn(dims, |_, _, _| 0.1)).unwrap();
    let zero = dir.path().join("zero.raw");
    let tenth = dir.path().join("tenth.raw");
    let stdout = ok(dir.path(), &["metrics", "--recon", s(&tenth), "--truth", s(&zero), "--max", "1"]);
    assert!(stdout.starts_with("volume: PSNR 20.0000 dB"), "{stdout}");
    let other = dir.path().join("other.raw");
    io::write_volume(&other, &VolumeGrid::zeros(Dims3::new(16, 32, 1))).unwrap();
    assert_eq!(
        dgr(dir.path(), &["metrics", "--recon", s(&other), "--truth", s(&zero)]).status.code(),
        Some(2)
    );
}

#[test]
fn reconstruct_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (phantom, sino) = small_problem(dir.path());
    let args = [
        "reconstruct",
        "--sinogram",
        s(&sino),
        "--truth",
        s(&phantom),
        "--iters",
        "12",
        "--n-gaussians",
        "3000",
        "--deterministic",
        "--png",
    ];
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    ok(first.path(), &args);
    ok(second.path(), &args);
    for f in ["recon.raw", "cloud.raw", "recon.png", "trace.csv"] {
        assert!(first.path().join(f).exists(), "{f} missing");
    }
    for f in ["recon.raw", "cloud.raw"] {
        assert_eq!(fs::read(first.path().join(f)).unwrap(), fs::read(second.path().join(f)).unwrap());
    }
    let mut r = csv::Reader::from_path(first.path().join("trace.csv")).unwrap();
    let headers: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    for h in ["iteration", "loss", "psnr", "ssim", "n_gaussians", "wall_seconds", "clones", "splits", "prunes", "n_after"] {
        assert!(headers.contains(&h.to_string()), "missing column {h}");
    }
    assert_eq!(r.records().count(), 12);
}

#[test]
fn resuming_reproduces_the_next_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (_, sino) = small_problem(dir.path());
    let common = ["--sinogram", s(&sino), "--dims", "64x64", "--n-gaussians", "2000", "--deterministic"];
    let a = tempfile::tempdir().unwrap();
    let mut args = vec!["reconstruct", "--iters", "4", "--checkpoint-every", "3"];
    args.extend(common);
    ok(a.path(), &args);
    let snapshot = a.path().join("cloud_00003.raw");
    let b = tempfile::tempdir().unwrap();
    let mut args = vec!["reconstruct", "--iters", "1", "--resume", s(&snapshot)];
    args.extend(common);
    ok(b.path(), &args);
    let expected = trace_losses(&a.path().join("trace.csv"))[3];
    let resumed = trace_losses(&b.path().join("trace.csv"))[0];
    assert!((resumed - expected).abs() <= 1e-6 * expected.abs(), "{resumed} vs {expected}");
}

#[test]
fn box_overrides_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let (_, sino) = small_problem(dir.path());
    for b in ["13", "15", "17", "19"] {
        ok(
            dir.path(),
            &["reconstruct", "--sinogram", s(&sino), "--dims", "64x64", "--iters", "1", "--n-gaussians", "500", "--box", b],
        );
    }
    let o = dgr(
        dir.path(),
        &["reconstruct", "--sinogram", s(&sino), "--dims", "64x64", "--box", "16"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_inputs_fail_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let o = dgr(dir.path(), &["reconstruct", "--sinogram", "nowhere.raw", "--dims", "64x64"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
    assert_eq!(dgr(dir.path(), &["reconstruct", "--dims", "64x64"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "no_such_key = 3").unwrap();
    assert_eq!(dgr(dir.path(), &["--config", s(&cfg), "phantom"]).status.code(), Some(2));
}

#[test]
fn config_file_drives_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let (phantom, sino) = small_problem(dir.path());
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 5\nbox = 13\n[paths]\nsinogram = {:?}\ntruth = {:?}\n[optimizer]\nmax_iters = 3\n[init]\nmode = \"random\"\nn = 800\n[loss]\nterms = [\"l1\", \"ssim\"]\n",
            s(&sino),
            s(&phantom)
        ),
    )
    .unwrap();
    let out = tempfile::tempdir().unwrap();
    ok(out.path(), &["--config", s(&cfg), "reconstruct", "--no-densify"]);
    assert_eq!(trace_losses(&out.path().join("trace.csv")).len(), 3);
    assert_eq!(io::read_cloud(&out.path().join("cloud.raw")).unwrap().len(), 800);
}

#[test]
fn shipped_config_drives_phantom_and_project() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/sparse_view.toml");
    for cmd in ["phantom", "project"] {
        let o = Command::new(env!("CARGO_BIN_EXE_dgr"))
            .current_dir(dir.path())
            .arg("--config")
            .arg(&cfg)
            .arg(cmd)
            .output()
            .unwrap();
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let (sino, geom) = io::read_sinogram(&dir.path().join("runs/sparse/sinogram.raw")).unwrap();
    assert_eq!((sino.dims().views, sino.dims().detectors), (60, 388));
    assert!(geom.is_some());
}

#[test]
fn bench_reports_one_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(
        dir.path(),
        &["bench", "--n-gaussians", "1,50", "--box", "5,7", "--dims", "16x16x16", "--warmup", "0"],
    );
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "path,n_gaussians,box,dims,seconds_per_iteration");
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
    assert!(dir.path().join("bench.csv").exists());
    assert_eq!(dgr(dir.path(), &["bench", "--iterations", "3"]).status.code(), Some(2));
}
