use std::path::Path;
use std::process::{Command, Output};

fn iffnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iffnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = iffnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small configuration so training runs take well under a second.
fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.cfg");
    std::fs::write(
        &path,
        "# tiny run\ntrain.steps = 4\ntrain.train_items = 8\ntrain.eval_items = 4\n\
         train.batch_size = 2\ntrain.warmup_steps = 2\narch.blocks = 1\narch.filters = 4\n\
         sim.frames = 12\nsim.bins = 10\n",
    )
    .unwrap();
    path
}

#[test]
fn simulate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["simulate", "--n", "3", "--seed", "5", "--out", p(dir)]);
    }
    let files = dir_bytes(&a);
    assert_eq!(files.len(), 10);
    assert_eq!(files, dir_bytes(&b));
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck"]);
    assert!(stdout.contains("max relative error"));
}

#[test]
fn train_eval_fuse_and_panels() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let ckpt = tmp.path().join("ckpt");
    let stdout = ok(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&ckpt),
        "--report-every",
        "0",
    ]);
    assert!(stdout.contains("mse_fused="));
    assert_eq!(
        std::fs::read_to_string(ckpt.join("metrics.tsv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let data = tmp.path().join("data");
    ok(&[
        "simulate",
        "--config",
        p(&cfg),
        "--n",
        "2",
        "--out",
        p(&data),
    ]);
    let stdout = ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)]);
    assert!(stdout.contains("items=2"));
    for key in ["mse_fused=", "mse_enh_input=", "mse_noisy_input="] {
        assert!(stdout.contains(key), "{stdout}");
    }

    let fused = tmp.path().join("fused");
    ok(&[
        "fuse",
        "--checkpoint",
        p(&ckpt),
        "--enhanced",
        p(&data.join("00000.enh.ift")),
        "--noisy",
        p(&data.join("00000.noisy.ift")),
        "--out",
        p(&fused),
    ]);
    assert!(fused.join("fused.ift").is_file() && fused.join("mask.ift").is_file());

    let panels = tmp.path().join("panels");
    ok(&[
        "export-panels",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--index",
        "1",
        "--out",
        p(&panels),
    ]);
    let names: Vec<String> = dir_bytes(&panels).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".pgm")).count(), 5);
    assert_eq!(names.iter().filter(|n| n.ends_with(".csv")).count(), 5);

    let out = iffnet(&[
        "export-panels",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--index",
        "9",
        "--out",
        p(&panels),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of range"));
}

#[test]
fn fuse_accepts_raw_waveforms() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let ckpt = tmp.path().join("ckpt");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&ckpt),
        "--report-every",
        "0",
    ]);
    let tone: Vec<u8> = (0..8000)
        .map(|i| 0.3 * (i as f32 * 0.2).sin())
        .flat_map(f32::to_le_bytes)
        .collect();
    let noisy: Vec<u8> = (0..8000)
        .map(|i| 0.3 * (i as f32 * 0.2).sin() + 0.05 * (i as f32 * 1.7).cos())
        .flat_map(f32::to_le_bytes)
        .collect();
    let (e, n) = (tmp.path().join("e.f32"), tmp.path().join("n.f32"));
    std::fs::write(&e, tone).unwrap();
    std::fs::write(&n, noisy).unwrap();
    let out = tmp.path().join("out");
    ok(&[
        "fuse",
        "--checkpoint",
        p(&ckpt),
        "--enhanced",
        p(&e),
        "--noisy",
        p(&n),
        "--out",
        p(&out),
    ]);
    assert!(out.join("fused.ift").is_file());
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let ckpt = tmp.path().join("ckpt");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--steps",
        "2",
        "--filters",
        "3",
        "--out",
        p(&ckpt),
        "--report-every",
        "0",
    ]);
    assert_eq!(
        std::fs::read_to_string(ckpt.join("metrics.tsv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    let manifest = std::fs::read_to_string(ckpt.join("manifest.txt")).unwrap();
    assert!(
        manifest
            .lines()
            .any(|l| l.replace(' ', "") == "arch.filters=3"),
        "{manifest}"
    );
    assert!(
        manifest
            .lines()
            .any(|l| l.replace(' ', "") == "arch.blocks=1"),
        "{manifest}"
    );
}

#[test]
fn bad_invocations_fail_with_diagnostics() {
    let out = iffnet(&["train", "--no-such-flag"]);
    assert!(!out.status.success());

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let out = iffnet(&["eval", "--checkpoint", p(&missing)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.starts_with("error:") && err.contains("nothing"),
        "{err}"
    );

    let out = iffnet(&["simulate", "--n", "2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));

    let out = iffnet(&["train", "--filters", "0", "--out", p(tmp.path())]);
    assert!(!out.status.success());
}
