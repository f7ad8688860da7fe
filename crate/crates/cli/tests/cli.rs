use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hdrtv(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdrtv"))
        .args(args)
        .current_dir(dir)
        .env_remove("HDRTV_OUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth(dir: &Path, name: &str, seed: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--seed", seed, "--out-dir", name, "--count", "2", "--val", "1"];
    args.extend_from_slice(extra);
    ok(&hdrtv(&args, dir));
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for name in ["a", "b"] {
        synth(d, name, "7", &["--width", "48", "--height", "40"]);
    }
    let manifest = fs::read_to_string(d.join("a/manifest.txt")).unwrap();
    assert_eq!(manifest, fs::read_to_string(d.join("b/manifest.txt")).unwrap());
    assert_eq!(manifest.lines().count(), 3);
    for f in ["sdr/0000.png", "sdr/0002.png", "hdr/0001.png"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let rc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("a/run_config.json")).unwrap()).unwrap();
    assert_eq!(rc["seed"], 7);
    assert_eq!(rc["command"]["subcommand"], "synth");

    synth(d, "c", "8", &["--width", "48", "--height", "40"]);
    assert_ne!(
        fs::read(d.join("a/sdr/0000.png")).unwrap(),
        fs::read(d.join("c/sdr/0000.png")).unwrap()
    );
}

#[test]
fn eval_of_identical_images() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "s", "1", &["--width", "32", "--height", "32"]);
    let out = ok(&hdrtv(
        &["eval", "s/hdr/0000.png", "s/hdr/0000.png", "--csv", "m.csv"],
        d,
    ));
    let row = out.lines().find(|l| l.starts_with("0000.png")).unwrap();
    let cols: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(cols[1..], ["inf", "1.000000", "0.0000"]);
    let csv = fs::read_to_string(d.join("m.csv")).unwrap();
    assert!(csv.starts_with("# SSIM"));
    assert!(csv.contains("0000.png,inf,1.000000,0.000000"));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&hdrtv(&["gradcheck"], tmp.path()));
    assert!(out.contains("conv3x3") && out.contains("agcm_full") && out.contains("le_full"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(hdrtv(&["bench", "--no-such-flag"], d).status.code(), Some(64));
    assert_eq!(
        hdrtv(&["eval", "missing.png", "missing.png"], d).status.code(),
        Some(66)
    );
    fs::write(d.join("bad.cube"), "LUT_3D_SIZE 2\n0 0 0\n").unwrap();
    synth(d, "s", "1", &["--width", "32", "--height", "32"]);
    let out = hdrtv(
        &[
            "apply-lut",
            "--lut",
            "bad.cube",
            "--input",
            "s/sdr/0000.png",
            "--output",
            "o.png",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(66));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
    assert_eq!(hdrtv(&["train-agcm"], d).status.code(), Some(64));
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "data", "3", &["--task", "global", "--width", "64", "--height", "64"]);
    let train = ["--iterations", "3", "--batch", "1", "--patch", "16", "--val-every", "3"];
    let mut args = vec!["train-agcm", "--manifest", "data/manifest.txt", "--out-dir", "agcm"];
    args.extend_from_slice(&train);
    ok(&hdrtv(&args, d));
    assert!(d.join("agcm/agcm.ckpt").exists() && d.join("agcm/agcm_log.csv").exists());

    let mut args = vec![
        "train-le",
        "--manifest",
        "data/manifest.txt",
        "--agcm",
        "agcm/agcm.ckpt",
        "--out-dir",
        "le",
        "--channels",
        "4",
    ];
    args.extend_from_slice(&train);
    ok(&hdrtv(&args, d));
    let mut args = vec![
        "finetune",
        "--manifest",
        "data/manifest.txt",
        "--agcm",
        "agcm/agcm.ckpt",
        "--le",
        "le/le.ckpt",
        "--out-dir",
        "ft",
    ];
    args.extend_from_slice(&train);
    ok(&hdrtv(&args, d));
    assert!(d.join("ft/agcm_ft.ckpt").exists() && d.join("ft/le_ft.ckpt").exists());

    for stage in ["agcm", "agcm+le", "baseline"] {
        let out = format!("{stage}.png");
        ok(&hdrtv(
            &[
                "infer",
                "--stage",
                stage,
                "--agcm",
                "agcm/agcm.ckpt",
                "--le",
                "le/le.ckpt",
                "--input",
                "data/sdr/0000.png",
                "--output",
                &out,
            ],
            d,
        ));
        assert!(d.join(format!("{stage}.png.run.json")).exists());
    }
    let bake = [
        "bake-lut",
        "--agcm",
        "agcm/agcm.ckpt",
        "--size",
        "17",
        "--output",
        "m.cube",
    ];
    assert_eq!(hdrtv(&bake, d).status.code(), Some(64));
    let mut bake = bake.to_vec();
    bake.extend_from_slice(&["--condition", "data/sdr/0001.png"]);
    ok(&hdrtv(&bake, d));
    let cube = fs::read_to_string(d.join("m.cube")).unwrap();
    assert!(cube.contains("LUT_3D_SIZE 17"));
    ok(&hdrtv(
        &[
            "apply-lut",
            "--lut",
            "m.cube",
            "--input",
            "data/sdr/0000.png",
            "--output",
            "lut.png",
        ],
        d,
    ));
    ok(&hdrtv(&["eval", "lut.png", "data/hdr/0000.png"], d));
    ok(&hdrtv(
        &["manifold", "--lut", "m.cube", "--output", "m.csv", "--ply", "m.ply"],
        d,
    ));
    assert_eq!(
        fs::read_to_string(d.join("m.csv")).unwrap().lines().count(),
        17 * 17 * 17 + 1
    );
    let out = ok(&hdrtv(
        &[
            "colorcard",
            "--lut",
            "m.cube",
            "--out-dir",
            "card",
            "--width",
            "128",
            "--height",
            "64",
        ],
        d,
    ));
    assert!(out.contains("max within-patch deviation 0.000000e0"), "{out}");
    ok(&hdrtv(&["bench", "--width", "64", "--height", "64", "--reps", "1"], d));
}
