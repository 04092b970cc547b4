//! End-to-end runs of the `fuselage` binary.

use std::path::Path;
use std::process::{Command, Output};

fn fuselage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fuselage")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not json: {text}"))
}

fn phantom(dir: &Path, extra: &[&str]) -> f64 {
    let mut args = vec!["phantom", "--seed", "4", "--out-dir", s(dir)];
    args.extend_from_slice(extra);
    let out = fuselage(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let info: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("phantom.json")).unwrap()).unwrap();
    info["test_age_days"].as_f64().unwrap()
}

#[test]
fn phantom_segment_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let age = phantom(d, &["--size", "32", "--n-atlases", "5", "--noise", "0.1"]);
    let age = age.to_string();
    let seg = d.join("seg");
    let out = fuselage(&[
        "segment", "--image", s(&d.join("image.nii.gz")), "--mask", s(&d.join("mask.nii.gz")),
        "--manifest", s(&d.join("manifest.json")), "--k", "5", "--age-days", &age, "--posteriors",
        "--out-dir", s(&seg),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["labels.nii.gz", "params.json", "report.json"] {
        assert!(seg.join(f).exists(), "missing {f}");
    }
    assert!(std::fs::read_dir(seg.join("posteriors")).unwrap().count() > 0);

    let csv = d.join("overlap.csv");
    let out = fuselage(&[
        "metrics", "--a", s(&seg.join("labels.nii.gz")), "--b", s(&d.join("truth.nii.gz")), "--out", s(&csv),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("label_id,label_name,dice,|A|,|B|,|A∩B|"));
    let g: f64 = text.lines().last().unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!(g >= 0.95, "generalized dice {g}");

    let out = fuselage(&["sharpness", "--image", s(&d.join("image.nii.gz"))]);
    let t: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(t > 0.0);

    let out = fuselage(&["select", "--manifest", s(&d.join("manifest.json")), "--k", "2", "--age-days", &age]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    phantom(d, &["--size", "16", "--n-atlases", "3"]);
    // More atlases requested than the manifest holds.
    let out = fuselage(&[
        "segment", "--image", s(&d.join("image.nii.gz")), "--mask", s(&d.join("mask.nii.gz")),
        "--manifest", s(&d.join("manifest.json")), "--k", "9", "--age-days", "100", "--out-dir", s(&d.join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_json(&out);
    assert!(e["error"].is_string() && e["kind"].is_string());

    let out = fuselage(&["metrics", "--a", "/nonexistent.nii.gz", "--b", "/nonexistent.nii.gz"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["kind"], "io");

    let out = fuselage(&["segment", "--k", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["kind"], "usage");
}

#[test]
fn distance_cache_is_populated_and_reused() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let age = phantom(d, &["--size", "16", "--n-atlases", "3"]).to_string();
    let cache = d.join("cache");
    std::fs::create_dir_all(&cache).unwrap();
    let run = |out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_fuselage"))
            .env("FUSELAGE_CACHE", &cache)
            .args([
                "segment", "--image", s(&d.join("image.nii.gz")), "--mask", s(&d.join("mask.nii.gz")),
                "--manifest", s(&d.join("manifest.json")), "--k", "3", "--age-days", &age, "--out-dir",
                s(&d.join(out)),
            ])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(d.join(out).join("labels.nii.gz")).unwrap()
    };
    let first = run("a");
    let cached = std::fs::read_dir(&cache).unwrap().count();
    assert!(cached > 0);
    assert_eq!(run("b"), first);
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), cached);
}
