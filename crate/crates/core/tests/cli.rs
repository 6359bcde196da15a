mod common;

use std::path::Path;
use std::process::Command;

use serde_json::Value;

use common::{export, small_config, world, Files};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = vcr::cli::run(std::iter::once("vcr").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = run(args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(shots: usize) -> Files {
    let config = vcr::eval::SynthConfig {
        images: 48,
        shots,
        ..small_config()
    };
    let w = world(&config, 11);
    export(&w.backend, &w.manifest, 3, 6, 0)
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

#[test]
fn scales_prints_the_decomposing_set() {
    assert_eq!(ok(&["scales", "--n", "10"]), "0.1 0.2 0.3 0.4 0.5 0.6 0.7 0.8 0.9 1.0\n");
    assert_eq!(ok(&["scales", "--n", "1"]), "1.0\n");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["scales", "--n", "0"]).0, 2);
    assert_eq!(run(&["frobnicate"]).0, 2);
    assert_eq!(run(&["scales", "--bogus"]).0, 2);
    assert_eq!(run(&["ablate", "--criterion", "best"]).0, 2);
    assert_eq!(run(&["zeroshot"]).0, 2);
}

#[test]
fn domain_errors_exit_1_and_name_the_file() {
    let (code, _, err) = run(&["validate", "--embeddings", "/nonexistent/x.vcre"]);
    assert_eq!(code, 1);
    assert!(err.contains("/nonexistent/x.vcre"), "{err}");
}

#[test]
fn help_lists_defaults() {
    let help = ok(&["ablate", "--help"]);
    for needle in ["--n", "[default: 10]", "--m", "[default: 100]", "[default: max-margin]", "--seed", "--workers", "--alpha", "--beta", "--grid", "--format"] {
        assert!(help.contains(needle), "missing {needle}");
    }
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_vcr");
    assert_eq!(Command::new(bin).args(["scales", "--n", "4"]).output().unwrap().status.code(), Some(0));
    assert_eq!(Command::new(bin).arg("nope").output().unwrap().status.code(), Some(2));
    assert_eq!(
        Command::new(bin).args(["validate", "--embeddings", "missing.vcre"]).output().unwrap().status.code(),
        Some(1)
    );
}

#[test]
fn decompose_lists_every_crop() {
    let f = fixture(0);
    let out = f.path("crops.json");
    ok(&["decompose", "--manifest", s(&f.manifest), "--n", "3", "--m", "4", "--out", s(&out)]);
    let manifest = json(&std::fs::read_to_string(&out).unwrap());
    let rows = manifest["rows"].as_array().unwrap();
    assert!(rows.len() <= 48 * (2 * 4 + 1));
    assert!(rows.len() >= 48 * 3);
}

#[test]
fn single_scale_refine_then_zeroshot_equals_direct_zeroshot() {
    let f = fixture(0);
    let refined = f.path("refined.vcre");
    ok(&[
        "refine",
        "--n",
        "1",
        "--embeddings",
        s(&f.embeddings),
        "--classifier",
        s(&f.classifier),
        "--manifest",
        s(&f.manifest),
        "--out",
        s(&refined),
    ]);
    let direct = json(&ok(&["zeroshot", "--embeddings", s(&f.embeddings), "--classifier", s(&f.classifier), "--manifest", s(&f.manifest)]));
    let via = json(&ok(&["zeroshot", "--embeddings", s(&refined), "--classifier", s(&f.classifier), "--manifest", s(&f.manifest)]));
    assert_eq!(via["config"]["features"], "refined");
    assert_eq!(direct["reports"][0]["results"], via["reports"][0]["results"]);
    ok(&["validate", "--embeddings", s(&refined), "--classifier", s(&f.classifier), "--manifest", s(&f.manifest)]);
}

#[test]
fn refined_store_is_identical_across_workers() {
    let f = fixture(0);
    let mut bytes = Vec::new();
    for workers in ["1", "3"] {
        let out = f.path(&format!("r{workers}.vcre"));
        ok(&[
            "refine",
            "--n",
            "3",
            "--m",
            "6",
            "--workers",
            workers,
            "--embeddings",
            s(&f.embeddings),
            "--classifier",
            s(&f.classifier),
            "--out",
            s(&out),
        ]);
        bytes.push((std::fs::read(&out).unwrap(), std::fs::read(out.with_extension("json")).unwrap()));
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn ablate_reports_are_identical_across_workers_and_formats_agree() {
    let f = fixture(0);
    let base = ["ablate", "--n", "3", "--m", "6", "--embeddings", s(&f.embeddings), "--classifier", s(&f.classifier), "--manifest", s(&f.manifest)];
    let one = ok(&[&base[..], &["--workers", "1"]].concat());
    let four = ok(&[&base[..], &["--workers", "4"]].concat());
    assert_eq!(one, four);
    let report = json(&one);
    let modes: Vec<&str> = report["reports"].as_array().unwrap().iter().map(|r| r["mode"].as_str().unwrap()).collect();
    for m in ["global_baseline", "ten_crop", "multi_crop_avg", "per_scale:1", "selected_scale_weighted", "min_entropy", "random"] {
        assert!(modes.contains(&m), "{m} missing from {modes:?}");
    }
    let csv = ok(&[&base[..], &["--format", "csv"]].concat());
    assert_eq!(csv.lines().count(), modes.len() + 1);
}

#[test]
fn fewshot_with_grid_runs() {
    let f = fixture(0);
    let out = json(&ok(&[
        "fewshot",
        "--n",
        "3",
        "--m",
        "6",
        "--shots",
        "2",
        "--grid",
        "--grid-steps",
        "3",
        "--embeddings",
        s(&f.embeddings),
        "--classifier",
        s(&f.classifier),
        "--manifest",
        s(&f.manifest),
    ]));
    let reports = out["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[1]["mode"], "vcr");
    assert_eq!(reports[1]["validation"], "train_reused");
    assert_eq!(reports[1]["results"]["total"], 48 - 2 * 4);
}

#[test]
fn domain_evaluates_each_target() {
    let f = fixture(0);
    let target = format!("{}={}", s(&f.manifest), s(&f.embeddings));
    let out = json(&ok(&[
        "domain",
        "--n",
        "3",
        "--m",
        "6",
        "--shots",
        "2",
        "--embeddings",
        s(&f.embeddings),
        "--classifier",
        s(&f.classifier),
        "--manifest",
        s(&f.manifest),
        "--target",
        &target,
        "--target",
        &target,
    ]));
    assert_eq!(out["reports"].as_array().unwrap().len(), 2);
    assert_eq!(out["reports"][0]["dataset"], "dataset");
    assert_eq!(run(&["domain", "--shots", "2", "--embeddings", s(&f.embeddings), "--classifier", s(&f.classifier), "--manifest", s(&f.manifest)]).0, 2);
}

#[test]
fn failed_run_writes_nothing() {
    let f = fixture(0);
    let out = f.path("report.json");
    // m = 7 needs crops the store does not have
    let (code, _, err) = run(&[
        "ablate",
        "--n",
        "3",
        "--m",
        "7",
        "--embeddings",
        s(&f.embeddings),
        "--classifier",
        s(&f.classifier),
        "--manifest",
        s(&f.manifest),
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 1, "{err}");
    assert!(!out.exists());
    let leftovers: Vec<_> = std::fs::read_dir(f.dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 5, "{leftovers:?}");
}

#[test]
fn synth_is_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for (i, workers) in ["1", "1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("synth{i}.json"));
        ok(&["synth", "--preset", "tiny", "--seed", "7", "--workers", workers, "--out", s(&out)]);
        files.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0], files[2]);
    let report = json(std::str::from_utf8(&files[0]).unwrap());
    assert_eq!(report["report"]["eval"]["seed"], 7);
    assert!(report["report"]["eval"].get("workers").is_none());
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 5, "worlds": 1, "modes": "global_baseline"}"#).unwrap();
    let from_file = json(&ok(&["synth", "--preset", "tiny", "--config", s(&cfg)]));
    assert_eq!(from_file["report"]["eval"]["seed"], 5);
    assert_eq!(from_file["report"]["config"]["seeds"], 1);
    assert_eq!(from_file["report"]["modes"].as_array().unwrap().len(), 1);
    let flagged = json(&ok(&["synth", "--preset", "tiny", "--config", s(&cfg), "--seed", "6"]));
    assert_eq!(flagged["report"]["eval"]["seed"], 6);
    assert_eq!(flagged["report"]["config"]["seeds"], 1);

    std::fs::write(&cfg, r#"{"sed": 5}"#).unwrap();
    assert_eq!(run(&["synth", "--preset", "tiny", "--config", s(&cfg)]).0, 2);
}

#[test]
fn seed_falls_back_to_environment() {
    let bin = env!("CARGO_BIN_EXE_vcr");
    let out = Command::new(bin)
        .args(["synth", "--preset", "tiny", "--worlds", "1", "--modes", "global_baseline"])
        .env("VCR_SEED", "13")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(json(std::str::from_utf8(&out.stdout).unwrap())["report"]["eval"]["seed"], 13);
}
