mod common;

use std::path::Path;
use std::sync::OnceLock;

use common::{code, ok, readi, workflow, write_tiny, BRIGHT_KEY, FOG_KEY};
use readi::io::{load_model, load_variant};
use readi::storedir::StoreDir;
use tempfile::TempDir;

fn finished() -> &'static TempDir {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        workflow(dir.path());
        dir
    })
}

#[test]
fn workflow_writes_csv_and_json() {
    let d = finished().path();
    for f in [
        "results/train/train_base.json",
        "results/train/train_base.curve.csv",
        "results/contrastive/contrastive_pretrain.curve.csv",
        "results/adapt_fog/adapt.summary.csv",
        "results/eval/eval.map.csv",
        "results/eval/eval.ap.csv",
        "results/eigen/eigen.profile.csv",
        "results/store/variant_report.json",
    ] {
        assert!(d.join(f).is_file(), "missing {f}");
    }
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("results/eval/eval.json")).unwrap()).unwrap();
    assert_eq!(json["pipeline"], "eval");
    let maps = std::fs::read_to_string(d.join("results/eval/eval.map.csv")).unwrap();
    assert_eq!(maps.lines().count(), 4, "{maps}");
    assert!(maps.contains(FOG_KEY) && maps.contains(BRIGHT_KEY));
    let summary = std::fs::read_to_string(d.join("results/adapt_fog/adapt.summary.csv")).unwrap();
    assert!(summary.contains("map_before") && summary.contains("map_after"));
}

#[test]
fn store_directory_survives_reopening() {
    let d = finished().path();
    let store = StoreDir::open(&d.join("store")).unwrap();
    assert_eq!(store.manifest.variants.len(), 3);
    assert_eq!(store.manifest.active.as_deref(), Some(BRIGHT_KEY));
    let (_, vs) = store.load().unwrap();
    assert_eq!(vs.active_key().map(|k| k.to_string()).as_deref(), Some(BRIGHT_KEY));
    assert_eq!(vs.keys().len(), 3);

    let copy = TempDir::new().unwrap();
    for e in std::fs::read_dir(d.join("store")).unwrap() {
        let p = e.unwrap().path();
        if p.is_file() {
            std::fs::copy(&p, copy.path().join(p.file_name().unwrap())).unwrap();
        }
    }
    std::fs::create_dir(copy.path().join("variants")).unwrap();
    for e in std::fs::read_dir(d.join("store/variants")).unwrap() {
        let p = e.unwrap().path();
        std::fs::copy(&p, copy.path().join("variants").join(p.file_name().unwrap())).unwrap();
    }
    let dir = copy.path().to_str().unwrap();
    let again = ok(d, &["variant", "--dir", dir, "prune", "--threshold", "1e-3"]);
    assert!(again.starts_with("pruned 0 of"), "{again}");
    assert_eq!(ok(d, &["variant", "--dir", dir, "activate", "base"]).trim(), "active base");
}

#[test]
fn interpolation_at_one_reproduces_the_camera_variant() {
    let d = finished().path();
    let copy = TempDir::new().unwrap();
    let c = write_tiny(copy.path());
    let dir = copy.path().join("s");
    let dir = dir.to_str().unwrap();
    ok(d, &["variant", "--dir", dir, "register", "fog.rdv", "--base", "base.rdm", "--config", c.to_str().unwrap()]);
    ok(d, &["variant", "--dir", dir, "register", "bright.rdv"]);
    let out = ok(d, &["variant", "--dir", dir, "interpolate", "--camera", BRIGHT_KEY, "--lidar", FOG_KEY, "--lambda-c", "1"]);
    let key = out.trim().strip_prefix("registered ").unwrap().to_string();
    let store = StoreDir::open(Path::new(dir)).unwrap();
    let merged = load_variant(&Path::new(dir).join("variants").join(&store.manifest.variants[&key])).unwrap();
    let camera = load_variant(&d.join("bright.rdv")).unwrap();
    let lidar = load_variant(&d.join("fog.rdv")).unwrap();
    let mut shared = 0;
    for (path, e) in &camera.entries {
        if lidar.entries.contains_key(path) {
            let m = merged.get(path).unwrap();
            assert!(m.data().iter().zip(e.value.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{path}");
            shared += 1;
        }
    }
    assert!(shared > 0);
}

#[test]
fn bench_reports_switch_and_reload_latency() {
    let d = finished().path();
    let c = d.join("tiny.toml");
    let args = ["bench", "--model", "base.rdm", "--variants", "fog.rdv", "bright.rdv", "--trials", "20", "--config", c.to_str().unwrap(), "--results", "results/bench"];
    let out = ok(d, &args);
    assert!(out.contains("switch p90"), "{out}");
    let trials = std::fs::read_to_string(d.join("results/bench/bench.trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 21);
    assert_eq!(code(d, &["bench", "--model", "base.rdm", "--variants", "fog.rdv", "--trials", "5", "--config", c.to_str().unwrap()]), 2);
}

#[test]
fn exit_codes_separate_config_from_runtime_errors() {
    let d = finished().path();
    let c = d.join("tiny.toml");
    let c = c.to_str().unwrap();
    std::fs::write(d.join("bad.toml"), "seed = \"zero\"\n").unwrap();
    std::fs::write(d.join("unknown.toml"), "sed = 1\n").unwrap();
    std::fs::write(d.join("garbage.rds"), b"not a dataset").unwrap();
    let cases: [(&[&str], i32); 10] = [
        (&["experiment", "--pipeline", "nope", "--config", c], 2),
        (&["experiment", "--config", "bad.toml"], 2),
        (&["experiment", "--config", "unknown.toml"], 2),
        (&["experiment", "--config", c], 2),
        (&["adapt", "--model", "base.rdm", "--data", "fog.rds", "--out", "x.rdv", "--key", "e9.b0.f0.s0.m11"], 2),
        (&["adapt", "--model", "base.rdm", "--data", "fog.rds", "--out", "x.rdv", "--policy", "most", "--key", FOG_KEY], 2),
        (&["frobnicate"], 2),
        (&["eval", "--model", "missing.rdm", "--data", "test.rds"], 3),
        (&["eval", "--model", "base.rdm", "--data", "garbage.rds"], 3),
        (&["variant", "--dir", "nowhere", "activate", FOG_KEY], 2),
    ];
    for (args, want) in cases {
        let out = readi(d, args);
        assert_eq!(out.status.code(), Some(want), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(code(d, &["eval", "--model", "contrastive.rdm", "--data", "test.rds", "--variant", "fog.rdv", "--config", c]), 3);
    let (_, contrastive) = load_model(&d.join("contrastive.rdm")).unwrap();
    assert!(!contrastive.contains("proj.W1"));
}
