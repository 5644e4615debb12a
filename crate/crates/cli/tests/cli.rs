use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use groundview::cgan::load_models;
use groundview::experiment::ExperimentConfig;
use groundview::nn::Module;

fn groundview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groundview"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = groundview(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, acc: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(&p, root, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["synth", "--grid", "4x4", "--seed", "7", "--out", dir.to_str().unwrap()]);
    }
    let (ta, tb) = (tree(&a.join("dataset")), tree(&b.join("dataset")));
    assert!(ta.len() > 16, "expected images and a manifest, got {:?}", ta.keys().collect::<Vec<_>>());
    assert_eq!(ta, tb);
    assert_eq!(fs::read(a.join("split.csv")).unwrap(), fs::read(b.join("split.csv")).unwrap());

    // Rerunning in place changes nothing.
    ok(&["synth", "--grid", "4x4", "--seed", "7", "--out", a.to_str().unwrap()]);
    assert_eq!(tree(&a.join("dataset")), tb);

    let other = tmp.path().join("c");
    ok(&["synth", "--grid", "4x4", "--seed", "8", "--out", other.to_str().unwrap()]);
    assert_ne!(tree(&other.join("dataset")), ta);
}

#[test]
fn resolved_config_is_written_and_reloads() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok(&["synth", "--grid", "3x5", "--seed", "2", "--out", out.to_str().unwrap()]);
    let cfg = ExperimentConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(cfg.seed, 2);
    assert_eq!(cfg, cfg.clone().resolve());
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn zero_learning_rate_leaves_parameters_at_init() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();
    ok(&["synth", "--grid", "2x2", "--images-per-cell", "8", "--seed", "3", "--out", o]);
    let stdout = ok(&["train", "--lr", "0", "--epochs", "1", "--batch-size", "8", "--ngf", "4", "--ndf", "4", "--out", o]).stdout;
    assert!(String::from_utf8_lossy(&stdout).contains("trained 3 steps"));

    let (g0, d0, m0) = load_models(&out.join("checkpoints/init.ckpt")).unwrap();
    let (g1, d1, m1) = load_models(&out.join("checkpoints/final.ckpt")).unwrap();
    assert_eq!((m0.step, m1.step), (0, 3));
    assert_eq!(m0.arch, m1.arch);
    let values = |m: &dyn Module| m.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>();
    assert_eq!(values(&g0), values(&g1));
    assert_eq!(values(&d0), values(&d1));
    assert!(out.join("losses.csv").exists());
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(groundview(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(groundview(&["synth", "--grid", "4by4"]).status.code(), Some(2));
    assert_eq!(groundview(&["train", "--lr", "fast"]).status.code(), Some(2));
    assert_eq!(groundview(&[]).status.code(), Some(2));
    assert_eq!(groundview(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().join("empty");
    let out = groundview(&["train", "--out", o.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing file"));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seed = \"seven\"\n").unwrap();
    assert_eq!(groundview(&["synth", "--config", bad.to_str().unwrap()]).status.code(), Some(1));

    let o = tmp.path().join("x");
    assert_eq!(groundview(&["synth", "--grid", "1x1", "--out", o.to_str().unwrap()]).status.code(), Some(1));
}
