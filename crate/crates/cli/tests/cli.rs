use std::path::Path;
use std::process::{Command, Output};

fn vone(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vone"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn vone")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = vone(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sample_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a.bin", "b.bin"] {
        ok(d, &["sample", "--regime", "bio", "--seed", "7", "--out", out, "--n-simple", "8", "--n-complex", "8"]);
    }
    assert_eq!(std::fs::read(d.join("a.bin")).unwrap(), std::fs::read(d.join("b.bin")).unwrap());
    ok(d, &["sample", "--regime", "bio", "--seed", "8", "--out", "c.bin", "--n-simple", "8", "--n-complex", "8"]);
    assert_ne!(std::fs::read(d.join("a.bin")).unwrap(), std::fs::read(d.join("c.bin")).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("a.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "sample");
    assert_eq!(m["seed"], 7);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vone(tmp.path(), &["sample", "--regime", "nonsense", "--out", "x.bin"]);
    assert_eq!(o.status.code(), Some(2));
    let o = vone(tmp.path(), &["sample", "--regime", "uniform", "--sf-scale", "cubic", "--out", "x.bin"]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "usage");
    assert_eq!(err["error"]["command"], "sample");
}

#[test]
fn runtime_errors_are_json() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vone(tmp.path(), &["dump-kernels", "--bank", "missing.bin", "--out", "k"]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "runtime");
    assert!(!err["error"]["message"].as_str().unwrap().is_empty());
}

#[test]
fn small_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth-data", "--out", "data", "--classes", "3", "--train-per-class", "6", "--val-per-class", "3", "--size", "32"]);
    ok(d, &["sample", "--regime", "uniform", "--seeds", "1,2", "--out", "banks", "--n-simple", "4", "--n-complex", "4", "--input-size", "32"]);
    ok(d, &["train", "--bank", "banks", "--data", "data", "--out", "ck", "--seeds", "1,2", "--epochs", "1"]);
    assert!(d.join("ck/seed_2/bank.bin").is_file());
    ok(d, &["eval", "--ckpt", "ck", "--data", "data/val", "--corruptions", "contrast", "--model", "u", "--out", "res.csv"]);
    let text = std::fs::read_to_string(d.join("res.csv")).unwrap();
    assert!(text.starts_with("model,seed,kind,severity,top1\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 6);
    ok(d, &["corrupt", "--in", "data/val", "--kind", "shot_noise", "--severity", "2", "--out", "pc"]);
    assert_eq!(walk_pngs(&d.join("pc")), 9);
    ok(d, &[
        "analyze", "--ckpt", "ck/seed_1", "--ckpt", "ck/seed_2", "--name", "a", "--name", "b", "--images", "data/val", "--out",
        "an",
    ]);
    for f in ["a/stats.csv", "b/stats.csv", "bins_rf.csv", "bins_resp.csv", "impact.csv", "correlations.csv", "manifest.json"] {
        assert!(d.join("an").join(f).is_file(), "{f}");
    }
    ok(d, &["report", "--analysis", "an", "--results", "res.csv"]);
    let summary = std::fs::read_to_string(d.join("an/summary.md")).unwrap();
    assert!(summary.contains("| u | 2 |"));
    assert!(summary.contains("impact_by_rf"));
}

fn walk_pngs(root: &Path) -> usize {
    let mut n = 0;
    for e in std::fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            n += walk_pngs(&p);
        } else if p.extension().is_some_and(|x| x == "png") {
            n += 1;
        }
    }
    n
}
