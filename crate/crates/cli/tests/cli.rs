use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "model.dim=16",
    "--set",
    "model.heads=2",
    "--set",
    "model.blocks=1",
    "--set",
    "data.episodes=3",
    "--set",
    "data.length=32",
    "--set",
    "eval.trajectories=1",
    "--set",
    "eval.length=32",
    "--set",
    "eval.pose_episodes=1",
    "--set",
    "eval.pose_length=16",
];

fn wm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wm")).args(args).output().unwrap()
}

fn small(args: &[&str]) -> Vec<String> {
    args.iter().chain(SMALL).map(|s| s.to_string()).collect()
}

fn run(args: Vec<String>) -> Output {
    wm(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

#[test]
fn gen_data_writes_episodes_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = run(small(&["gen-data", "--episodes", "2", "--out", &p(&out)]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eps: Vec<_> = fs::read_dir(&out).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).collect();
    assert_eq!(eps.len(), 2);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["code_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn train_writes_checkpoint_and_log_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = run(small(&["train", "--stage", "1a", "--steps", "10", "--out", &p(&a)]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(a.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 10);
    assert!(a.join("run.json").exists() && a.join("manifest.json").exists());

    // rerun from the recorded configuration alone
    let b = dir.path().join("b");
    let cfg = a.join("config.txt");
    let o = run(["train", "--stage", "1a", "--steps", "10", "--out", &p(&b), "--config", &p(&cfg)].map(String::from).to_vec());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(b.join("train.log")).unwrap(), log);
    for e in fs::read_dir(&a).unwrap().flatten() {
        if e.path().extension().is_some_and(|x| x == "wpt") {
            assert_eq!(fs::read(e.path()).unwrap(), fs::read(b.join(e.file_name())).unwrap(), "{:?}", e.file_name());
        }
    }

    let c = dir.path().join("c");
    let o = run(small(&["train", "--stage", "1b", "--steps", "3", "--init", &p(&a), "--out", &p(&c)]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let e = dir.path().join("e");
    let o = run(small(&["eval", "--ckpt", &p(&c), "--steps", "2", "--out", &p(&e)]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(e.join("report.json")).unwrap()).unwrap();
    assert!(report["revisit"]["psnr"].as_f64().unwrap() > 0.0);
}

#[test]
fn usage_errors_exit_two() {
    let o = wm(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(wm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(wm(&["train", "--stage", "9", "--out", "/tmp/wm-never"]).status.code(), Some(2));
    let o = wm(&["gen-data", "--out", "/tmp/wm-never", "--set", "model.nope=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key model.nope"));
}
