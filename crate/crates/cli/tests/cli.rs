use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gtspace"))
}

fn scratch(name: &str) -> PathBuf {
    let p = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&p);
    fs::create_dir_all(&p).unwrap();
    p
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().arg("--out").arg(dir.join("run")).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{:?} failed:\n{}", args, String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = gtspace::config::Config::default();
    cfg.world.train_scenes = 6;
    cfg.world.val_scenes = 3;
    cfg.agents.retain(|a| a.id == "L1" || a.id == "C1");
    for a in &mut cfg.agents {
        a.pretrain_epochs = 1;
        a.channels = 8;
        a.depth = 1;
    }
    cfg.gtspace.epochs = 1;
    cfg.gtspace.target_ap = 0.0;
    cfg.train.epochs = 1;
    cfg.train.onboard_epochs = 1;
    cfg.eval.seeds = vec![0];
    let p = dir.join("tiny.json");
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(bin().arg("--version").output().unwrap().status.code(), Some(0));
    assert_eq!(bin().arg("no-such-command").output().unwrap().status.code(), Some(1));
    assert_eq!(bin().args(["ablate", "no-such-variant"]).output().unwrap().status.code(), Some(1));
}

#[test]
fn report_on_empty_run_writes_header_only_csv() {
    let dir = scratch("cli-empty-report");
    let out = run(&dir, &["report"]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.join("run/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1, "{csv}");
}

#[test]
fn missing_stage_inputs_are_ordinary_errors() {
    let dir = scratch("cli-missing");
    assert_eq!(run(&dir, &["train-gt"]).status.code(), Some(1));
    assert_eq!(run(&dir, &["pretrain-agent", "--agent-preset", "nobody"]).status.code(), Some(1));
}

#[test]
fn gradcheck_writes_its_report() {
    let dir = scratch("cli-gradcheck");
    let out = run(&dir, &["gradcheck"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("run/gradcheck.json")).unwrap()).unwrap();
    assert!(!v["reports"].as_array().unwrap().is_empty());
}

#[test]
fn stage_chain_and_tampered_checkpoint() {
    let dir = scratch("cli-chain");
    let cfg = tiny_config(&dir);
    let cfg = cfg.to_str().unwrap();
    assert!(run(&dir, &["--config", cfg, "gen-data"]).status.success());
    // Later stages read the stored config.
    for id in ["L1", "C1", "weak-C"] {
        assert!(run(&dir, &["pretrain-agent", "--agent-preset", id]).status.success());
    }
    for args in [&["train-gt"][..], &["train-fusion"], &["eval"], &["sweep", "pose"], &["sweep", "latency"], &["onboard"], &["sweep", "weak"], &["ablate", "no-proj"], &["report"]] {
        assert!(run(&dir, args).status.success(), "{args:?}");
    }
    let root = dir.join("run");
    let stored: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("config.json")).unwrap()).unwrap();
    assert_eq!(stored["config"]["world"]["train_scenes"], 6);
    for f in ["metrics.csv", "report.json", "trace.jsonl", "checkpoints/fusion-full-s0.bin", "checkpoints/fusion-no-proj-s0.bin", "checkpoints/onboard-weak-C-s0.bin"] {
        assert!(root.join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(root.join("metrics.csv")).unwrap();
    for table in ["agents", "pose", "latency", "onboarding", "ablation"] {
        assert!(csv.lines().any(|l| l.starts_with(table)), "no {table} rows in\n{csv}");
    }

    let ckpt = root.join("checkpoints/agent-C1.bin");
    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    fs::write(&ckpt, bytes).unwrap();
    let out = run(&dir, &["eval"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
