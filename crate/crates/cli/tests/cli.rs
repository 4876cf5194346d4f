use std::path::Path;
use std::process::{Command, Output};

use dptempcoh::manifest::verify_lineage;
use dptempcoh::{Config, RunManifest};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dptempcoh"));
    c.env_remove("DPTC_SEED").env("RUST_LOG", "warn");
    c
}

fn run(workdir: &Path, args: &[&str]) -> Output {
    let out = bin().arg("--workdir").arg(workdir).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Toy preset shrunk to 16×16 frames and a handful of steps.
fn tiny_config(dir: &Path) {
    let mut c = Config::toy();
    c.toy.clips = 2;
    c.toy.size = 16;
    c.codec.iterations = 3;
    c.codec.bank_size_vision = 16;
    c.train.iterations = 2;
    c.train.ckpt_every = 1;
    c.motion.bank_size_motion = 2;
    c.motion.kmeans_iters = 5;
    c.save(&dir.join("tiny.json")).unwrap();
}

fn frames_in(dir: &Path) -> usize {
    std::fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count()
}

#[test]
fn degrade_contract() {
    let root = tempfile::tempdir().unwrap();
    let wd = root.path();
    tiny_config(wd);
    assert_eq!(code(&run(wd, &["--config", "tiny.json", "toy-data", "--out", "hq"])), 0);
    let args = |out: &str| {
        ["--config", "tiny.json", "degrade", "--in", "hq", "--out", out, "--seed", "3", "--rho", "1:2", "--b", "1:2", "--sigma", "0:5", "--w", "60:90"]
            .map(String::from)
    };
    let a = run(wd, &args("lq_a").iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&a), 0);
    assert!(wd.join("lq_a/manifest.json").is_file());
    let csv = std::fs::read_to_string(wd.join("lq_a/manifest.csv")).unwrap();
    assert!(csv.starts_with("clip_id,hq_dir,lq_dir,seed,rho,b,sigma,w"));
    assert_eq!(csv.lines().count(), 3);
    let m = RunManifest::load(&wd.join("lq_a")).unwrap();
    assert_eq!(m.seed, 3);
    assert!(m.notes.contains_key("jpeg_codec"));
    assert_eq!(m.parents.len(), 1, "the toy-data manifest is recorded as parent");

    assert_eq!(code(&run(wd, &args("lq_b").iter().map(String::as_str).collect::<Vec<_>>())), 0);
    for clip in ["clip_0000", "clip_0001"] {
        for k in 0..8 {
            let f = format!("{clip}/{k:06}.png");
            assert_eq!(std::fs::read(wd.join("lq_a").join(&f)).unwrap(), std::fs::read(wd.join("lq_b").join(&f)).unwrap());
        }
    }

    assert_eq!(code(&run(wd, &["degrade", "--in", "nowhere", "--out", "x"])), 2);
    assert_eq!(code(&run(wd, &["degrade", "--in", "hq", "--out", "x", "--rho", "5:1"])), 3);
    assert_eq!(code(&run(wd, &["degrade", "--in", "hq", "--out", "x", "--rho", "a:b"])), 3);
    assert_eq!(code(&run(wd, &["--set", "codec.nope=1", "toy-data"])), 3);
}

#[test]
fn missing_prerequisites_exit_4() {
    let root = tempfile::tempdir().unwrap();
    let wd = root.path();
    tiny_config(wd);
    assert_eq!(code(&run(wd, &["--config", "tiny.json", "toy-data", "--out", "data/hq"])), 0);
    let train = run(wd, &["--config", "tiny.json", "train"]);
    assert_eq!(code(&train), 4);
    assert!(String::from_utf8_lossy(&train.stderr).contains("pretrain-codec"));
    assert_eq!(code(&run(wd, &["--config", "tiny.json", "build-motion-bank"])), 4);
    assert_eq!(code(&run(wd, &["--config", "tiny.json", "restore", "--in", "data/hq", "--out", "r"])), 4);
}

#[test]
fn seed_falls_back_to_environment() {
    let root = tempfile::tempdir().unwrap();
    let wd = root.path();
    tiny_config(wd);
    let out = bin()
        .args(["--workdir", wd.to_str().unwrap(), "--config", "tiny.json", "toy-data", "--out", "a"])
        .env("DPTC_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(RunManifest::load(&wd.join("a")).unwrap().seed, 11);
    let out = bin()
        .args(["--workdir", wd.to_str().unwrap(), "--config", "tiny.json", "--seed", "4", "toy-data", "--out", "b"])
        .env("DPTC_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(RunManifest::load(&wd.join("b")).unwrap().seed, 4);
    let bad = bin().args(["--workdir", wd.to_str().unwrap(), "toy-data"]).env("DPTC_SEED", "x").output().unwrap();
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn full_pipeline_on_tiny_clips() {
    let root = tempfile::tempdir().unwrap();
    let wd = root.path();
    tiny_config(wd);
    let c = |args: &[&str]| {
        let mut v = vec!["--config", "tiny.json"];
        v.extend_from_slice(args);
        code(&run(wd, &v))
    };
    assert_eq!(c(&["toy-data", "--out", "data/hq"]), 0);
    assert_eq!(c(&["toy-data", "--out", "data/long", "--frames", "12", "--clips", "1"]), 0);
    assert_eq!(c(&["degrade", "--in", "data/hq", "--out", "data/lq"]), 0);
    assert_eq!(c(&["pretrain-codec"]), 0);
    for f in ["codec.ckpt", "step_1.ckpt", "step_3.ckpt", "log.jsonl", "config.json", "manifest.json"] {
        assert!(wd.join("runs/codec").join(f).is_file(), "{f}");
    }
    assert_eq!(c(&["build-motion-bank"]), 0);
    assert!(wd.join("motion_bank/motion_bank.bin").is_file());
    assert!(wd.join("motion_bank/motion_bank.json").is_file());
    assert_eq!(c(&["train"]), 0);
    let log = std::fs::read_to_string(wd.join("runs/restore/log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let rec: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for k in ["step", "consi", "adv_g", "adv_d", "bank", "lr", "seed"] {
        assert!(rec.get(k).is_some(), "log record lacks {k}");
    }

    // rerun is a no-op
    let model = wd.join("runs/restore/model.ckpt");
    let before = std::fs::metadata(&model).unwrap().modified().unwrap();
    assert_eq!(c(&["train"]), 0);
    assert_eq!(std::fs::metadata(&model).unwrap().modified().unwrap(), before);
    assert_eq!(std::fs::read_to_string(wd.join("runs/restore/log.jsonl")).unwrap().lines().count(), 2);

    assert_eq!(c(&["restore", "--in", "data/lq", "--out", "restored"]), 0);
    assert_eq!(frames_in(&wd.join("restored/clip_0000")), 8);
    assert_eq!(c(&["restore", "--in", "data/long/clip_0000", "--out", "restored_long"]), 0);
    assert_eq!(frames_in(&wd.join("restored_long/clip_0000")), 12);
    assert_eq!(c(&["eval", "--restored", "restored", "--reference", "data/hq", "--out", "eval"]), 0);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(wd.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["clips"].as_array().unwrap().len(), 2);
    let trace = std::fs::read_to_string(wd.join("eval/traces/clip_0000.csv")).unwrap();
    assert!(trace.starts_with("frame,perceptual,psnr"));
    assert!(wd.join("eval/report.csv").is_file());

    let chain: Vec<String> = verify_lineage(&wd.join("eval")).unwrap().into_iter().map(|m| m.command).collect();
    for stage in ["eval", "restore", "train", "pretrain-codec", "build-motion-bank", "degrade", "toy-data"] {
        assert!(chain.iter().any(|c| c == stage), "{stage} missing from {chain:?}");
    }

    assert_eq!(c(&["export-attention", "--in", "data/lq/clip_0001", "--query", "3,1,0", "--out", "viz"]), 0);
    let dir = wd.join("viz/attn/clip_0001/3_1_0");
    for k in 0..8 {
        assert!(dir.join(format!("frame{k}.png")).is_file());
    }
    let weights = std::fs::read_to_string(dir.join("weights.csv")).unwrap();
    let total: f64 = weights.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-4, "{total}");
    assert_eq!(c(&["export-attention", "--in", "data/lq/clip_0001", "--query", "9,0,0", "--out", "viz"]), 3);
}

#[test]
fn interrupted_training_resumes() {
    let root = tempfile::tempdir().unwrap();
    let wd = root.path();
    tiny_config(wd);
    let c = |args: &[&str]| {
        let mut v = vec!["--config", "tiny.json"];
        v.extend_from_slice(args);
        code(&run(wd, &v))
    };
    assert_eq!(c(&["toy-data", "--out", "data/hq"]), 0);
    assert_eq!(c(&["pretrain-codec"]), 0);
    let dir = wd.join("runs/codec");
    let full = std::fs::read(dir.join("codec.ckpt")).unwrap();
    // Simulate a crash after step 2: drop the last checkpoint and mark incomplete.
    std::fs::remove_file(dir.join("step_3.ckpt")).unwrap();
    std::fs::remove_file(dir.join("codec.ckpt")).unwrap();
    let mut m = RunManifest::load(&dir).unwrap();
    m.complete = false;
    m.save(&dir).unwrap();
    assert_eq!(c(&["pretrain-codec"]), 0);
    assert_eq!(std::fs::read(dir.join("codec.ckpt")).unwrap(), full);
    assert_eq!(c(&["--force", "pretrain-codec"]), 0);
    assert_eq!(std::fs::read(dir.join("codec.ckpt")).unwrap(), full);
}
