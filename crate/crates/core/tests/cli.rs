//! End-to-end runs of the `specmtm` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use specmtm::model::Model;
use specmtm::run::sha256_hex;

const TINY: &str = r#"
seed = 5

[data]
format = "synthetic"
samples = 30
length = 32
frequencies = [[1.0], [5.0], [9.0]]

[model]
d = 8
encoder_layers = 1
decoder_layers = 1
cbd_blocks = 1
heads = 2
window = 4
ff_mult = 2
order = 4

[optimizer]
lr = 1e-3

[train]
batch_size = 8
epochs = 3
finetune_epochs = 2
probe_epochs = 3
diagnose_samples = 2
diagnose_bands = 4
"#;

fn specmtm(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specmtm"))
        .args(args)
        .env("SPECMTM_THREADS", threads)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_passes_and_lists_measured_errors() {
    let out = specmtm(&["verify"], "2");
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS parseval identity"));
    assert!(text.contains("measured"));
    assert!(text.contains("0 failed"));
}

#[test]
fn pretrain_then_probe_keeps_encoder_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let pre = dir.path().join("pre");
    ok(&specmtm(&["pretrain", "--config", s(&cfg), "--out", s(&pre)], "2"));
    for f in ["config.toml", "loss.csv", "model.ckpt", "metrics.json", "manifest.json"] {
        assert!(pre.join(f).is_file(), "{f}");
    }
    let loss = std::fs::read_to_string(pre.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next().unwrap(), "epoch,total,temporal_re,freq_dual,freq_re,temporal_dual");
    assert_eq!(loss.lines().count(), 4);

    let ckpt = pre.join("model.ckpt");
    let before = sha256_hex(&std::fs::read(&ckpt).unwrap());
    let probe = dir.path().join("probe");
    let out = specmtm(&["probe", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&probe)], "2");
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("test_accuracy"));
    assert_eq!(before, sha256_hex(&std::fs::read(&ckpt).unwrap()));

    let (a, _) = Model::load(&ckpt).unwrap();
    let (b, meta) = Model::load(&probe.join("model.ckpt")).unwrap();
    assert_eq!(meta.stage, "probe");
    let mut head_moved = false;
    for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
        if Model::is_head_param(&p.name) {
            head_moved |= p.value != q.value;
        } else {
            assert_eq!(p.value, q.value, "{} changed during probing", p.name);
        }
    }
    assert!(head_moved);

    let diag = dir.path().join("diag");
    ok(&specmtm(&["diagnose", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&diag)], "2"));
    for f in ["ranks.json", "energy.csv", "bernstein.csv"] {
        assert!(diag.join("diag").join(f).is_file(), "{f}");
    }
    let manifest = std::fs::read_to_string(diag.join("manifest.json")).unwrap();
    assert!(manifest.contains("diag/energy.csv"));

    let ft = dir.path().join("ft");
    ok(&specmtm(&["finetune", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&ft)], "2"));
    assert!(ft.join("finetune.csv").is_file());
}

#[test]
fn same_seed_gives_identical_loss_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |name: &str, seed: &str, threads: &str| {
        let out = dir.path().join(name);
        ok(&specmtm(&["pretrain", "--config", s(&cfg), "--out", s(&out), "--seed", seed], threads));
        std::fs::read(out.join("loss.csv")).unwrap()
    };
    let a = run("a", "11", "1");
    assert_eq!(a, run("b", "11", "1"));
    assert_eq!(a, run("c", "11", "3"));
    assert_ne!(a, run("d", "12", "1"));
}

#[test]
fn manifest_records_overrides_and_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    ok(&specmtm(&["pretrain", "--config", s(&cfg), "--out", s(&out), "--precision", "f32"], "1"));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "pretrain");
    assert_eq!(m["precision"], "f32");
    let keys: Vec<&str> = m["overrides"].as_array().unwrap().iter().map(|o| o["key"].as_str().unwrap()).collect();
    assert!(keys.contains(&"model.d") && keys.contains(&"train.precision"), "{keys:?}");
    for f in m["files"].as_array().unwrap() {
        let bytes = std::fs::read(out.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), sha256_hex(&bytes));
    }
}

#[test]
fn failures_exit_nonzero_with_actionable_messages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());

    let out = specmtm(&["probe", "--config", s(&cfg), "--out", s(&dir.path().join("x"))], "1");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[mask]\nratio = 1.5\n").unwrap();
    let out = specmtm(&["pretrain", "--config", s(&bad)], "1");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mask.ratio"));

    let out = specmtm(&["pretrain", "--config", s(&dir.path().join("missing.toml"))], "1");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read config"));

    let out = specmtm(&["pretrain", "--precision", "f16"], "1");
    assert!(!out.status.success());
}
