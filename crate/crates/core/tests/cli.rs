use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
# small pipeline
gen.num_users = 60
model.num_layers = 1
model.hidden = 16
model.heads = 2
model.ffn_dim = 32
model.attr_dim = 4
train.pretrain_batch = 4
train.finetune_batch = 16
train.checkpoint_every = 2
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_userbert"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.conf"), SMALL).unwrap();
    dir
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = setup();
    assert_eq!(
        run(dir.path(), &["--no-such-flag", "gen-data"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
    let out = run(dir.path(), &["--set", "gen.bogus=1", "gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen.bogus"));
}

#[test]
fn evaluate_requires_a_checkpoint() {
    let dir = setup();
    ok(dir.path(), &["--config", "small.conf", "gen-data"]);
    let out = run(dir.path(), &["--config", "small.conf", "evaluate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = setup();
    ok(
        dir.path(),
        &["--config", "small.conf", "--out", "a", "gen-data"],
    );
    ok(
        dir.path(),
        &["--config", "small.conf", "--out", "b", "gen-data"],
    );
    ok(
        dir.path(),
        &[
            "--config",
            "small.conf",
            "--seed",
            "5",
            "--out",
            "c",
            "gen-data",
        ],
    );
    let read = |d: &str, f: &str| std::fs::read(dir.path().join(d).join(f)).unwrap();
    for f in ["events.tsv", "profiles.tsv", "labels.tsv", "manifest.txt"] {
        assert_eq!(read("a", f), read("b", f), "{f}");
    }
    assert_ne!(read("a", "events.tsv"), read("c", "events.tsv"));
}

#[test]
fn full_pipeline_and_resume() {
    let dir = setup();
    let d = dir.path();
    let base = ["--config", "small.conf"];
    let with =
        |extra: &[&'static str]| -> Vec<&str> { base.iter().chain(extra).copied().collect() };
    ok(d, &with(&["gen-data"]));
    ok(d, &with(&["build-vocab"]));
    ok(d, &with(&["tokenize"]));
    ok(d, &with(&["pretrain", "--steps", "4"]));
    let out = d.join("out");
    for f in [
        "vocab.txt",
        "tokens.txt",
        "pretrain.ckpt",
        "train_log.tsv",
        "pretrain-step2.ckpt",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let full_log = std::fs::read_to_string(out.join("train_log.tsv")).unwrap();
    let full_ckpt = std::fs::read(out.join("pretrain.ckpt")).unwrap();

    ok(
        d,
        &with(&[
            "--out",
            "resumed",
            "pretrain",
            "--data",
            "out",
            "--steps",
            "2",
            "--resume",
            "out/pretrain-step2.ckpt",
        ]),
    );
    let resumed = std::fs::read(d.join("resumed/pretrain.ckpt")).unwrap();
    assert_eq!(resumed, full_ckpt);
    let tail = std::fs::read_to_string(d.join("resumed/train_log.tsv")).unwrap();
    let losses = |log: &str| -> Vec<String> {
        log.lines()
            .filter_map(|l| l.split('\t').nth(1).map(str::to_string))
            .collect()
    };
    let full = losses(&full_log);
    assert_eq!(losses(&tail), full[full.len() - 2..].to_vec());

    ok(d, &with(&["evaluate", "--checkpoint", "out/pretrain.ckpt"]));
    assert!(out.join("eval.tsv").exists());
    ok(
        d,
        &with(&[
            "finetune",
            "--checkpoint",
            "out/pretrain.ckpt",
            "--epochs",
            "1",
            "--max-labels",
            "20",
        ]),
    );
    ok(d, &with(&["evaluate", "--checkpoint", "out/finetune.ckpt"]));
    let eval = std::fs::read_to_string(out.join("eval.tsv")).unwrap();
    assert!(eval.contains("roc_auc"), "{eval}");
    ok(
        d,
        &with(&[
            "--out",
            "scratch",
            "finetune",
            "--data",
            "out",
            "--from-scratch",
            "--task",
            "next_genre",
            "--epochs",
            "1",
        ]),
    );
    let metrics = std::fs::read_to_string(d.join("scratch/finetune_metrics.tsv")).unwrap();
    assert!(metrics.contains("map@10"), "{metrics}");
}

#[test]
fn grad_check_passes() {
    let dir = setup();
    ok(dir.path(), &["grad-check"]);
    let report = std::fs::read_to_string(dir.path().join("out/gradcheck.txt")).unwrap();
    assert!(report.trim_end().ends_with("result: PASS"));
}
