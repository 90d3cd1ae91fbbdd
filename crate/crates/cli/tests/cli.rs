use std::path::Path;
use std::process::{Command, Output};

use slu_core::config::KEYS;

const TINY: &str = "\
frame_dim = 8
enc_hidden = 6
embed_dim = 6
dec_hidden = 8
attn_dim = 6
nlu_embed_dim = 6
nlu_hidden = 6
intent_ff_dim = 6
epochs.asr_pretrain = 1
epochs.nlu_train = 1
epochs.joint_ce = 1
epochs.seq = 1
epochs.transcript_free = 1
beam_size = 2
";

fn slu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slu"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = slu(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_produces_documented_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let (data, split, ce, seq, tf, dec) = (
        d.join("data"),
        d.join("split"),
        d.join("ce"),
        d.join("seq"),
        d.join("tf"),
        d.join("dec"),
    );
    ok(&["gen-data", "--grammar", "default", "--n", "90", "--seed", "1", "--out", p(&data)]);
    assert!(data.join("data.jsonl").exists() && data.join("manifest.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["utterances"], 90);

    ok(&["split", "--data", p(&data.join("data.jsonl")), "--seed", "1", "--out", p(&split)]);
    for f in ["train", "dev", "test", "train.semantic", "dev.semantic"] {
        assert!(split.join(format!("{f}.jsonl")).exists(), "{f}");
    }
    let semantic = std::fs::read_to_string(split.join("train.semantic.jsonl")).unwrap();
    assert!(!semantic.contains("\"tokens\""));

    let train = split.join("train.jsonl");
    let dev = split.join("dev.jsonl");
    let c = p(&cfg);
    ok(&["train", "--train", p(&train), "--dev", p(&dev), "--config", c, "--out", p(&ce)]);
    for f in ["asr_pretrain.ckpt", "nlu_train.ckpt", "joint_ce.ckpt", "runlog.jsonl", "config.txt"] {
        assert!(ce.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(ce.join("runlog.jsonl")).unwrap().lines().count(), 3);

    let from = ce.join("joint_ce");
    ok(&[
        "seq-train", "--method", "mSLU", "--from", p(&from), "--train", p(&train), "--dev", p(&dev), "--config", c,
        "--out", p(&seq),
    ]);
    assert!(seq.join("mSLU.ckpt").exists() && seq.join("runlog.jsonl").exists());

    ok(&[
        "transcript-free-train",
        "--from",
        p(&ce.join("joint_ce.ckpt")),
        "--train",
        p(&split.join("train.semantic.jsonl")),
        "--dev",
        p(&split.join("dev.semantic.jsonl")),
        "--config",
        c,
        "--out",
        p(&tf),
    ]);
    assert!(tf.join("transcript_free.ckpt").exists());

    let ckpt = seq.join("mSLU.ckpt");
    ok(&["decode", "--ckpt", p(&ckpt), "--data", p(&dev), "--beam", "2", "--out", p(&dec)]);
    let decoded = std::fs::read_to_string(dec.join("decode.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(decoded.lines().next().unwrap()).unwrap();
    assert!(first["hypotheses"].as_array().unwrap().len() <= 2);

    let out = ok(&["evaluate", "--ckpt", p(&ckpt), "--data", p(&dev), "--out", p(&dec)]);
    assert!(out.contains("SemER"));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dec.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["semer"].as_f64().unwrap() >= 0.0);
    ok(&["evaluate", "--gold-transcripts", "--ckpt", p(&ckpt), "--data", p(&dev), "--out", p(&dec)]);
}

#[test]
fn gen_data_is_a_function_of_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let read = |sub: &str, seed: &str| {
        let out = dir.path().join(sub);
        ok(&["gen-data", "--n", "20", "--seed", seed, "--out", p(&out)]);
        std::fs::read(out.join("data.jsonl")).unwrap()
    };
    let a = read("a", "4");
    assert_eq!(a, read("b", "4"));
    assert_ne!(a, read("c", "5"));
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let o = slu(&["gen-data", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn failures_are_one_line_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    let cases: Vec<Vec<&str>> = vec![
        vec!["split", "--data", "/nonexistent/data.jsonl", "--out", out],
        vec!["gen-data", "--n", "5", "--set", "no_such_key=1", "--out", out],
        vec!["gen-data", "--n", "5", "--set", "lambda=-1", "--out", out],
        vec!["decode", "--ckpt", "/nonexistent.ckpt", "--data", "x.jsonl", "--out", out],
    ];
    for args in cases {
        let o = slu(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8(o.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "), "{err}");
    }
}

#[test]
fn help_documents_every_config_key() {
    let help = ok(&["--help"]);
    for (k, _) in KEYS {
        assert!(help.contains(k), "{k} missing from --help");
    }
}

#[test]
fn checks_report_and_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    let g = ok(&["grad-check", "--configurations", "6", "--seed", "3", "--out", out]);
    assert!(g.contains("TranscriptFree"));
    assert!(dir.path().join("grad_check.json").exists());
    let e = ok(&["estimator-check", "--vocab", "3", "--max-len", "2", "--samples", "20000", "--out", out]);
    assert_eq!(e.lines().count(), 3);
    assert!(dir.path().join("estimator_check.json").exists());
}
