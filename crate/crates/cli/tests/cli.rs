use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
jobs = 2

[corpus]
train_utterances = 60
dev_utterances = 10
test_utterances = 20
dictionary_size = 24
common_words = 40
mt_pairs = 100
acronyms = 2
first_names = 6
surnames = 8

[encoder]
layers = 1
d = 16
heads = 2
ffn = 32

[decoder]
layers = 1
d = 16
heads = 2
ffn = 32

[joint]
epochs = 1
min_alignment_margin = 0.0

[detector]
d = 16
heads = 2
ffn = 32

[detector_train]
epochs = 1

[clas]
epochs = 1
bias_layers = 1

[beam]
beam = 2
"#;

fn nedict(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nedict"))
        .args(args)
        .env("NEDICT_OUT", out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run nedict")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = nedict(out, args);
    assert!(
        o.status.success(),
        "nedict {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_documents_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let top = ok(dir.path(), &["--help"]);
    for cmd in [
        "gen-data",
        "train-encoder",
        "heatmap",
        "train-detector",
        "detect",
        "sweep-threshold",
        "train-clas",
        "translate",
        "decode-fused",
        "evaluate",
        "ablate",
    ] {
        assert!(top.contains(cmd), "top-level help lacks {cmd}");
    }
    for flag in ["--config", "--out", "--jobs", "--seed"] {
        assert!(top.contains(flag), "top-level help lacks {flag}");
    }
    let expect: &[(&str, &[&str])] = &[
        ("train-detector", &["--name", "--without", "--epochs"]),
        ("detect", &["--detector", "--split", "--threshold"]),
        ("sweep-threshold", &["--detector", "--split", "--from", "--to", "--steps"]),
        ("train-clas", &["--method", "--epochs"]),
        ("translate", &["--bias-from", "--method", "--beam", "--split"]),
        ("decode-fused", &["--clm-lambda", "--beam", "--split"]),
        ("evaluate", &["--hyps", "--split"]),
        ("heatmap", &["--split", "--count"]),
    ];
    for (cmd, flags) in expect {
        let help = ok(dir.path(), &[cmd, "--help"]);
        for flag in *flags {
            assert!(help.contains(flag), "{cmd} help lacks {flag}");
        }
        assert!(help.contains("--out"), "{cmd} help lacks the global --out");
    }
}

#[test]
fn missing_artifact_names_the_fix() {
    let dir = tempfile::tempdir().unwrap();
    let o = nedict(dir.path(), &["detect"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("gen-data"), "{err}");
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!nedict(dir.path(), &["train-detector", "--without", "bogus"]).status.success());
    assert!(!nedict(dir.path(), &["translate", "--bias-from", "nowhere"]).status.success());
    let o = nedict(dir.path(), &["--config", "/nonexistent/run.toml", "gen-data"]);
    assert!(!o.status.success());
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", c];
        full.extend_from_slice(args);
        ok(&out, &full)
    };

    assert!(run(&["gen-data"]).contains("20 test utterances"));
    assert!(out.join("config.resolved.toml").exists());
    assert!(run(&["train-encoder"]).contains("dev alignment margin"));
    run(&["heatmap", "--split", "dev", "--count", "2"]);
    assert_eq!(std::fs::read_dir(out.join("heatmaps")).unwrap().count(), 4);
    run(&["train-detector"]);
    run(&["train-detector", "--name", "nomargin", "--without", "margin", "--without", "attn-mask"]);
    assert!(run(&["detect", "--split", "test"]).contains("retrieved"));
    run(&["detect", "--detector", "cosine", "--threshold", "0.5"]);
    run(&["detect", "--detector", "nomargin"]);
    assert_eq!(run(&["sweep-threshold", "--steps", "10"]).lines().count(), 10);
    run(&["train-clas"]);
    for from in ["detector", "oracle", "empty", "none"] {
        run(&["translate", "--bias-from", from]);
    }
    run(&["decode-fused", "--clm-lambda", "0.15"]);
    for hyps in ["base-test", "clas-parallel-detector-test", "clas-parallel-oracle-test", "fused-0.15-test"] {
        assert!(run(&["evaluate", "--hyps", hyps]).contains("BLEU"), "{hyps}");
    }
    let ablation = run(&["ablate", "--split", "test"]);
    assert!(ablation.contains("cosine") && ablation.contains("+margin"));
    for f in ["metrics/ablation-test.csv", "metrics/translation.csv", "lm/class.ngram.txt", "models/clas-parallel.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
}
