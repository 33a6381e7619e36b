use std::path::Path;
use std::process::{Command, Output};

use mdssl_cli::manifest::sha256_hex;

/// SHA-256 of the corpus file written by `mdssl generate` with the default
/// spec, recorded at first run.
const DEFAULT_CORPUS_SHA256: &str = "a29b1f75faa5cb4c389361d3421777b2b357b762ba19ad422c54ec038fcd86ef";
/// Final-step total loss of `train --preset full_md --steps 50` on the
/// default corpus, recorded at first run.
const TRAIN_FINAL_LOSS: f64 = 4.289_751_358_798_642;

fn mdssl(args: &[&str], out_env: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdssl")).args(args).env("MDSSL_OUT_DIR", out_env).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_is_reproducible_and_regenerates_from_header() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let c = dir.path().join("c.jsonl");
    assert!(mdssl(&["generate", "--out", s(&a)], dir.path()).status.success());
    assert!(mdssl(&["generate", "--out", s(&b)], dir.path()).status.success());
    assert!(mdssl(&["generate", "--from-header", s(&a), "--out", s(&c)], dir.path()).status.success());
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes, std::fs::read(&c).unwrap());
    assert_eq!(sha256_hex(&bytes), DEFAULT_CORPUS_SHA256);
}

#[test]
fn incomplete_spec_is_a_usage_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, "num_speakers = 10\nnum_domains = 2\n").unwrap();
    let o = mdssl(&["generate", "--spec", s(&spec), "--out", s(&dir.path().join("x.jsonl"))], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("utterances_per_speaker_per_domain"), "{}", stderr(&o));

    let full = mdssl(&["defaults", "corpus"], dir.path());
    let bad = String::from_utf8(full.stdout).unwrap().replace("noise_scale = 3.0", "noise_scale = -1.0");
    std::fs::write(&spec, bad).unwrap();
    let o = mdssl(&["generate", "--spec", s(&spec), "--out", s(&dir.path().join("x.jsonl"))], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("noise_scale"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    assert!(mdssl(&["generate", "--out", s(&corpus)], dir.path()).status.success());

    let o = mdssl(&["train", "--corpus", s(&corpus), "--preset", "bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    // more slots than eligible utterances: rejected before any compute
    let o = mdssl(&["train", "--corpus", s(&corpus), "--batch-size", "5000"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = mdssl(&["train", "--corpus", s(&corpus), "--momentum", "1.0"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = mdssl(&["eval", "--checkpoint", s(&dir.path().join("missing.txt")), "--corpus", s(&corpus)], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let cfg = dir.path().join("bench.toml");
    std::fs::write(&cfg, "seeds = [1, 2]\n").unwrap();
    let o = mdssl(&["benchmark", "--corpus", s(&corpus), "--config", s(&cfg)], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    assert!(mdssl(&["generate", "--out", s(&corpus)], dir.path()).status.success());
    // the output directory cannot be created over a regular file
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "").unwrap();
    let o = mdssl(&["train", "--corpus", s(&corpus), "--steps", "5", "--out-dir", s(&blocker.join("x"))], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_and_eval_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    assert!(mdssl(&["generate", "--out", s(&corpus)], dir.path()).status.success());
    let o = mdssl(
        &["train", "--corpus", s(&corpus), "--preset", "full_md", "--steps", "50", "--checkpoint-every", "25", "--eval-every", "25"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    // no --out-dir: the environment variable decides
    for f in ["checkpoint.txt", "checkpoint_step000025.txt", "checkpoint_step000050.txt", "train_log.csv", "interim_eval.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,total,cl,coral,bank_fill,grad_norm"));
    let last: f64 = log.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((last - TRAIN_FINAL_LOSS).abs() < 1e-9, "final loss {last:.17}");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let text = std::fs::read_to_string(&corpus).unwrap();
    assert_eq!(manifest["corpus_header_sha256"], sha256_hex(text.lines().next().unwrap().as_bytes()));
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"]["steps"], 50);
    assert_eq!(manifest["config"]["loss"]["sampling_mode"], "in_domain");

    let ckpt = dir.path().join("checkpoint.txt");
    let out = dir.path().join("matrix");
    let o = mdssl(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--mode", "matrix", "--out", s(&out)], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let matrix = std::fs::read_to_string(out.join("matrix.csv")).unwrap();
    let k = 6;
    assert_eq!(matrix.lines().count(), k + 1);
    assert!(matrix.lines().all(|l| l.split(',').count() == k + 2));
    assert!(matrix.lines().next().unwrap().ends_with(",all"));
    for f in ["metrics.csv", "summary.json", "trials.csv", "projection.csv", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("mode,eer_percent,min_dcf,"));
}

#[test]
fn defaults_round_trip_as_configs() {
    let dir = tempfile::tempdir().unwrap();
    for which in ["train", "eval", "benchmark"] {
        let o = mdssl(&["defaults", which], dir.path());
        assert!(o.status.success());
        let path = dir.path().join(format!("{which}.toml"));
        std::fs::write(&path, &o.stdout).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        match which {
            "train" => {
                let cfg: mdssl_core::trainer::TrainConfig =
                    mdssl_cli::config::parse_over_default(&text, "train").unwrap();
                assert_eq!(cfg, Default::default());
            }
            "eval" => {
                let cfg: mdssl_core::eval::EvalConfig = mdssl_cli::config::parse_over_default(&text, "eval").unwrap();
                assert_eq!(cfg, Default::default());
            }
            _ => {
                let cfg: mdssl_core::benchmark::BenchmarkConfig =
                    mdssl_cli::config::parse_over_default(&text, "benchmark").unwrap();
                assert_eq!(cfg, Default::default());
            }
        }
    }
}
