use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::process::{Command, Output};

use bugsynth::corpus::{write_corpus, FunctionRecord};
use bugsynth::synthetic::{contextual_corpus, planted_corpus};

fn bugsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bugsynth"))
        .args(args)
        .env_remove("BUGSYNTH_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bugsynth(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "detector": {"layers": 1, "hidden": 8, "heads": 2, "dropout": 0.1, "max_position": 256},
  "mutator": {"layers": 1, "hidden": 8, "heads": 2, "dropout": 0.1, "max_position": 256},
  "total_steps": 6, "warmup_steps": 2, "token_budget": 2000, "validate_every": 3
}"#;

/// Preprocessed toy corpus: returns the output directory.
fn preprocessed(dir: &Path) -> std::path::PathBuf {
    let mut records: Vec<FunctionRecord> = planted_corpus(60, 1);
    records.extend(contextual_corpus(60, 1));
    let corpus = dir.join("corpus.jsonl");
    write_corpus(&corpus, &records).unwrap();
    let out = dir.join("prep");
    let summary = ok(&["preprocess", "--corpus", p(&corpus), "--out", p(&out), "--merges", "100", "--seed", "3"]);
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(v["deduplicated"], 120);
    for f in ["train.jsonl", "validate.jsonl", "test.jsonl", "split.json", "tokenizer.json", "calls.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();
    out
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = bugsynth(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_flag_values_exit_2() {
    for args in [
        vec!["gen-static", "--multiplicity", "2"],
        vec!["annotate", "--bug-type", "bor-medium"],
        vec!["train", "--mode", "sideways"],
        vec!["evaluate", "--checkpoint", "x", "--nope"],
    ] {
        assert_eq!(bugsynth(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_1() {
    let out = bugsynth(&["evaluate", "--checkpoint", "/nonexistent/ck.json", "--set", "/nonexistent/s.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn gen_static_thrice_keeps_mutants_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let prep = preprocessed(dir.path());
    let set = dir.path().join("strong3.jsonl");
    ok(&[
        "gen-static",
        "--corpus",
        p(&prep.join("train.jsonl")),
        "--tokenizer",
        p(&prep.join("tokenizer.json")),
        "--bug-type",
        "bor-strong",
        "--multiplicity",
        "3",
        "--out",
        p(&set),
    ]);
    let text = std::fs::read_to_string(&set).unwrap();
    let mut mutants: HashMap<String, HashSet<(u64, String)>> = HashMap::new();
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let id = v["source_id"].as_str().unwrap().to_string();
        let entry = counts.entry(id.clone()).or_default();
        if v["label"] == "mutant" {
            entry.0 += 1;
            let gold = v["gold_location"].as_u64().unwrap();
            let token = v["tokens"][gold as usize].as_str().unwrap().to_string();
            assert!(mutants.entry(id).or_default().insert((gold, token)), "duplicate mutant");
        } else {
            entry.1 += 1;
        }
    }
    assert!(!counts.is_empty());
    for (m, r) in counts.values() {
        assert_eq!(m, r);
        assert!(*m <= 3 && *m >= 1);
    }
}

#[test]
fn train_evaluate_finetune_and_cross_eval() {
    let dir = tempfile::tempdir().unwrap();
    let prep = preprocessed(dir.path());
    let tiny = dir.path().join("tiny.json");
    let tok = prep.join("tokenizer.json");
    let valid = dir.path().join("valid.jsonl");
    ok(&[
        "gen-static", "--corpus", p(&prep.join("validate.jsonl")), "--tokenizer", p(&tok),
        "--bug-type", "bor-weak", "--out", p(&valid),
    ]);
    let ck = dir.path().join("cm0.json");
    let log = dir.path().join("log.jsonl");
    let out = bugsynth(&[
        "train", "--config", p(&tiny), "--mode", "contextual", "--bug-type", "bor-weak", "--seed", "5",
        "--corpus", p(&prep.join("train.jsonl")), "--tokenizer", p(&tok), "--validation", p(&valid),
        "--log", p(&log), "--out", p(&ck),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("resolved config") && stderr.contains("\"seed\":5"));
    let steps: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(steps.len(), 6);
    for s in &steps {
        let (l, m, d, lam) = (s["L"].as_f64().unwrap(), s["L_MLM"].as_f64().unwrap(), s["L_D"].as_f64().unwrap(), s["λ"].as_f64().unwrap());
        assert!((l - (m + lam * d)).abs() < 1e-9);
    }

    let report: serde_json::Value =
        serde_json::from_str(&ok(&["evaluate", "--checkpoint", p(&ck), "--set", p(&valid)])).unwrap();
    let acc = report["classification_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let tuned = dir.path().join("cm-ft.json");
    ok(&[
        "finetune", "--checkpoint", p(&ck), "--corpus", p(&prep.join("train.jsonl")), "--examples", "40",
        "--out", p(&tuned),
    ]);
    let before: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ck).unwrap()).unwrap();
    let after: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&tuned).unwrap()).unwrap();
    assert_eq!(before["state"]["mutator"], after["state"]["mutator"]);
    assert_ne!(before["state"]["detector"], after["state"]["detector"]);

    let table = ok(&[
        "cross-eval", "--model", &format!("cm0={}", p(&ck)), "--model", &format!("ft={}", p(&tuned)),
        "--set", &format!("weak={}", p(&valid)),
    ]);
    assert!(table.contains("cm0") && table.contains("ft") && table.contains('%'));

    // contextual mutation from the trained checkpoint is reproducible
    let src = "int f(int[] a, int n) { int s = 0; for (int i = 0; i < n; i++) { s = s + a[i]; } return s; }";
    let args = ["mutate", "--checkpoint", p(&ck), "--contextual", "--seed", "7", "--source", src];
    let first = ok(&args);
    assert_eq!(first, ok(&args));
}

#[test]
fn static_mode_trains_from_an_example_set() {
    let dir = tempfile::tempdir().unwrap();
    let prep = preprocessed(dir.path());
    let tok = prep.join("tokenizer.json");
    let set = dir.path().join("s.jsonl");
    ok(&[
        "gen-static", "--corpus", p(&prep.join("train.jsonl")), "--tokenizer", p(&tok), "--bug-type", "bor-strong",
        "--out", p(&set),
    ]);
    let ck = dir.path().join("static.json");
    ok(&[
        "train", "--config", p(&dir.path().join("tiny.json")), "--mode", "static", "--bug-type", "bor-strong",
        "--static-set", p(&set), "--tokenizer", p(&tok), "--out", p(&ck),
    ]);
    assert!(ck.exists());
    let missing = bugsynth(&[
        "train", "--mode", "static", "--bug-type", "bor-strong", "--tokenizer", p(&tok), "--out", p(&ck),
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn mutate_is_deterministic_and_honours_env_seed() {
    let dir = tempfile::tempdir().unwrap();
    let prep = preprocessed(dir.path());
    let tok = prep.join("tokenizer.json");
    let src = "boolean f(int a, int b) { return a <= b; }";
    let args = ["mutate", "--tokenizer", p(&tok), "--contextual", "--bug-type", "bor-strong", "--seed", "7", "--source", src];
    let a = ok(&args);
    assert_eq!(a, ok(&args));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["original"], "<=");
    assert_eq!(v["seed"], 7);
    let dist = v["distribution"].as_array().unwrap();
    assert_eq!(dist.len(), 5);
    // zero-initialized head: uniform
    for d in dist {
        assert!((d["prob"].as_f64().unwrap() - 0.2).abs() < 1e-12);
        assert_ne!(d["token"], "<=");
    }
    assert!(v["masked"].as_str().unwrap().contains("[MASK]"));

    let out = Command::new(env!("CARGO_BIN_EXE_bugsynth"))
        .args(["mutate", "--tokenizer", p(&tok), "--bug-type", "bor-strong", "--source", src])
        .env("BUGSYNTH_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["seed"], 11);
    assert_ne!(v["sampled"], "<=");
}

#[test]
fn annotate_writes_one_record_per_function() {
    let dir = tempfile::tempdir().unwrap();
    let prep = preprocessed(dir.path());
    let out = dir.path().join("ann.jsonl");
    let summary = ok(&[
        "annotate", "--corpus", p(&prep.join("test.jsonl")), "--calls", p(&prep.join("calls.json")),
        "--bug-type", "varmisuse", "--out", p(&out),
    ]);
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    let lines = std::fs::read_to_string(&out).unwrap().lines().count();
    assert_eq!(v["functions"].as_u64().unwrap() as usize, lines);
    assert!(v["targets"].as_u64().unwrap() > 0);
}
