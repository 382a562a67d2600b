use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bench-cli"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn bench-cli")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Small enough to train and attack in seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let gen = serde_json::json!({ "size": 32 });
    let toy = |n: usize, seed: u64| serde_json::json!({
        "kind": "toy", "identities": n, "per_identity": 2, "seed": seed, "generator": gen
    });
    let cfg = serde_json::json!({
        "train_data": toy(6, 0),
        "holdout_data": toy(3, 1),
        "eval_data": toy(3, 7),
        "codec": { "message_bits": 8, "width": 4, "decoder_width": 6 },
        "codec_train": { "epochs": 2, "batch": 4 },
        "embedder": { "embedding_dim": 8, "widths": [4, 6], "input_size": 32 },
        "embedder_train": { "epochs": 2, "batch": 4 },
        "attack": { "steps": 2, "rounds": 2 },
        "epsilon_grid": [0.0, 2.0 / 255.0, 4.0 / 255.0],
        "diff_pairs": 1,
    });
    let path = dir.join("exp.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(cfg: &Path, out: &Path) {
    ok(&["train-codec", "--config", s(cfg), "--out", s(out)]);
    ok(&["train-embedder", "--config", s(cfg), "--out", s(out)]);
}

#[test]
fn usage_errors_exit_nonzero_with_usage_text() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = run(&["campaign", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[]);
    assert_ne!(out.status.code(), Some(0));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn campaign_without_models_asks_to_train_first() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&["campaign", "--config", s(&cfg), "--out", s(&dir.path().join("empty"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train first"), "{err}");
    assert!(err.contains("train-codec"), "{err}");
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"epsilon_grid": [0.02, 0.01]}"#).unwrap();
    let out = run(&["report", "--config", s(&path), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ascending"));
    std::fs::write(&path, "{not json").unwrap();
    assert_eq!(run(&["report", "--config", s(&path)]).status.code(), Some(1));
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn end_to_end_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    train(&cfg, &a);
    let models = serde_json::json!({
        "codec_dir": a.join("models/codec"), "embedder_dir": a.join("models/embedder")
    });

    // Reuse the trained models for the second and parallel runs.
    let mut shared: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    for (k, v) in models.as_object().unwrap() {
        shared[k] = v.clone();
    }
    let cfg2 = dir.path().join("shared.json");
    std::fs::write(&cfg2, shared.to_string()).unwrap();

    let b = dir.path().join("b");
    let c = dir.path().join("c");
    ok(&["campaign", "--config", s(&cfg), "--out", s(&a), "--seed", "0"]);
    ok(&["campaign", "--config", s(&cfg2), "--out", s(&b), "--seed", "0"]);
    ok(&["campaign", "--config", s(&cfg2), "--out", s(&c), "--seed", "0", "--workers", "4"]);
    for f in ["report.csv", "pairs.jsonl", "similarity.csv", "report.md"] {
        let fa = std::fs::read(a.join(f)).unwrap();
        assert_eq!(fa, std::fs::read(b.join(f)).unwrap(), "{f} differs between serial runs");
        assert_eq!(fa, std::fs::read(c.join(f)).unwrap(), "{f} differs with 4 workers");
    }

    // 3 pairs x 3 budgets.
    let jsonl = std::fs::read_to_string(a.join("pairs.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 9);
    let sim = std::fs::read_to_string(a.join("similarity.csv")).unwrap();
    let mut lines = sim.lines();
    assert_eq!(lines.next(), Some("epsilon,condition,similarity"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * 3 * 3);
    for r in &rows {
        let f: Vec<&str> = r.split(',').collect();
        assert!(f[1] == "with_watermarking" || f[1] == "without_watermarking");
        let v: f64 = f[2].parse().unwrap();
        assert!((-1.0..=1.0).contains(&v));
    }
    let report = std::fs::read_to_string(a.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 4);
    let md = std::fs::read_to_string(a.join("report.md")).unwrap();
    assert!(md.contains("paper (full-scale) — not expected to match desk scale"));
    assert!(md.contains("| 2 | 92.2 | 25.0 | 67.2 |"));
    assert!(md.contains("| 4 | 98.3 | 2.4 | 95.9 |"));

    // Image and difference dump for the first pair at the largest budget.
    let diff = a.join("diff/pair0000_eps4");
    for f in ["i_r.png", "i_p.png", "i_w.png", "i_p_adv.png", "i_w_adv.png", "delta.png", "diff_i_w_i_p.png", "diff_i_w_adv_i_p.png"] {
        assert!(diff.join(f).is_file(), "missing {f}");
    }
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(diff.join("i_w_adv.json")).unwrap()).unwrap();
    assert!(side["similarity_to_reference"].as_f64().unwrap().abs() <= 1.0);

    // run.json hashes every artifact it lists.
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "campaign");
    assert_eq!(run["config"]["seed"], 0);
    let arts = run["artifacts"].as_object().unwrap();
    assert!(arts.contains_key("report.csv") && arts.contains_key("pairs.jsonl"));
    for (rel, h) in arts {
        assert_eq!(&sha(&a.join(rel)), h.as_str().unwrap(), "{rel}");
    }

    // Re-running report reproduces the tables byte for byte.
    let before = std::fs::read(a.join("report.csv")).unwrap();
    let sim_before = std::fs::read(a.join("similarity.csv")).unwrap();
    ok(&["report", "--out", s(&a)]);
    assert_eq!(before, std::fs::read(a.join("report.csv")).unwrap());
    assert_eq!(sim_before, std::fs::read(a.join("similarity.csv")).unwrap());

    // Single-pair attack, embed and extract.
    let out = ok(&["attack", "--config", s(&cfg2), "--out", s(&b), "--pair", "1", "--eps", "2"]);
    assert!(out.contains("pair 1 eps 2/255"), "{out}");
    assert!(b.join("attack/pair0001_eps2/result.json").is_file());

    ok(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    let face = b.join("data/eval/id0000/000.png");
    assert!(face.is_file());
    let wm = b.join("wm.png");
    let msg = "10110010";
    let printed = ok(&["embed", "--config", s(&cfg2), "--out", s(&b), "--image", s(&face), "--message", msg, "--output", s(&wm)]);
    assert_eq!(printed.trim(), msg);
    let bits = ok(&["extract", "--config", s(&cfg2), "--out", s(&b), "--image", s(&wm)]);
    assert_eq!(bits.trim().len(), 8);
    // A clean image still decodes to some bits.
    let clean = ok(&["extract", "--config", s(&cfg2), "--out", s(&b), "--image", s(&face)]);
    assert!(clean.trim().chars().all(|c| c == '0' || c == '1') && clean.trim().len() == 8);

    let csv = ok(&["eval-robustness", "--config", s(&cfg2), "--out", s(&b)]);
    assert_eq!(csv.lines().count(), 31);
    assert!(csv.starts_with("transform,parameter,mean_bit_accuracy,n_images"));
    assert_eq!(std::fs::read_to_string(b.join("robustness.csv")).unwrap(), csv);
}

#[test]
fn seed_flag_changes_the_attack_start() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    train(&cfg, &a);
    ok(&["campaign", "--config", s(&cfg), "--out", s(&a), "--eps", "0", "--pairs", "2"]);
    let first = std::fs::read_to_string(a.join("pairs.jsonl")).unwrap();
    // The attack seed follows --seed; the trained models stay on disk untouched.
    ok(&["campaign", "--config", s(&cfg), "--out", s(&a), "--eps", "0", "--pairs", "2", "--seed", "5"]);
    let second = std::fs::read_to_string(a.join("pairs.jsonl")).unwrap();
    assert_eq!(first.lines().count(), 2);
    assert_ne!(first, second);
    let rec: serde_json::Value = serde_json::from_str(second.lines().nth(1).unwrap()).unwrap();
    assert_eq!(rec["attack"]["seed"], 5 ^ 1);
}
