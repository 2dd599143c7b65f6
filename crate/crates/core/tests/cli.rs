use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tokentune"));
    c.env_remove("TOKENTUNE_SEED");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tiny_cls() -> Value {
    json!({
        "model": {"vocab_size": 64, "max_positions": 16, "d_model": 8, "n_heads": 2,
                  "d_ff": 16, "n_layers": 1, "causal": false, "n_classes": 2, "init_std": 0.1},
        "train": {"regime": "tokentune", "k": 4, "batch_size": 8, "epochs": 1, "lr": 0.01},
        "task": {"kind": "classification", "n_train": 32, "n_test": 16, "seq_len": 16,
                 "n_classes": 2, "difficulty": 0.1, "seed": 3}
    })
}

fn tiny_lm() -> Value {
    json!({
        "model": {"vocab_size": 257, "max_positions": 16, "d_model": 8, "n_heads": 2,
                  "d_ff": 16, "n_layers": 1, "causal": true},
        "train": {"regime": "tokentune+lora", "k_ratio": 0.5, "batch_size": 4, "max_steps": 5,
                  "lora": {"targets": ["w_q", "w_v"], "rank": 2, "alpha": 4.0}},
        "task": {"kind": "lm", "seq_len": 16, "synthetic_bytes": 2048, "n_test": 4}
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stdout:\n{}", String::from_utf8_lossy(&out.stdout));
        eprintln!("stderr:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn train(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    run(bin().arg("train").arg("--config").arg(cfg).arg("--out").arg(out).args(extra))
}

#[test]
fn train_writes_artifacts_and_eval_reads_them() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny_cls());
    let out = tmp.path().join("run");
    assert_eq!(train(&cfg, &out, &[]).status.code(), Some(0));
    for f in ["config.json", "metrics.jsonl", "checkpoint.bin", "memory_report.json", "eval.json", "version.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let resolved: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["k"], json!(4));
    assert_eq!(resolved["train"]["seed"], json!(0));
    let lines = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("memory_report.json")).unwrap()).unwrap();
    assert_eq!(report["regime"], json!("tokentune"));
    assert!(report["peak_bytes"].as_u64().unwrap() > report["activations_bytes"].as_u64().unwrap());

    let e = run(bin().args(["eval", "--config"]).arg(&cfg).arg("--out").arg(&out));
    assert_eq!(e.status.code(), Some(0));
    let text = String::from_utf8(e.stdout).unwrap();
    let saved: Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    let acc = saved["accuracy"].as_f64().unwrap();
    assert!(text.contains(&format!("accuracy {acc:.4}")), "{text}");
}

#[test]
fn reruns_are_byte_identical_and_seed_env_changes_them() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny_cls());
    let read = |d: &str| fs::read(tmp.path().join(d).join("metrics.jsonl")).unwrap();
    assert!(train(&cfg, &tmp.path().join("a"), &[]).status.success());
    assert!(train(&cfg, &tmp.path().join("b"), &["--set", "execution=sequential"]).status.success());
    assert_eq!(read("a"), read("b"));
    assert_eq!(
        fs::read(tmp.path().join("a/checkpoint.bin")).unwrap(),
        fs::read(tmp.path().join("b/checkpoint.bin")).unwrap()
    );
    let out = run(bin()
        .env("TOKENTUNE_SEED", "7")
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("c")));
    assert!(out.status.success());
    assert_ne!(read("a"), read("c"));
    let resolved = fs::read_to_string(tmp.path().join("c/config.json")).unwrap();
    assert!(resolved.contains("\"seed\": 7"));
}

#[test]
fn lm_with_adapters_merges_to_the_same_metrics() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "lm.json", &tiny_lm());
    let out = tmp.path().join("run");
    assert!(train(&cfg, &out, &[]).status.success());
    let eval = |merge: bool| {
        let mut c = bin();
        c.args(["eval", "--config"]).arg(&cfg).arg("--out").arg(&out);
        if merge {
            c.arg("--merge");
        }
        let o = run(&mut c);
        assert!(o.status.success());
        let s = String::from_utf8(o.stdout).unwrap();
        let ppl: f64 = s.split("perplexity ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
        ppl
    };
    let (a, m) = (eval(false), eval(true));
    assert!((a - m).abs() / a < 1e-4, "{a} vs {m}");
}

#[test]
fn invalid_configs_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny_cls());
    let out = tmp.path().join("o");
    let code = |args: &[&str]| train(&cfg, &out, args).status.code();
    assert_eq!(code(&["--set", "train.lr=-1"]), Some(2));
    assert_eq!(code(&["--set", "train.regime=sideways"]), Some(2));
    assert_eq!(code(&["--set", "model.n_heads=3"]), Some(2));
    assert_eq!(code(&["--set", "seed=1"]), Some(2));
    assert_eq!(code(&["--set", "task.seq_len=64"]), Some(2));
    assert_eq!(code(&["--set", "model.causal=true"]), Some(2));

    let mut bad = tiny_cls();
    bad["train"]["learning_rate"] = json!(0.1);
    let p = write_config(tmp.path(), "bad.json", &bad);
    let o = train(&p, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("train") && err.contains("learning_rate"), "{err}");

    let o = train(&tmp.path().join("nope.json"), &out, &[]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(bin().env("TOKENTUNE_SEED", "abc").args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out));
    assert_eq!(o.status.code(), Some(2));

    let mut lm = tiny_lm();
    lm["task"]["corpus"] = json!(tmp.path().join("missing.txt"));
    let p = write_config(tmp.path(), "lm.json", &lm);
    assert_eq!(train(&p, &out, &[]).status.code(), Some(2));
}

#[test]
fn corrupt_or_mismatched_checkpoints_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny_cls());
    let out = tmp.path().join("run");
    assert!(train(&cfg, &out, &[]).status.success());
    let ck = out.join("checkpoint.bin");
    let eval = |path: &Path, extra: &[&str]| {
        run(bin().args(["eval", "--config"]).arg(&cfg).arg("--checkpoint").arg(path).args(extra)).status.code()
    };
    assert_eq!(eval(&ck, &[]), Some(0));
    assert_eq!(eval(&ck, &["--set", "model.d_ff=32"]), Some(2));
    let mut bytes = fs::read(&ck).unwrap();
    let truncated = tmp.path().join("short.bin");
    fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(eval(&truncated, &[]), Some(2));
    let json_start = bytes.iter().position(|&b| b == b'{').unwrap();
    bytes[json_start + 1] = b'#';
    let flipped = tmp.path().join("flipped.bin");
    fs::write(&flipped, &bytes).unwrap();
    assert_eq!(eval(&flipped, &[]), Some(2));
    assert_eq!(eval(&tmp.path().join("absent.bin"), &[]), Some(2));
}

#[test]
fn non_finite_training_exits_with_three() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny_cls());
    let o = train(&cfg, &tmp.path().join("o"), &["--set", "train.lr=1e300", "--set", "train.epochs=3"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_passes_and_names_failing_properties() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs().join("gradcheck.json");
    let go = |extra: &[&str]| {
        run(bin().args(["gradcheck", "--config"]).arg(&cfg).arg("--out").arg(tmp.path()).args(["--set", "points=8"]).args(extra))
    };
    let ok = go(&[]);
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8(ok.stdout).unwrap();
    assert!(text.contains("full_equivalence: exact") && text.contains("PASS"), "{text}");
    assert_eq!(fs::read_to_string(tmp.path().join("gradcheck.jsonl")).unwrap().lines().count(), 32);

    let bad = go(&["--inject-bug", "cache-unselected-rows"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8(bad.stderr).unwrap().contains("cache_scaling"));
    assert_eq!(go(&["--inject-bug", "no-such-bug"]).status.code(), Some(2));
}

#[test]
fn memsweep_writes_ranked_table() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny_lm();
    cfg["train"] = json!({"batch_size": 2});
    let p = write_config(tmp.path(), "m.json", &cfg);
    let o = run(bin()
        .args(["memsweep", "--config"])
        .arg(&p)
        .arg("--out")
        .arg(tmp.path())
        .args(["--grid", "regimes=full,tokentune;ns=8,16;ratios=0.5,1.0;batches=1"]));
    assert!(o.status.success());
    let csv = fs::read_to_string(tmp.path().join("memsweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], tokentune::memprofile::CSV_HEADER);
    assert_eq!(rows.len(), 1 + 2 + 4);
    let peaks: Vec<u64> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .skip(1)
        .filter_map(|l| l.split_whitespace().nth(4)?.parse().ok())
        .collect();
    assert_eq!(peaks.len(), 6);
    assert!(peaks.windows(2).all(|w| w[0] <= w[1]));
    let o = run(bin().args(["memsweep", "--config"]).arg(&p).arg("--out").arg(tmp.path()).args(["--grid", "ratios=2"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    for name in ["toy_cls.json", "toy_lm.json", "gradcheck.json", "memsweep.json"] {
        tokentune::cli::load_config(&configs().join(name), &[]).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
