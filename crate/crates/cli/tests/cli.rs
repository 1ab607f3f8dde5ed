use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skiprec"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Two users; gaps, skips and one long session that needs chunking.
fn raw_log() -> String {
    let mut rows = Vec::new();
    let mut t = 1_700_000_000i64;
    for k in 0..25 {
        // every third play lasts 10 seconds
        let dur = if k % 3 == 2 { 10 } else { 200 };
        rows.push(format!("u1\t{t}\tt{}", k % 9));
        t += dur;
    }
    t += 3600;
    for k in 0..6 {
        rows.push(format!("u1\t{t}\tt{k}"));
        t += 100;
    }
    for k in 0..7 {
        rows.push(format!("u2\t{}\tt{}", 1_700_000_000 + 50 * k, k + 2));
    }
    rows.join("\n") + "\n"
}

fn small_synth(dir: &Path, out: &str, seed: &str) {
    let o = run(
        dir,
        &["synth", "--out", out, "--sessions", "120", "--catalog-size", "40", "--seed", seed],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

const QUICK_TRAIN: [&str; 10] =
    ["--dim", "8", "--epochs", "2", "--neg-samples", "10", "--heads", "2", "--blocks", "1"];

#[test]
fn ingest_echoes_settings_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("log.tsv"), raw_log()).unwrap();
    let args = |out: &'static str| {
        vec![
            "ingest", "--input", "log.tsv", "--out", out, "--schema", "raw-log", "--gap-minutes",
            "20", "--skip-seconds", "30", "--min-events", "5", "--max-len", "20",
        ]
    };
    for out in ["a", "b"] {
        let o = run(dir.path(), &args(out));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let m = read_json(&dir.path().join("a/manifest.json"));
    assert_eq!(m["format"], "SKIPREC-DS/1");
    let s = &m["settings"];
    assert_eq!(
        (&s["gap_minutes"], &s["skip_seconds"], &s["min_events"], &s["max_len"]),
        (&json!(20), &json!(30), &json!(5), &json!(20))
    );
    // 25 -> 20 + 5, plus the 6-event session and u2's 7 events
    assert_eq!(m["session_count"], 3 + 0 + 1);
    for f in ["sessions.txt", "vocab.txt"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
    let mb = read_json(&dir.path().join("b/manifest.json"));
    assert_eq!(m["dataset_hash"], mb["dataset_hash"]);
}

#[test]
fn ingest_failures_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["ingest", "--input", "missing.tsv", "--out", "ds"]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("ds").exists());

    fs::write(dir.path().join("bad.tsv"), "u1\t10\tx\nu1\tnot-a-time\ty\n").unwrap();
    let o = run(dir.path(), &["ingest", "--input", "bad.tsv", "--out", "ds"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    assert!(!dir.path().join("ds").exists());

    let o = run(dir.path(), &["ingest", "--input", "bad.tsv", "--out", "ds", "--schema", "xml"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn synth_train_eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for tag in ["1", "2"] {
        small_synth(p, &format!("ds{tag}"), "5");
        let (ds, out) = (format!("ds{tag}"), format!("run{tag}"));
        let mut args = vec!["train", "--dataset", &ds, "--out", &out, "--model", "sasrec", "--seed", "3"];
        args.extend(QUICK_TRAIN);
        let o = run(p, &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let ckpt = format!("run{tag}/checkpoint.bin");
        let ev = format!("ev{tag}");
        let o = run(p, &["eval", "--checkpoint", &ckpt, "--dataset", &ds, "--out", &ev]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["run1/checkpoint.bin", "ev1/metrics.json", "run1/manifest.json"] {
        let other = f.replace('1', "2");
        let a = fs::read(p.join(f)).unwrap();
        let b = fs::read(p.join(&other)).unwrap();
        if f.ends_with("manifest.json") {
            // paths differ; everything else matches
            let (mut a, mut b) = (read_json(&p.join(f)), read_json(&p.join(other)));
            for m in [&mut a, &mut b] {
                m["settings"]["dataset"] = Value::Null;
                m["settings"]["out"] = Value::Null;
            }
            assert_eq!(a, b);
        } else {
            assert_eq!(a, b, "{f}");
        }
    }
    let m = read_json(&p.join("ev1/metrics.json"));
    let keys: Vec<&str> = m.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(
        keys,
        ["dataset_hash", "hr1", "hr10", "hr20", "hr5", "map10", "model", "n_pos", "n_skip", "seed", "skip_mrr10"]
    );
    assert_eq!(m["model"], "sasrec");
    assert_eq!(m["seed"], 3);
    let log = fs::read_to_string(p.join("run1/train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        let mut k: Vec<&str> = rec.as_object().unwrap().keys().map(String::as_str).collect();
        k.sort();
        assert_eq!(k, ["combined", "epoch", "nce", "nll", "val_hr10", "wallclock_ms"]);
    }
}

#[test]
fn beta_zero_trains_on_nll_only() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_synth(p, "ds", "2");
    let mut args = vec!["train", "--dataset", "ds", "--out", "run", "--model", "gru4rec", "--beta", "0"];
    args.extend(QUICK_TRAIN);
    let o = run(p, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for line in fs::read_to_string(p.join("run/train_log.ndjson")).unwrap().lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["combined"], rec["nll"]);
    }
    assert_eq!(read_json(&p.join("run/manifest.json"))["settings"]["beta"], json!(0.0));
}

#[test]
fn mismatched_vocabulary_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_synth(p, "ds", "1");
    let o = run(
        p,
        &["synth", "--out", "other", "--sessions", "120", "--catalog-size", "50", "--seed", "1"],
    );
    assert_eq!(code(&o), 0);
    let mut args = vec!["train", "--dataset", "ds", "--out", "run", "--model", "caser"];
    args.extend(QUICK_TRAIN);
    assert_eq!(code(&run(p, &args)), 0);
    let o = run(p, &["eval", "--checkpoint", "run/checkpoint.bin", "--dataset", "other", "--out", "ev"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    // a tampered session file no longer matches its manifest
    let sessions = p.join("ds/sessions.txt");
    let text = fs::read_to_string(&sessions).unwrap();
    let flipped = text.replacen("\t0", "\t1", 1);
    fs::write(&sessions, flipped).unwrap();
    let o = run(p, &["eval", "--checkpoint", "run/checkpoint.bin", "--dataset", "ds", "--out", "ev"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn conflicts_name_both_keys() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_synth(p, "ds", "1");
    let cases: [(&[&str], &str, &str); 5] = [
        (&["train", "--dataset", "ds", "--out", "r", "--dim", "10", "--heads", "4"], "dim", "heads"),
        (&["train", "--dataset", "ds", "--out", "r", "--model", "gru4rec", "--mask-prob", "0.3"], "mask_prob", "model"),
        (&["train", "--dataset", "ds", "--out", "r", "--max-len", "5"], "max_len", "dataset"),
        (&["synth", "--out", "s", "--min-length", "30", "--max-length", "20"], "min_length", "max_length"),
        (&["synth", "--out", "s", "--catalog-size", "10", "--max-length", "20"], "catalog_size", "max_length"),
    ];
    for (args, a, b) in cases {
        let o = run(p, args);
        let err = stderr(&o);
        assert_eq!(code(&o), 2, "{args:?}: {err}");
        assert!(err.contains(&format!("`{a}`")) && err.contains(&format!("`{b}`")), "{err}");
    }
    assert!(!p.join("r").exists());
    assert!(!p.join("s").exists());
}

#[test]
fn config_file_is_layered_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_synth(p, "ds", "1");
    fs::write(
        p.join("cfg.json"),
        r#"{"dataset": "ds", "out": "run", "model": "bert4rec", "dim": 8, "heads": 2, "blocks": 1,
            "epochs": 1, "neg_samples": 10, "mask_prob": 0.4, "beta": 0.9}"#,
    )
    .unwrap();
    let o = run(p, &["train", "--config", "cfg.json", "--beta", "0.25"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = &read_json(&p.join("run/manifest.json"))["settings"];
    assert_eq!(s["beta"], json!(0.25));
    assert_eq!(s["mask_prob"], json!(0.4));
    assert_eq!(s["model"], "bert4rec");
    assert_eq!(s["lr"], json!(0.005));

    fs::write(p.join("bad.json"), r#"{"dataset": "ds", "learning_rate": 0.1}"#).unwrap();
    let o = run(p, &["train", "--config", "bad.json", "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"));
    fs::write(p.join("nested.json"), r#"{"model": {"name": "sasrec"}}"#).unwrap();
    assert_eq!(code(&run(p, &["train", "--config", "nested.json"])), 2);
}

#[test]
fn divergence_exits_with_numeric_code_after_saving() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_synth(p, "ds", "1");
    let mut args = vec!["train", "--dataset", "ds", "--out", "run", "--model", "gru4rec", "--lr", "1e300"];
    args.extend(QUICK_TRAIN);
    let o = run(p, &args);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(p.join("run/checkpoint.bin").exists());
    assert!(read_json(&p.join("run/manifest.json"))["results"]["aborted"].is_string());
}

fn metrics(p: &Path, name: &str, hash: &str, hr1: f64, skip: f64) {
    let m = json!({
        "model": name, "dataset_hash": hash, "seed": 0,
        "hr1": hr1, "hr5": 0.5, "hr10": 0.6, "hr20": 0.7, "map10": 0.3,
        "skip_mrr10": skip, "n_pos": 10, "n_skip": 4
    });
    fs::write(p.join(format!("{name}.json")), m.to_string()).unwrap();
}

#[test]
fn compare_reports_signed_rounded_percentages() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    metrics(p, "orig", "h", 0.377, 0.540);
    metrics(p, "ours", "h", 0.410, 0.460);
    metrics(p, "elsewhere", "g", 0.410, 0.460);
    let o = run(p, &["compare", "orig.json", "ours.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let line = |m: &str| text.lines().find(|l| l.starts_with(m)).unwrap().to_string();
    assert!(line("hr1 ").contains("+9%"), "{text}");
    let skip = line("skip_mrr10");
    assert!(skip.contains("-15%") && skip.contains("improvement"), "{text}");
    assert!(line("hr10").contains(" 0%"));

    let o = run(p, &["compare", "orig.json", "orig.json", "--out", "same.txt"]);
    assert_eq!(code(&o), 0);
    let same = fs::read_to_string(p.join("same.txt")).unwrap();
    assert_eq!(same.matches(" 0%").count(), 6, "{same}");
    assert!(p.join("same.txt.manifest.json").exists());

    assert_eq!(code(&run(p, &["compare", "orig.json", "elsewhere.json"])), 3);

    let o = run(p, &["report", "orig.json", "ours.json"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().contains("0.410 (+9%)"));
}

#[test]
fn baseline_run_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_synth(p, "ds", "4");
    let o = run(p, &["baseline", "--dataset", "ds", "--out", "bl", "--variant", "nr", "--iterations", "3", "--factors", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = read_json(&p.join("bl/metrics.json"));
    assert_eq!(m["model"], "wrmf-nr");
    let o = run(p, &["eval", "--checkpoint", "bl/checkpoint.bin", "--dataset", "ds", "--out", "ev"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_json(&p.join("ev/metrics.json")), m);
    assert_eq!(code(&run(p, &["baseline", "--dataset", "ds", "--out", "x", "--method", "svd"])), 2);
}
