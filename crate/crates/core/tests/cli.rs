mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::SMALL_CONFIG;

fn plo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plo"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run plo")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "plo failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn err(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure");
    String::from_utf8(out.stderr.clone()).unwrap()
}

#[test]
fn full_workflow_over_generated_data() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("base.toml"), SMALL_CONFIG).unwrap();
    ok(&plo(d, &["--config", "base.toml", "--out", "data", "gen-data"]));
    for f in ["pairs.txt", "train_pairs.txt", "val_pairs.txt", "test_pairs.txt", "images.bin", "images.txt"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(d.join("data/pairs.txt")).unwrap().lines().count(), 12);

    let vlm = format!("{SMALL_CONFIG}\n[data]\npath = \"data\"\ncues = \"cues.txt\"\n");
    fs::write(d.join("vlm.toml"), &vlm).unwrap();
    ok(&plo(d, &["--config", "vlm.toml", "--out", "cues.txt", "gen-cues"]));
    let cues = fs::read_to_string(d.join("cues.txt")).unwrap();
    assert_eq!(cues.matches("## ").count(), 12);

    let stdout = ok(&plo(d, &["--config", "vlm.toml", "--out", "run_vlm", "train"]));
    assert!(stdout.contains("\"auc\""));
    let run = d.join("run_vlm");
    for f in [
        "config.toml",
        "checkpoint.bin",
        "metrics.jsonl",
        "report.json",
        "report.csv",
        "scores.csv",
        "branch_stats.csv",
        "vocab.txt",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(run.join("config.toml")).unwrap(), vlm);
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.lines().next().unwrap().contains("\"epoch\":0"));
    let csv = fs::read_to_string(run.join("report.csv")).unwrap();
    assert!(csv.starts_with("S,U,HM,AUC\n"));

    // Re-evaluating the checkpoint gives the stored report.
    let again = ok(&plo(d, &["eval", "--run", "run_vlm"]));
    assert_eq!(again.trim(), fs::read_to_string(run.join("report.json")).unwrap().trim());
    let open = ok(&plo(d, &["eval", "--run", "run_vlm", "--world", "open", "--out", "open_eval"]));
    assert!(open.contains("\"auc\""));
    assert!(d.join("open_eval/report.json").exists());

    let files = ok(&plo(d, &["dump-attn", "--run", "run_vlm", "--index", "1", "--out", "attn_vlm"]));
    let first = files.lines().next().unwrap();
    let attn = fs::read_to_string(d.join(first)).unwrap();
    let header = attn.lines().next().unwrap();
    assert!(header.starts_with("head,query,[CLS]"), "{header}");
    // One row per head and image token (2 heads, 4 patches + CLS).
    assert_eq!(attn.lines().count(), 1 + 2 * 5);

    let llm = vlm.replacen("[model]\n", "[model]\nkind = \"plo-llm\"\n", 1);
    fs::write(d.join("llm.toml"), &llm).unwrap();
    ok(&plo(d, &["--config", "llm.toml", "--out", "run_llm", "train"]));
    assert!(d.join("run_llm/cue_repairs.txt").exists());
    assert!(!d.join("run_llm/branch_stats.csv").exists());
    let files = ok(&plo(d, &["dump-attn", "--run", "run_llm", "--out", "attn_llm"]));
    // Three cues give two refinement steps.
    assert_eq!(files.lines().count(), 2);
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.toml"), "[model]\nwidht = 3\n").unwrap();
    let e = err(&plo(d, &["--config", "bad.toml", "--out", "x", "train"]));
    assert!(e.contains("widht"), "{e}");

    let e = err(&plo(d, &["--config", "missing.toml", "train"]));
    assert!(e.contains("missing.toml"), "{e}");

    let llm = SMALL_CONFIG.replacen("[model]\n", "[model]\nkind = \"plo-llm\"\n", 1);
    fs::write(d.join("llm.toml"), llm).unwrap();
    let e = err(&plo(d, &["--config", "llm.toml", "--out", "r", "train"]));
    assert!(e.contains("gen-cues"), "{e}");
    assert!(!d.join("r").exists());

    fs::create_dir(d.join("taken")).unwrap();
    fs::write(d.join("ok.toml"), SMALL_CONFIG).unwrap();
    let e = err(&plo(d, &["--config", "ok.toml", "--out", "taken", "train"]));
    assert!(e.contains("already exists"), "{e}");

    let e = err(&plo(d, &["--config", "ok.toml", "--out", "t.csv", "ablate", "--axis", "sideways"]));
    assert!(e.contains("sideways"), "{e}");
    let e = err(&plo(d, &["--config", "ok.toml", "train"]));
    assert!(e.contains("--out"), "{e}");
}

#[test]
fn same_config_and_seed_reproduce_metrics_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("c.toml"), SMALL_CONFIG).unwrap();
    ok(&plo(d, &["--config", "c.toml", "--out", "a", "train"]));
    ok(&plo(d, &["--config", "c.toml", "--out", "b", "train"]));
    for f in ["metrics.jsonl", "report.json", "checkpoint.bin", "scores.csv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    ok(&plo(d, &["--config", "c.toml", "--seed", "6", "--out", "c", "train"]));
    assert_ne!(fs::read(d.join("a/metrics.jsonl")).unwrap(), fs::read(d.join("c/metrics.jsonl")).unwrap());
    assert!(fs::read_to_string(d.join("c/config.toml")).unwrap().contains("seed = 6"));
}

#[test]
fn gradcheck_subcommand_reports_every_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&plo(tmp.path(), &["gradcheck", "--instances", "2"]));
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
    assert!(out.contains("plo-vlm loss (dynamic)"));
    assert!(out.contains("plo-llm loss"));
}

#[test]
fn ablations_tabulate_every_setting() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("c.toml"), SMALL_CONFIG.replace("epochs = 2", "epochs = 1")).unwrap();
    for (axis, settings) in [
        ("observation-order", vec!["none", "state-first", "object-first", "dynamic"]),
        ("cue-count", vec!["1", "2", "3", "4", "5"]),
        ("fusion-lambda", vec!["0", "0.3", "0.5", "0.7", "1"]),
    ] {
        let out = format!("{axis}.csv");
        let stdout = ok(&plo(d, &["--config", "c.toml", "--out", &out, "ablate", "--axis", axis]));
        let table = fs::read_to_string(d.join(&out)).unwrap();
        assert_eq!(stdout, table);
        let mut lines = table.lines();
        assert_eq!(lines.next(), Some("setting,S,U,HM,AUC"));
        let got: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(got, settings, "{axis}");
    }
}
