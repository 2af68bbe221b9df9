use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ecsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecsynth"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn demo_bundle(dir: &Path) {
    let o = ecsynth(&["demo-bundle", "--out", s(dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_config_key_fails_validation_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    demo_bundle(dir.path());
    let cfg = dir.path().join("config.toml");
    let text = fs::read_to_string(&cfg).unwrap().replace("[typo]\n", "[typo]\np_spatail = 0.1\n");
    fs::write(&cfg, text).unwrap();

    let o = ecsynth(&["run", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("p_spatail"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_value_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    demo_bundle(dir.path());
    let cfg = dir.path().join("config.toml");
    let text = fs::read_to_string(&cfg).unwrap().replace("failure_rate = 0.3", "failure_rate = 1.3");
    fs::write(&cfg, text).unwrap();
    let o = ecsynth(&["run", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn rerun_produces_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    demo_bundle(dir.path());
    let cfg = dir.path().join("config.toml");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = ecsynth(&["run", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert!(ta.iter().any(|(p, _)| p == "eval_grid.txt"));
    assert_eq!(ta, tb);
}

#[test]
fn isolated_stage_rerun_matches_full_run() {
    let dir = tempfile::tempdir().unwrap();
    demo_bundle(dir.path());
    let cfg = dir.path().join("config.toml");
    let out = dir.path().join("out");
    assert!(ecsynth(&["run", "--config", s(&cfg)]).status.success());
    let before = fs::read(out.join("synthetic.jsonl")).unwrap();
    fs::remove_file(out.join("synthetic.jsonl")).unwrap();
    let o = ecsynth(&["run", "--config", s(&cfg), "--stages", "inject-typos"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(out.join("synthetic.jsonl")).unwrap(), before);
}

#[test]
fn stage_failure_exits_2_and_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    demo_bundle(dir.path());
    let cfg = dir.path().join("config.toml");
    let o = ecsynth(&["run", "--config", s(&cfg), "--stages", "sample"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage sample failed"));
}

#[test]
fn unknown_stage_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    demo_bundle(dir.path());
    let o = ecsynth(&["run", "--config", s(&dir.path().join("config.toml")), "--stages", "clustering"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn standalone_subcommands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    demo_bundle(&d.join("demo"));
    let demo = d.join("demo");
    let run = |args: &[&str]| {
        let o = ecsynth(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    let corpus = demo.join("corpus.jsonl");
    run(&["cluster", "--corpus", s(&corpus), "--k", "5", "--dim", "32", "--seed", "1", "--out", s(&d.join("c.json"))]);
    run(&["sample", "--corpus", s(&corpus), "--clusters", s(&d.join("c.json")), "--per-cluster", "4", "--out", s(&d.join("s.jsonl"))]);
    run(&["inject-grammar", "--input", s(&d.join("s.jsonl")), "--failure-rate", "0.2", "--seed", "3", "--out", s(&d.join("g.jsonl"))]);
    run(&["inject-typos", "--input", s(&d.join("g.jsonl")), "--p-spatial", "0.05", "--seed", "4", "--out", s(&d.join("t.jsonl"))]);
    run(&[
        "score",
        "--input",
        s(&d.join("t.jsonl")),
        "--public-corpus",
        s(&demo.join("public.jsonl")),
        "--domain-corpus",
        s(&demo.join("domain.jsonl")),
        "--out",
        s(&d.join("scores.jsonl")),
    ]);
    let stats = run(&["stats", "--dataset", s(&d.join("t.jsonl"))]);
    assert!(String::from_utf8_lossy(&stats.stdout).contains("errors_per_example"));

    run(&["simbench", "--n", "120", "--k", "5", "--seed", "2", "--out", s(&d.join("bench"))]);
    let b = d.join("bench");
    let fit = run(&[
        "fit-reweight",
        "--eval-matrix",
        s(&b.join("train_set0.jsonl")),
        "--eval-matrix",
        s(&b.join("train_set1.jsonl")),
        "--scores",
        s(&b.join("scores.jsonl")),
        "--restarts",
        "2",
        "--out",
        s(&d.join("fit.json")),
    ]);
    assert!(String::from_utf8_lossy(&fit.stdout).contains("Train"));

    let syn = d.join("syn.jsonl");
    let lines: Vec<String> = fs::read_to_string(d.join("t.jsonl")).unwrap().lines().map(str::to_owned).collect();
    fs::write(&syn, lines.join("\n") + "\n").unwrap();
    run(&[
        "mix",
        "--original",
        s(&demo.join("original_train.jsonl")),
        "--synthetic",
        s(&syn),
        "--ratio",
        "1:4",
        "--length",
        "50",
        "--out",
        s(&d.join("mix.jsonl")),
    ]);
    assert_eq!(fs::read_to_string(d.join("mix.jsonl")).unwrap().lines().count(), 50);
    run(&[
        "plan",
        "--strategy",
        "contmix",
        "--original",
        "o.jsonl",
        "--synthetic",
        "s.jsonl",
        "--out",
        s(&d.join("manifest.json")),
    ]);

    let ev = run(&[
        "evaluate",
        "--dataset",
        s(&demo.join("eval/original_val.jsonl")),
        "--outputs",
        s(&demo.join("eval/original_val_run1.jsonl")),
        "--outputs",
        s(&demo.join("eval/original_val_run2.jsonl")),
        "--judge",
        "normalized",
        "--k",
        "3",
    ]);
    assert!(String::from_utf8_lossy(&ev.stdout).contains("Top-3"));
}

#[test]
fn bad_flags_exit_1() {
    let o = ecsynth(&["inject-typos", "--input", "x.jsonl", "--p-spatial", "1.5", "--out", "y.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    let o = ecsynth(&["mix", "--original", "a", "--synthetic", "b", "--ratio", "1-4", "--out", "c"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(ecsynth(&["--help"]).status.code(), Some(0));
}
