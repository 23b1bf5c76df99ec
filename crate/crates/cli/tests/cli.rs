use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn harvest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harvest"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = harvest(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path -> bytes for every file below `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    files
}

/// Runs every command once into `root`, returning captured stdout.
fn pipeline(root: &Path, seed: &str, jobs: &str) -> Vec<String> {
    let cfg = fixture("tiny.json");
    let (b, q, sim) = (root.join("build"), root.join("sched"), root.join("sim"));
    let policy = format!("qtable:{}", s(&q.join("qtable.json")));
    vec![
        ok(&[
            "build-ensemble",
            "--config",
            s(&cfg),
            "--seed",
            seed,
            "--out",
            s(&b),
        ]),
        ok(&[
            "train-scheduler",
            "--config",
            s(&cfg),
            "--seed",
            seed,
            "--ensemble",
            s(&b),
            "--out",
            s(&q),
        ]),
        ok(&[
            "simulate",
            "--config",
            s(&cfg),
            "--seed",
            seed,
            "--ensemble",
            s(&b),
            "--policy",
            &policy,
            "--policy",
            "fixed:1",
            "--out",
            s(&sim),
            "--jobs",
            jobs,
        ]),
        ok(&["report", s(&sim), "--format", "csv"]),
    ]
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out_a = pipeline(a.path(), "5", "1");
    let out_b = pipeline(b.path(), "5", "3");
    assert_eq!(out_a, out_b);
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(sa.len() > 15);
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{} differs", k.display());
    }
    for dir in ["all", "fixed-1", "qtable"] {
        for f in ["report.json", "report.txt", "report.csv", "events.csv"] {
            assert!(
                sa.contains_key(&Path::new("sim").join(dir).join(f)),
                "missing {dir}/{f}"
            );
        }
    }
    let events = String::from_utf8(sa[Path::new("sim/qtable/events.csv")].clone()).unwrap();
    assert!(events.starts_with("time,voltage,p_harv,action,learners_run,correct_flag,event_type\n"));
    let report = &out_a[3];
    assert!(report.starts_with("run,policy,requests,failure_rate"));
    assert_eq!(report.lines().count(), 4);
}

#[test]
fn different_seeds_give_different_pools() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = fixture("tiny.json");
    ok(&[
        "build-ensemble",
        "--config",
        s(&cfg),
        "--seed",
        "1",
        "--out",
        s(a.path()),
    ]);
    ok(&[
        "build-ensemble",
        "--config",
        s(&cfg),
        "--seed",
        "2",
        "--out",
        s(b.path()),
    ]);
    assert_ne!(
        fs::read(a.path().join("pool/learner_00.bin")).unwrap(),
        fs::read(b.path().join("pool/learner_00.bin")).unwrap()
    );
}

#[test]
fn validation_errors_exit_1_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let code = |o: Output| o.status.code();

    assert_eq!(
        code(harvest(&[
            "build-ensemble",
            "--config",
            "/no/such.json",
            "--out",
            s(&out)
        ])),
        Some(1)
    );
    assert_eq!(code(harvest(&["frobnicate"])), Some(1));

    let mut cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fixture("tiny.json")).unwrap()).unwrap();
    cfg["pool"]["pool_size"] = 2.into();
    cfg["network"] = s(&fixture("tiny_net.json")).into();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, cfg.to_string()).unwrap();
    let o = harvest(&["build-ensemble", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(code(o), Some(1));
    assert!(!out.exists());

    let cfg = fixture("tiny.json");
    let o = harvest(&[
        "simulate",
        "--config",
        s(&cfg),
        "--ensemble",
        "/no/such",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(o), Some(1));
    let o = harvest(&[
        "simulate",
        "--config",
        s(&cfg),
        "--ensemble",
        "/no/such",
        "--policy",
        "sometimes",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(o), Some(1));
    assert!(!out.exists());
}

#[test]
fn mismatched_qtable_is_rejected_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("tiny.json");
    let b = dir.path().join("b");
    ok(&["build-ensemble", "--config", s(&cfg), "--out", s(&b)]);
    let table = dir.path().join("q.json");
    // a table for N = 3 against an N = 2 ensemble
    let mut q: serde_json::Value = serde_json::from_str(&{
        ok(&[
            "train-scheduler",
            "--config",
            s(&cfg),
            "--ensemble",
            s(&b),
            "--out",
            s(&dir.path().join("q")),
        ]);
        fs::read_to_string(dir.path().join("q/qtable.json")).unwrap()
    })
    .unwrap();
    q["ensemble_size"] = 3.into();
    fs::write(&table, q.to_string()).unwrap();
    let out = dir.path().join("sim");
    let o = harvest(&[
        "simulate",
        "--config",
        s(&cfg),
        "--ensemble",
        s(&b),
        "--policy",
        &format!("qtable:{}", s(&table)),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn trace_override_replays_a_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("tiny.json");
    let b = dir.path().join("b");
    ok(&["build-ensemble", "--config", s(&cfg), "--out", s(&b)]);
    let trace = dir.path().join("dark.csv");
    fs::write(&trace, "timestamp_s,power_W\n0,0\n3000,0\n").unwrap();
    let out = dir.path().join("sim");
    let table = ok(&[
        "simulate",
        "--config",
        s(&cfg),
        "--ensemble",
        s(&b),
        "--trace",
        s(&trace),
        "--out",
        s(&out),
        "--format",
        "json",
    ]);
    let rows: serde_json::Value = serde_json::from_str(&table).unwrap();
    assert_eq!(rows[0]["policy"], "all");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("all/report.json")).unwrap()).unwrap();
    assert_eq!(report["energy"]["harvested"], 0.0);
}
