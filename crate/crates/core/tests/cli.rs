use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lbmcts::report::load_history;
use lbmcts::space::parse_space;

fn lbmcts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lbmcts")).args(args).output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn run_synth3(out: &Path, seed: &str, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--space", "synth3", "--budget", "30", "--seed", seed, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    lbmcts(&args)
}

#[test]
fn configuration_errors_exit_with_1() {
    assert_eq!(lbmcts(&["run", "--out", "/tmp/x"]).status.code(), Some(1));
    assert_eq!(lbmcts(&["run", "--space", "/nonexistent.json", "--out", "/tmp/x"]).status.code(), Some(1));
    let o = lbmcts(&["run", "--space", "synth3", "--out", "/tmp/x", "--mode", "sometimes"]);
    assert_eq!(o.status.code(), Some(1));
    let spaces = concat!(env!("CARGO_MANIFEST_DIR"), "/../../spaces/clf8.json");
    let o = lbmcts(&["run", "--space", spaces, "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert_eq!(lbmcts(&["--help"]).status.code(), Some(0));
}

#[test]
fn failing_worker_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_synth3(dir.path(), "0", &["--objective", "external:exit 1"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn unreachable_llm_in_llm_only_mode_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("http://127.0.0.1:{port}");
    let o = run_synth3(dir.path(), "0", &["--mode", "llm", "--llm", "http", "--endpoint", &endpoint]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
}

#[test]
fn run_writes_outputs_and_report_summarizes_them() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (d, seed) in [(&a, "1"), (&b, "2")] {
        let o = run_synth3(d, seed, &[]);
        assert!(o.status.success(), "{}", text(&o));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("best "));
        for f in ["history.jsonl", "summary.json", "tree.jsonl", "space.json"] {
            assert!(d.join(f).exists(), "{f}");
        }
    }
    let history = load_history(&a.join("history.jsonl")).unwrap();
    assert_eq!(history.len(), 30);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["evaluations"], 30);
    assert_eq!(summary["best"]["y"], history.iter().map(|r| r.y).fold(f64::MIN, f64::max));
    assert!(parse_space(&fs::read_to_string(a.join("space.json")).unwrap()).is_ok());

    let o = lbmcts(&["report", a.join("history.jsonl").to_str().unwrap(), b.join("history.jsonl").to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let report = String::from_utf8(o.stdout).unwrap();
    for section in ["== best so far ==", "== allocation ==", "== p_bo trajectories ==", "== configuration diversity =="] {
        assert!(report.contains(section), "{section}\n{report}");
    }
    assert!(report.lines().nth(1).unwrap().ends_with("\tmean"));
    let alloc: f64 = report
        .lines()
        .skip_while(|l| *l != "== allocation ==")
        .skip(1)
        .take_while(|l| !l.is_empty())
        .map(|l| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((alloc - 1.0).abs() < 1e-2, "{report}");
}

#[test]
fn identical_runs_write_identical_histories() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run_synth3(&a, "9", &[]).status.success());
    assert!(run_synth3(&b, "9", &[]).status.success());
    assert_eq!(fs::read(a.join("history.jsonl")).unwrap(), fs::read(b.join("history.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("tree.jsonl")).unwrap(), fs::read(b.join("tree.jsonl")).unwrap());
}

#[test]
fn report_rejects_malformed_history() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("history.jsonl");
    fs::write(&p, "{\"iteration\": 1}\n").unwrap();
    assert_eq!(lbmcts(&["report", p.to_str().unwrap()]).status.code(), Some(1));
}

fn python_has_sklearn() -> bool {
    Command::new("python3").args(["-c", "import sklearn"]).output().map(|o| o.status.success()).unwrap_or(false)
}

#[test]
fn python_worker_round_trip() {
    if !python_has_sklearn() {
        eprintln!("skipping: python3 with scikit-learn not available");
        return;
    }
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../..");
    let dir = tempfile::tempdir().unwrap();
    let objective = format!(
        "external:cd {root}/pyeval && exec python3 -m pyeval --dataset sklearn:breast_cancer --space {root}/spaces/clf8.json"
    );
    let out = dir.path().to_str().unwrap();
    let space = format!("{root}/spaces/clf8.json");
    let o = lbmcts(&["run", "--space", &space, "--objective", &objective, "--budget", "30", "--out", out]);
    assert!(o.status.success(), "{}", text(&o));

    let history = load_history(&dir.path().join("history.jsonl")).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(history.len() + summary["failed_evaluations"].as_u64().unwrap() as usize, 30);
    assert!(history.windows(2).all(|w| w[1].best_so_far >= w[0].best_so_far));

    let o = lbmcts(&["report", dir.path().join("history.jsonl").to_str().unwrap()]);
    let report = String::from_utf8(o.stdout).unwrap();
    let value = |key: &str| -> f64 {
        let line = report.lines().find(|l| l.starts_with(&format!("{key}\t"))).unwrap_or_else(|| panic!("{report}"));
        line.split('\t').nth(1).unwrap().parse().unwrap()
    };
    assert!(value("ensemble") >= value("best single"), "{report}");
}
