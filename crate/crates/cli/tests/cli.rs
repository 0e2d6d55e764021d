//! End-to-end tests of the `communityfl` binary.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use communityfl::artifacts::{read_summary, RunOutcome};
use communityfl::netproto::schema::protocol_schema_text;
use communityfl::scenarios::{builtin, client_id, FaultKind, FaultSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_communityfl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).expect("utf-8 stdout")
}

#[test]
fn simulate_writes_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--scenario", "uniform", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["rounds.csv", "rounds.jsonl", "cohorts.json", "run_summary.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let summary = read_summary(dir.path()).unwrap();
    assert_eq!(summary.outcome, RunOutcome::Completed);
    assert_eq!(summary.rounds_executed, 10);
    assert!(summary.comparison.is_some());
    assert!(stdout(&o).contains("cohort "));
}

#[test]
fn rounds_csv_is_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let csv = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = run(&["simulate", "--scenario", "drift", "--seed", seed, "--no-compare", "--out", path(&out)]);
        assert!(o.status.success());
        fs::read(out.join("rounds.csv")).unwrap()
    };
    let a = csv("a", "5");
    assert_eq!(a, csv("b", "5"));
    assert_ne!(a, csv("c", "6"));
}

#[test]
fn bad_scenarios_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&["simulate", "--scenario", "no-such-thing", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("neither a scenario file nor a builtin"));

    let file = dir.path().join("bad.json");
    let mut spec = builtin("uniform").unwrap();
    spec.scheduler.cohort_threshold = 1.5;
    fs::write(&file, serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(run(&["simulate", "--scenario", path(&file), "--out", path(&out)]).status.code(), Some(2));

    fs::write(&file, "{\"name\": \"x\"").unwrap();
    assert_eq!(run(&["simulate", "--scenario", path(&file), "--out", path(&out)]).status.code(), Some(2));
    assert!(!out.exists(), "no artifacts for rejected input");
}

#[test]
fn a_run_that_keeps_aborting_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = builtin("dropout").unwrap();
    spec.faults = (1..=8)
        .flat_map(|round| [0, 1].map(|c| FaultSpec { round, client_id: client_id(c), kind: FaultKind::Drop }))
        .collect();
    let file = dir.path().join("aborting.json");
    fs::write(&file, spec.to_json()).unwrap();
    let out = dir.path().join("out");
    let o = run(&["simulate", "--scenario", path(&file), "--no-compare", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(read_summary(&out).unwrap().outcome, RunOutcome::Aborted);
}

#[test]
fn inspect_shows_the_cohort_tree() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    let global = dir.path().join("global");
    assert!(run(&["simulate", "--scenario", "heartrate", "--no-compare", "--out", path(&cohort)]).status.success());
    let args = ["simulate", "--scenario", "heartrate", "--mode", "global", "--no-compare", "--out", path(&global)];
    assert!(run(&args).status.success());

    let first = stdout(&run(&["inspect", "--out", path(&cohort)]));
    assert_eq!(first, stdout(&run(&["inspect", "--out", path(&cohort)])), "inspect output is stable");
    assert!(first.contains("FL population 2"), "{first}");
    assert!(first.contains("FL cohort 2"), "{first}");
    assert!(first.contains("M2.2-c"));

    let flat = stdout(&run(&["inspect", "--out", path(&global)]));
    assert!(flat.contains("FL population 2"));
    assert!(!flat.contains("FL cohort 2"), "{flat}");
}

#[test]
fn inspect_of_an_empty_directory_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["inspect", "--out", path(dir.path())]).status.code(), Some(2));
}

#[test]
fn schema_matches_the_library_and_the_checked_in_copy() {
    let o = run(&["schema"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), protocol_schema_text());
    let docs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/protocol.schema.json");
    assert_eq!(fs::read_to_string(docs).unwrap(), protocol_schema_text(), "regenerate with `communityfl schema --out`");
}

#[test]
fn scenarios_lists_and_shows_builtins() {
    let list = stdout(&run(&["scenarios"]));
    assert_eq!(list.lines().collect::<Vec<_>>(), ["uniform", "heartrate", "drift", "poison", "dropout"]);
    let shown = stdout(&run(&["scenarios", "--show", "poison"]));
    assert_eq!(shown, builtin("poison").unwrap().to_json());
}

#[test]
fn serve_and_clients_run_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = builtin("uniform").unwrap();
    spec.n_clients = 3;
    spec.tasks.truncate(3);
    spec.scheduler.rounds = 5;
    let file = dir.path().join("small.json");
    fs::write(&file, spec.to_json()).unwrap();
    let bundle = dir.path().join("bundle");
    assert!(run(&["export", "--scenario", path(&file), "--out", path(&bundle)]).status.success());

    let out = dir.path().join("serve-out");
    let mut server = bin()
        .args(["serve", "--listen", "127.0.0.1:0", "--config", path(&bundle.join("server.json")), "--out", path(&out)])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut reader = BufReader::new(server.stdout.take().unwrap());
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_string();

    let clients: Vec<_> = (0..3)
        .map(|i| {
            let id = client_id(i);
            bin()
                .args(["client", "--connect", &addr])
                .args(["--data", path(&bundle.join(format!("{id}.data.json")))])
                .args(["--metadata", path(&bundle.join(format!("{id}.metadata.json")))])
                .stdout(Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    for c in clients {
        let o = c.wait_with_output().unwrap();
        assert!(o.status.success());
        assert!(stdout(&o).contains("5 updates sent, 5 acked"), "{}", stdout(&o));
    }
    assert!(server.wait().unwrap().success());

    let rows = fs::read_to_string(out.join("rounds.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 5);
    let summary = read_summary(&out).unwrap();
    assert_eq!(summary.outcome, RunOutcome::Completed);
    assert_eq!(summary.committed_rounds, 5);

    let sim_out = dir.path().join("sim");
    assert!(run(&["simulate", "--scenario", path(&file), "--no-compare", "--out", path(&sim_out)]).status.success());
    assert_eq!(read_summary(&sim_out).unwrap().final_weight_hashes, summary.final_weight_hashes);
}
