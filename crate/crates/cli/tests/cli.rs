use std::path::Path;
use std::process::{Command, Output};

fn coelastic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coelastic")).args(args).output().expect("spawn coelastic")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn lists_bundled_scenarios() {
    let s = ok(&coelastic(&["list-scenarios"]));
    for name in ["default", "ablation-memory", "ablation-scheduler", "ablation-dualslo", "elasticity", "fuzz"] {
        assert!(s.contains(name), "{name} missing from:\n{s}");
    }
}

#[test]
fn simulate_then_verify_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let s = ok(&coelastic(&["simulate", "default", "--variant", "dual", "--set", "sim.steps=1", "--seed", "3", "--out", out]));
    assert!(s.contains("dual"));
    let run = dir.path().join("dual");
    for f in ["eventlog.jsonl", "requests.csv", "steps.csv", "summary.csv", "gpus.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(dir.path().join("summary.csv").exists());
    let log = run.join("eventlog.jsonl");
    let v = ok(&coelastic(&["verify", log.to_str().unwrap()]));
    assert!(v.contains("verified 3 file(s)"), "{v}");

    // tampering with a derived metric is caught
    let steps = run.join("steps.csv");
    let text = std::fs::read_to_string(&steps).unwrap();
    std::fs::write(&steps, text.replacen('1', "2", 1)).unwrap();
    let bad = coelastic(&["verify", log.to_str().unwrap()]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("steps.csv"));
}

#[test]
fn simulate_rejects_unknown_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(!coelastic(&["simulate", "no-such-scenario", "--out", out]).status.success());
    assert!(!coelastic(&["simulate", "default", "--variant", "nope", "--out", out]).status.success());
    assert!(!coelastic(&["simulate", "default", "--set", "cluster.bogus=1", "--out", out]).status.success());
}

#[test]
fn converts_azure_style_traces() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("azure.csv");
    std::fs::write(
        &input,
        "TIMESTAMP,ContextTokens,GeneratedTokens\n\
         2023-11-16 18:15:46.6805900,374,44\n\
         2023-11-16 18:15:46.1805900,1000,10\n\
         2023-11-16 18:15:50.0000000,0,12\n",
    )
    .unwrap();
    let output = dir.path().join("trace.csv");
    let s = ok(&coelastic(&["convert-trace", input.to_str().unwrap(), output.to_str().unwrap()]));
    assert!(s.starts_with("2 records"), "{s}");
    let trace = std::fs::read_to_string(&output).unwrap();
    let rows: Vec<&str> = trace.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows, vec!["0,1000,10", "500000,374,44"]);
}

#[test]
fn transfer_bench_writes_exact_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    ok(&coelastic(&[
        "transfer-bench",
        "--layers",
        "2",
        "--hidden",
        "64",
        "--vocab",
        "256",
        "--bandwidth-gbps",
        "100,1000",
        "--transport",
        "memory",
        "--out",
        csv.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(Path::new(&csv)).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let exact = header.iter().position(|h| *h == "exact").unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 4);
    assert!(rows.iter().all(|r| r[exact] == "true"));
    assert!(!coelastic(&["transfer-bench", "--modes", "turbo"]).status.success());
}
