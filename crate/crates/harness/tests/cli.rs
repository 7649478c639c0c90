use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn aqp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aqp")).current_dir(dir).args(args).output().expect("spawn aqp")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn generate_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(aqp(d, &["gen-data", "--profile", "skewed", "--n", "3000", "--d", "1", "--seed", "7", "--deletes", "0.1", "--out", "data.jsonl"]));
    ok(aqp(d, &["gen-queries", "--n", "60", "--seed", "7", "--data", "data.jsonl", "--out", "queries.jsonl"]));
    fs::write(d.join("cfg.toml"), "k = 8\nm = 100\nseed = 3\n").unwrap();
    ok(aqp(
        d,
        &[
            "run", "--stream", "data.jsonl", "--queries", "queries.jsonl", "--config", "cfg.toml", "--engines", "dpt,rs,srs",
            "--out", "report.json", "--omit-timing", "--per-query",
        ],
    ));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["queries"], 60);
    assert_eq!(report["config"]["k"], 8);
    let engines = report["engines"].as_array().unwrap();
    assert_eq!(engines.iter().map(|e| e["engine"].as_str().unwrap()).collect::<Vec<_>>(), ["dpt", "rs", "srs"]);
    for e in engines {
        assert_eq!(e["queries"].as_array().unwrap().len(), 60);
        assert!(e.get("timing").is_none());
        assert!(e["relative_error"]["median"].is_number());
    }

    // reports without timing are reproducible
    let first = fs::read(d.join("report.json")).unwrap();
    ok(aqp(d, &["run", "--stream", "data.jsonl", "--queries", "queries.jsonl", "--config", "cfg.toml", "--out", "again.json", "--omit-timing", "--per-query"]));
    assert_eq!(first, fs::read(d.join("again.json")).unwrap());

    let status: serde_json::Value = serde_json::from_str(&ok(aqp(d, &["status", "--stream", "data.jsonl", "--config", "cfg.toml"]))).unwrap();
    assert_eq!(status["phase"], "done");
    assert!(status["leaves"].as_u64().unwrap() >= 1);
}

#[test]
fn queries_without_data_use_the_domain() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(aqp(dir.path(), &["gen-queries", "--n", "9", "--seed", "1", "--d", "2", "--kind", "avg"]));
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 9);
    assert!(lines.iter().all(|q| q["op"] == "query" && q["kind"] == "avg" && q["predicate"]["lo"].as_array().unwrap().len() == 2));
}

#[test]
fn csv_conversion() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("in.csv"), "x,y,amount\n1,2,3.5\n4,5,6\n").unwrap();
    ok(aqp(d, &["convert-csv", "--agg-col", "amount", "--pred-cols", "x,y", "--input", "in.csv", "--out", "out.jsonl"]));
    let text = fs::read_to_string(d.join("out.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with(r#"{"op":"insert","id":0,"coords":[1.0,2.0],"value":3.5}"#), "{text}");
}

#[test]
fn malformed_stream_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.jsonl"), "{\"op\":\"insert\",\"id\":0,\"coords\":[1.0],\"value\":1.0}\n{\"op\":\"nope\"}\n").unwrap();
    let out = aqp(d, &["run", "--stream", "bad.jsonl"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
}
