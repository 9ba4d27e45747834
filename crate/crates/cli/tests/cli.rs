use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};

const QUERY: &str = "How have Apple shares moved since the Federal Reserve's September rate cut?";
const NOW: &str = "2024-10-15T00:00:00Z";

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn scenario_config() -> String {
    fixtures().join("scenario/fingraph.json").display().to_string()
}

fn run(args: &[&str]) -> Output {
    fingraph().args(args).output().expect("binary runs")
}

fn fingraph() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fingraph"));
    for var in ["HTTP_PROXY", "HTTPS_PROXY", "ALL_PROXY", "http_proxy", "https_proxy", "all_proxy"] {
        cmd.env_remove(var);
    }
    cmd
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let path = dir.join("fingraph.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.display().to_string()
}

fn write_script(dir: &Path, entries: Value) -> String {
    let path = dir.join("script.json");
    std::fs::write(&path, json!({ "entries": entries }).to_string()).unwrap();
    path.display().to_string()
}

#[test]
fn ask_writes_report_and_prints_its_path() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["--config", &scenario_config(), "--now", NOW, "--out", &out.path().display().to_string(), "ask", QUERY]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed = String::from_utf8(o.stdout).unwrap();
    assert_eq!(printed.trim(), out.path().join("report.md").display().to_string());
    let report = std::fs::read_to_string(out.path().join("report.md")).unwrap();
    assert!(report.contains("## Sources"));
    assert!(!report.contains("[12]"));
    assert!(out.path().join("charts/AAPL.json").exists());
    assert!(out.path().join("graph.json").exists());
}

#[test]
fn missing_fixtures_give_a_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let script = fixtures().join("scenario/llm_script.json").canonicalize().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "llm": {"default": {"backend": "scripted", "script": script}},
            "fixtures": {"dir": "empty", "mode": "replay"}
        }),
    );
    let out = dir.path().join("out");
    let o = run(&["--config", &config, "--now", NOW, "--out", &out.display().to_string(), "ask", QUERY]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(report.contains("## Gaps"));
    assert!(report.contains("No timely information was found"));
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"llm\": ").unwrap();
    let o = run(&["--config", &path.display().to_string(), "ask", QUERY]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = run(&["--config", &dir.path().join("absent.json").display().to_string(), "plan", QUERY]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn plan_prints_validated_graph() {
    let o = run(&["--config", &scenario_config(), "--now", NOW, "plan", QUERY]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plan: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(plan["root"], "n001");
    assert_eq!(plan["nodes"][0]["query"], QUERY);
    assert_eq!(plan["nodes"].as_array().unwrap().len(), 5);
}

#[test]
fn cyclic_plan_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let plan = json!({
        "root": "n001",
        "nodes": [
            {"id": "n001", "query": "root", "api": null},
            {"id": "n002", "query": "a", "api": "News"},
            {"id": "n003", "query": "b", "api": "News"}
        ],
        "edges": [["n001", "n002"], ["n002", "n003"], ["n003", "n002"]]
    });
    let script = write_script(dir.path(), json!([{"role": "Planner", "response": plan.to_string()}]));
    let config = write_config(
        dir.path(),
        &json!({"llm": {"default": {"backend": "scripted", "script": script}}, "fixtures": {"dir": "."}}),
    );
    let o = run(&["--config", &config, "--now", NOW, "plan", QUERY]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("CycleDetected"), "{}", stderr(&o));
}

#[test]
fn now_flag_drives_date_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(
        dir.path(),
        json!([{"role": "Planner", "response": r#"{"root":"n001","nodes":[{"id":"n001","query":"x","api":null}],"edges":[]}"#}]),
    );
    let config = write_config(
        dir.path(),
        &json!({"llm": {"default": {"backend": "scripted", "script": script}}, "fixtures": {"dir": "."}}),
    );
    // dates more than a week past --now are rejected
    let o = run(&["--config", &config, "--now", NOW, "plan", "what happens on 2024-12-31?"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = run(&["--config", &config, "--now", "2025-01-02T00:00:00Z", "plan", "what happened on 2024-12-31?"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn record_fixtures_refused_in_replay_mode() {
    let o = run(&["--config", &scenario_config(), "--fixtures-mode", "replay", "record-fixtures", QUERY]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--fixtures-mode record"));
}

#[test]
fn live_mode_names_missing_key_variable() {
    let o = fingraph()
        .env_remove("NEWS_API_KEY")
        .env_remove("WEB_SEARCH_API_KEY")
        .args(["--config", &scenario_config(), "--fixtures-mode", "live", "plan", QUERY])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("_API_KEY"), "{}", stderr(&o));
}

#[test]
fn bench_out_directory_gets_results_json() {
    let out = tempfile::tempdir().unwrap();
    let config = fixtures().join("bench/fingraph.json").display().to_string();
    let o = run(&["--config", &config, "--out", &out.path().display().to_string(), "bench", "--no-temporal"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let results: Value = serde_json::from_str(&std::fs::read_to_string(out.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(results["n"], 20);
    assert_eq!(results["options_used"]["enable_temporal_weighting"], false);
    assert_eq!(results["records"].as_array().unwrap().len(), 20);
}

/// Minimal provider stand-in: serves news, web and chart payloads and
/// counts requests.
fn mock_providers() -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut line = String::new();
            while reader.read_line(&mut line).is_ok_and(|n| n > 2) {
                line.clear();
            }
            counter.fetch_add(1, Ordering::SeqCst);
            let path = request_line.split_whitespace().nth(1).unwrap_or("/");
            let body = if path.starts_with("/news") {
                json!({"status": "ok", "articles": [
                    {"source": {"name": "Wire"}, "title": "Fed cuts by half a point", "description": "First cut since 2020.", "url": "https://wire.example/fed", "publishedAt": "2024-09-18T18:05:00Z"},
                    {"source": {"name": "Wire"}, "title": "Apple near record", "description": "Shares rose.", "url": "https://wire.example/aapl", "publishedAt": "2024-10-11T20:00:00Z"}
                ]})
            } else if path.starts_with("/web") {
                json!({"items": [{"title": "iPhone demand steady", "link": "https://research.example/iphone", "displayLink": "research.example", "snippet": "Upgrades on track."}]})
            } else {
                json!({"chart": {"result": [{"timestamp": [1728394200, 1728480600], "indicators": {"quote": [{
                    "open": [224.3, 225.23], "high": [225.98, 229.75], "low": [223.25, 224.83], "close": [225.77, 229.54], "volume": [31855700, 33591100]
                }]}}], "error": null}})
            }
            .to_string();
            let _ = write!(stream, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len());
        }
    });
    (base, hits)
}

#[test]
fn record_then_replay_reproduces_the_report() {
    let (base, hits) = mock_providers();
    let dir = tempfile::tempdir().unwrap();
    let scenario_script = fixtures().join("scenario/llm_script.json").canonicalize().unwrap();
    let connectors = json!({
        "news": {"endpoint_url": format!("{base}/news"), "api_key_env": "TEST_NEWS_KEY"},
        "web": {"endpoint_url": format!("{base}/web"), "api_key_env": "TEST_WEB_KEY"},
        "finance": {"endpoint_url": format!("{base}/chart")}
    });
    let record_cfg = write_config(
        dir.path(),
        &json!({
            "llm": {"default": {"backend": "scripted", "script": scenario_script}},
            "connectors": connectors,
            "fixtures": {"dir": "recorded", "mode": "record"}
        }),
    );
    let rec_out = dir.path().join("rec");
    let o = fingraph()
        .env("TEST_NEWS_KEY", "k1")
        .env("TEST_WEB_KEY", "k2")
        .args(["--config", &record_cfg, "--now", NOW, "--out", &rec_out.display().to_string(), "record-fixtures", QUERY])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(hits.load(Ordering::SeqCst), 4);
    let index: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("recorded/index.json")).unwrap()).unwrap();
    assert_eq!(index["entries"].as_object().unwrap().len(), 4);

    let replay_dir = dir.path().join("replay");
    std::fs::create_dir(&replay_dir).unwrap();
    let replay_cfg = write_config(
        &replay_dir,
        &json!({
            "llm": {"default": {"backend": "scripted", "script": rec_out.join("llm_script.json")}},
            "fixtures": {"dir": dir.path().join("recorded"), "mode": "replay"}
        }),
    );
    let replay_out = dir.path().join("replayed");
    let o = run(&["--config", &replay_cfg, "--now", NOW, "--out", &replay_out.display().to_string(), "ask", QUERY]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(hits.load(Ordering::SeqCst), 4, "replay must not touch the network");
    assert_eq!(
        std::fs::read(rec_out.join("report.md")).unwrap(),
        std::fs::read(replay_out.join("report.md")).unwrap()
    );
}
