mod common;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use common::fixtures;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_ladder");
const OUTPUTS: [&str; 3] = ["program.py", "program.map.json", "session.json"];

fn ladder(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn replay_into(out: &Path, mock: &Path, cache: Option<&Path>) -> Output {
    let script = fixtures().join("scenario/scenario.fig2");
    let mut args = vec!["replay", path(&script), path(mock), "--out", path(out)];
    if let Some(c) = cache {
        args.extend(["--cache", path(c)]);
    }
    ladder(&args)
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("replay.json")).unwrap()).unwrap()
}

#[test]
fn replay_reproduces_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let o = replay_into(dir.path(), &fixtures().join("mock"), None);
    let took = started.elapsed();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(took < Duration::from_secs(5), "replay took {took:?}");
    for f in OUTPUTS {
        let want = std::fs::read(fixtures().join("golden").join(f)).unwrap();
        let got = std::fs::read(dir.path().join(f)).unwrap();
        assert!(want == got, "{f} differs from the golden copy");
    }
    let program = std::fs::read_to_string(dir.path().join("program.py")).unwrap();
    assert!(program.contains("for epoch in range(1, 31):"));
    assert!(program.contains("Ridge(alpha=0.5)"));
    assert!(!program.contains("LinearRegression()"));
    assert!(!program.contains("@ladder:children"));
}

#[test]
fn missing_fixture_is_reported_with_its_key() {
    let dir = tempfile::tempdir().unwrap();
    let mock = dir.path().join("mock");
    std::fs::create_dir_all(&mock).unwrap();
    let mut file: Value = serde_json::from_str(&std::fs::read_to_string(fixtures().join("mock/fig2.json")).unwrap()).unwrap();
    let records = file["records"].as_array_mut().unwrap();
    let at = records.iter().position(|r| r["template"] == "list_steps").unwrap();
    let removed = records.remove(at);
    std::fs::write(mock.join("fig2.json"), file.to_string()).unwrap();

    let o = replay_into(&dir.path().join("out"), &mock, None);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("mock_miss"), "{err}");
    assert!(err.contains(removed["key"].as_str().unwrap()), "{err}");
}

#[test]
fn cached_second_replay_makes_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.json");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(replay_into(&a, &fixtures().join("mock"), Some(&cache)).status.success());
    assert!(replay_into(&b, &fixtures().join("mock"), Some(&cache)).status.success());
    assert_eq!(summary(&a)["backend_calls"], 18);
    assert_eq!(summary(&b)["backend_calls"], 0);
    for f in OUTPUTS {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn export_matches_replay() {
    let dir = tempfile::tempdir().unwrap();
    let o = ladder(&["export", path(&fixtures().join("golden/session.json")), "--out", path(dir.path())]);
    assert!(o.status.success());
    for f in ["program.py", "program.map.json"] {
        assert_eq!(std::fs::read(fixtures().join("golden").join(f)).unwrap(), std::fs::read(dir.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn serve_with_fixtures_answers_health() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(BIN)
        .args(["serve", "--addr", "127.0.0.1:0", "--data", path(dir.path()), "--fixtures", path(&fixtures().join("mock"))])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected: {line}")).to_string();
    let body = reqwest::blocking::get(format!("http://{addr}/health")).unwrap().text().unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["backend"], "mock");
}

#[test]
fn unknown_script_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = ladder(&["replay", "no/such/script", path(&fixtures().join("mock")), "--out", path(dir.path())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error["));
}
