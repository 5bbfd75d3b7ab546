use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};

fn lens(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lens"))
        .current_dir(dir)
        .env_remove("LENS_MODEL_ENDPOINT")
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const CONFIG: &str = r#"
seed = 11
[counts.val]
"color.yes_no" = 12
"shape.yes_no" = 6
"#;

#[test]
fn gen_then_readiness_with_perfect_mock() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    let out = lens(dir.path(), &["gen", "--config", "cfg.toml", "--out", "data", "--instructions"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).starts_with("val\t18\t"));
    let manifest = dir.path().join("data/val/manifest.jsonl");
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 18);
    assert_eq!(read_json(&dir.path().join("data/val/instructions.json")).as_array().unwrap().len(), 18);

    let out = lens(
        dir.path(),
        &["readiness", "--manifest", "data/val/manifest.jsonl", "--endpoint", "mock:perfect", "--out", "res"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&dir.path().join("res/readiness.json"));
    for (cell, acc) in report["cells"].as_object().unwrap() {
        assert_eq!(acc["accuracy"], 100.0, "{cell}");
    }
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    for out in ["a", "b"] {
        assert_eq!(code(&lens(dir.path(), &["gen", "--config", "cfg.toml", "--out", out, "--workers", "1"])), 0);
    }
    let a = std::fs::read(dir.path().join("a/val/manifest.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b/val/manifest.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), "seed = \"nope\"").unwrap();
    let out = lens(dir.path(), &["gen", "--config", "cfg.toml"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = lens(dir.path(), &["gen", "--config", "missing.toml"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_endpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lens(dir.path(), &["exam", "probe"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no endpoint"));
    let out = lens(dir.path(), &["exam", "probe", "--endpoint", "mock:nonsense"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn color_exam_fields_correct_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = lens(
        dir.path(),
        &[
            "exam", "color", "--endpoint", "mock:color_distance:0.2", "--out", "res", "--reference", "red",
            "--radial", "6", "--angular", "12", "--render",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let field = read_json(&dir.path().join("res/color-255-0-0.json"));
    assert_eq!(field["values"].as_array().unwrap().len(), 72);
    assert!(dir.path().join("res/color-255-0-0.png").exists());
    assert!(!dir.path().join("res/.checkpoints/color-255-0-0.json").exists());

    let out = lens(dir.path(), &["fields", "--endpoint", "mock:perfect", "--bins", "8", "--out", "fl"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let img = image::RgbImage::from_fn(10, 6, |x, y| image::Rgb([(x * 25) as u8, (y * 40) as u8, 90]));
    img.save(dir.path().join("in.png")).unwrap();
    let out = lens(dir.path(), &["correct", "--image", "in.png", "--fields", "fl", "--bins", "8", "--out", "c.png"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let corrected = image::open(dir.path().join("c.png")).unwrap().to_rgb8();
    assert_eq!(corrected.dimensions(), (10, 6));

    let out = lens(dir.path(), &["correct", "--image", "in.png", "--fields", "fl", "--bins", "16", "--out", "d.png"]);
    assert_eq!(code(&out), 2);

    let out = lens(dir.path(), &["report", "--out", "res", "--figures"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = read_json(&dir.path().join("res/report/summary.json"));
    assert_eq!(summary["schema"], "lens-report/1");
    let digest = std::fs::read_to_string(dir.path().join("res/report/digest.txt")).unwrap();
    assert!(digest.contains("sac"), "{digest}");
}

#[test]
fn report_without_artifacts_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let out = lens(dir.path(), &["report", "empty", "--out", "res"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unreachable_endpoint_exits_with_endpoint_failure() {
    let dir = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("http://127.0.0.1:{port}");
    let out = lens(dir.path(), &["exam", "shape", "--sweep", "polygon", "--endpoint", &endpoint]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

/// Answers `/v1/score` until `budget` scores are spent, then 400s until `healthy` is set.
struct FlakyServer {
    endpoint: String,
    scores: Arc<AtomicUsize>,
    healthy: Arc<AtomicBool>,
}

fn flaky_server(budget: usize) -> FlakyServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = format!("http://{}", listener.local_addr().unwrap());
    let scores = Arc::new(AtomicUsize::new(0));
    let healthy = Arc::new(AtomicBool::new(false));
    let (s2, h2) = (scores.clone(), healthy.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let mut len = 0;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                if let Some(v) = h.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let (status, resp) = if path == "/v1/health" {
                (200, json!({"model_id": "flaky"}).to_string())
            } else {
                let req: Value = serde_json::from_slice(&body).unwrap();
                let n = s2.fetch_add(1, Ordering::SeqCst);
                if n >= budget && !h2.load(Ordering::SeqCst) {
                    (400, json!({"error": "refused"}).to_string())
                } else {
                    let cands: Vec<Value> = req["candidates"]
                        .as_array()
                        .unwrap()
                        .iter()
                        .map(|c| {
                            let lp = if c == "yes" { -0.1 } else { -2.5 };
                            json!({"text": c, "first_token_logprob": lp, "sequence_logprob": lp})
                        })
                        .collect();
                    (200, json!({"candidates": cands}).to_string())
                }
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{resp}",
                resp.len()
            );
        }
    });
    FlakyServer { endpoint, scores, healthy }
}

#[test]
fn partial_run_resumes_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let server = flaky_server(10);
    let args = ["exam", "shape", "--sweep", "polygon", "--workers", "1", "--out", "res", "--endpoint", &server.endpoint];
    let out = lens(dir.path(), &args);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("resume"));
    let checkpoint = read_json(&dir.path().join("res/.checkpoints/shape-polygon.json"));
    assert_eq!(checkpoint["values"].as_array().unwrap().len(), 10);

    server.healthy.store(true, Ordering::SeqCst);
    server.scores.store(0, Ordering::SeqCst);
    let out = lens(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(server.scores.load(Ordering::SeqCst), 28 - 10);
    let field = read_json(&dir.path().join("res/shape-polygon.json"));
    let values = field["values"].as_array().unwrap();
    assert_eq!(values.len(), 28);
    assert!(values.iter().all(|v| v.as_f64().unwrap() > 0.9));
}
