use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use wildtrap::eval::{evaluate_files, EvalConfig, Interpolation};
use wildtrap::ingest::{sha256_hex, Modality};
use wildtrap::synth::{encode_png, render_scene};

const BIN: &str = env!("CARGO_BIN_EXE_wildtrap");

fn wildtrap(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().expect("spawn wildtrap")
}

fn ok(args: &[&str]) -> String {
    let out = wildtrap(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A running `serve` or `detector serve`, killed on drop.
struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(args: &[&str]) -> Self {
        let mut child = Command::new(BIN)
            .args(args)
            .args(["--listen", "127.0.0.1:0"])
            .env_remove("WILDTRAP_TOKEN")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn server");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected first line `{line}`"))
            .to_string();
        Self { child, base }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

fn get(a: &ureq::Agent, url: &str) -> (u16, Value) {
    let mut r = a.get(url).call().unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_json().unwrap_or(Value::Null))
}

fn post(a: &ureq::Agent, url: &str, body: &Value) -> (u16, Value) {
    let mut r = a.post(url).send_json(body).unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_json().unwrap_or(Value::Null))
}

fn png(salt: u64) -> Vec<u8> {
    encode_png(&render_scene(64, 48, &[], Modality::Visual, salt))
}

fn manifest(bytes: &[u8]) -> Value {
    json!({
        "station_id": "st-1",
        "camera_id": "cam-000",
        "captured_at": "2024-03-01T02:00:00Z",
        "content_sha256": sha256_hex(bytes),
        "byte_length": bytes.len(),
        "modality": "visual",
        "sequence_no": 0,
    })
}

fn wait_for(what: &str, mut f: impl FnMut() -> bool) {
    let start = Instant::now();
    while !f() {
        assert!(start.elapsed() < Duration::from_secs(30), "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(50));
    }
}

fn processed(a: &ureq::Agent, s: &Server) -> u64 {
    get(a, &s.url("/v1/stats")).1["images_processed"]
        .as_u64()
        .unwrap()
}

fn upload(a: &ureq::Agent, s: &Server, bytes: &[u8]) -> Value {
    let (st, begin) = post(a, &s.url("/v1/uploads"), &manifest(bytes));
    assert_eq!(st, 200, "{begin}");
    let id = begin["session_id"].as_str().unwrap();
    let mut r = a
        .put(&s.url(&format!("/v1/uploads/{id}?offset=0")))
        .send(bytes)
        .unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(
        r.body_mut().read_json::<Value>().unwrap()["resume_offset"],
        bytes.len()
    );
    let (st, asset) = post(a, &s.url(&format!("/v1/uploads/{id}/finalize")), &json!({}));
    assert_eq!(st, 201, "{asset}");
    asset
}

#[test]
fn upload_is_detected_and_served_back() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().to_str().unwrap();
    let s = Server::start(&["serve", "--store", store, "--backend", "empty"]);
    let a = agent();
    let bytes = png(1);
    let asset = upload(&a, &s, &bytes);
    assert_eq!(asset["sha256"], sha256_hex(&bytes));
    wait_for("processing", || processed(&a, &s) == 1);

    let mut r = a
        .get(&s.url(&format!("/v1/images/{}", sha256_hex(&bytes))))
        .call()
        .unwrap();
    assert_eq!(r.headers()["content-type"], "image/png");
    assert_eq!(r.body_mut().read_to_vec().unwrap(), bytes);

    // Same content again is answered without a new session.
    let (st, again) = post(&a, &s.url("/v1/uploads"), &manifest(&bytes));
    assert_eq!(st, 200);
    assert_eq!(again["deduplicated"], true);

    assert_eq!(get(&a, &s.url("/v1/images/00")).0, 400);
    assert_eq!(get(&a, &s.url(&format!("/v1/images/{}", "0".repeat(64)))).0, 404);
}

#[test]
fn requests_without_the_token_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().to_str().unwrap();
    let s = Server::start(&["serve", "--store", store, "--token", "s3cret"]);
    let a = agent();
    assert_eq!(get(&a, &s.url("/v1/stats")).0, 401);
    let r = a
        .get(&s.url("/v1/stats"))
        .header("Authorization", "Bearer wrong")
        .call()
        .unwrap();
    assert_eq!(r.status().as_u16(), 401);
    let r = a
        .get(&s.url("/v1/stats"))
        .header("Authorization", "Bearer s3cret")
        .call()
        .unwrap();
    assert_eq!(r.status().as_u16(), 200);
    let r = a
        .get(&s.url("/v1/stats"))
        .header("X-Wildtrap-Token", "s3cret")
        .call()
        .unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(a.get(&s.url("/healthz")).call().unwrap().status().as_u16(), 200);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("service.json");
    std::fs::write(
        &cfg,
        json!({ "store_root": dir.path().join("store"), "auth_token": "from-file" }).to_string(),
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let a = agent();

    let s = Server::start(&["serve", "--config", cfg]);
    assert_eq!(get(&a, &s.url("/v1/stats")).0, 401);
    let r = a
        .get(&s.url("/v1/stats"))
        .header("X-Wildtrap-Token", "from-file")
        .call()
        .unwrap();
    assert_eq!(r.status().as_u16(), 200);
    s.kill();
    assert!(dir.path().join("store").is_dir());

    let s = Server::start(&["serve", "--config", cfg, "--token", "from-flag"]);
    let r = a
        .get(&s.url("/v1/stats"))
        .header("X-Wildtrap-Token", "from-flag")
        .call()
        .unwrap();
    assert_eq!(r.status().as_u16(), 200);
}

#[test]
fn upload_resumes_after_a_crash() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().to_str().unwrap();
    let a = agent();
    let bytes = png(7);
    let half = bytes.len() / 2;

    let s = Server::start(&["serve", "--store", store, "--backend", "empty"]);
    let (_, begin) = post(&a, &s.url("/v1/uploads"), &manifest(&bytes));
    let id = begin["session_id"].as_str().unwrap().to_string();
    let r = a
        .put(&s.url(&format!("/v1/uploads/{id}?offset=0")))
        .send(&bytes[..half])
        .unwrap();
    assert_eq!(r.status().as_u16(), 200);
    s.kill();

    let s = Server::start(&["serve", "--store", store, "--backend", "empty"]);
    let (_, begin) = post(&a, &s.url("/v1/uploads"), &manifest(&bytes));
    assert_eq!(begin["session_id"], id.as_str());
    assert_eq!(begin["resume_offset"], half);

    // A chunk at the wrong offset is refused with the offset to resume from.
    let mut r = a
        .put(&s.url(&format!("/v1/uploads/{id}?offset=0")))
        .send(&bytes[..half])
        .unwrap();
    assert_eq!(r.status().as_u16(), 409);
    assert_eq!(r.body_mut().read_json::<Value>().unwrap()["resume_offset"], half);

    let r = a
        .put(&s.url(&format!("/v1/uploads/{id}?offset={half}")))
        .send(&bytes[half..])
        .unwrap();
    assert_eq!(r.status().as_u16(), 200);
    let (st, _) = post(&a, &s.url(&format!("/v1/uploads/{id}/finalize")), &json!({}));
    assert_eq!(st, 201);
    wait_for("processing", || processed(&a, &s) == 1);
}

#[test]
fn unprocessed_images_are_picked_up_on_start() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().to_str().unwrap();
    ok(&["fleet", "simulate", "--store", store, "--cameras", "4", "--images-per-camera", "5"]);
    let s = Server::start(&["serve", "--store", store]);
    let a = agent();
    wait_for("requeued images", || processed(&a, &s) == 20);
    let (st, events) = get(&a, &s.url("/v1/events?camera_id=cam-001"));
    assert_eq!(st, 200);
    let events = events.as_array().unwrap();
    assert!(!events.is_empty());
    assert!(events.iter().all(|e| e["camera_id"] == "cam-001"));
    let (st, _) = get(&a, &s.url("/v1/events?min_confidence=2"));
    assert_eq!(st, 400);
}

#[test]
fn alerts_and_corrections_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().to_str().unwrap();
    ok(&["fleet", "simulate", "--store", store, "--cameras", "5", "--images-per-camera", "10"]);
    let s = Server::start(&["serve", "--store", store]);
    let a = agent();
    wait_for("processing", || processed(&a, &s) == 50);
    wait_for("alert delivery", || {
        let (_, all) = get(&a, &s.url("/v1/alerts"));
        let all = all.as_array().unwrap();
        !all.is_empty() && all.iter().all(|x| x["state"] == "delivered")
    });
    let (_, delivered) = get(&a, &s.url("/v1/alerts?state=delivered"));
    let id = delivered[0]["alert_id"].as_str().unwrap().to_string();
    assert_eq!(get(&a, &s.url("/v1/alerts?state=bogus")).0, 400);

    let ack = s.url(&format!("/v1/alerts/{id}/ack"));
    let (st, out) = post(&a, &ack, &json!({ "actor": "ranger-1" }));
    assert_eq!(st, 200);
    assert_eq!(out["changed"], true);
    assert_eq!(out["alert"]["state"], "acknowledged");
    let (st, out) = post(&a, &ack, &json!({ "actor": "ranger-1" }));
    assert_eq!((st, &out["changed"]), (200, &json!(false)));
    assert_eq!(post(&a, &ack, &json!({ "actor": "ranger-2" })).0, 409);
    assert_eq!(post(&a, &s.url("/v1/alerts/nope/ack"), &json!({ "actor": "x" })).0, 404);

    let (_, events) = get(&a, &s.url("/v1/events"));
    let event_id = events[0]["event_id"].as_str().unwrap();
    let c = json!({
        "event_id": event_id,
        "verdict": "relabel",
        "corrected_label": "zebra",
        "actor": "reviewer",
        "ts": "2024-05-01T00:00:00Z",
    });
    let (st, out) = post(&a, &s.url("/v1/corrections"), &c);
    assert_eq!(st, 201, "{out}");
    let mut bad = c.clone();
    bad["event_id"] = json!("missing");
    assert_eq!(post(&a, &s.url("/v1/corrections"), &bad).0, 400);
    s.kill();

    let out = dir.path().join("train.json");
    ok(&["curation", "export", "--store", store, "--out", out.to_str().unwrap()]);
    let ds: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(ds["annotations"].as_array().unwrap().len(), 1);
    assert_eq!(ds["categories"][0]["name"], "zebra");
}

#[test]
fn cli_eval_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let store = p("store");
    ok(&[
        "fleet", "simulate", "--store", &store, "--cameras", "3", "--images-per-camera", "6",
        "--ground-truth", &p("gt.json"),
    ]);
    ok(&["pipeline", "run", "--store", &store, "--jitter-px", "6", "--seed", "3"]);
    ok(&[
        "pipeline", "export-detections", "--store", &store, "--ground-truth", &p("gt.json"),
        "--out", &p("dets.jsonl"),
    ]);
    let stdout = ok(&[
        "--json", "eval", "run", "--ground-truth", &p("gt.json"), "--detections",
        &p("dets.jsonl"), "--iou", "0.75", "--plot-dir", &p("plots"),
    ]);
    let cli: Value = serde_json::from_str(&stdout).unwrap();
    let lib = evaluate_files(
        Path::new(&p("dets.jsonl")),
        Path::new(&p("gt.json")),
        &EvalConfig::new(0.75, Interpolation::AllPoints).unwrap(),
    )
    .unwrap();
    assert_eq!(cli, serde_json::to_value(&lib).unwrap());
    assert!(std::fs::read_dir(p("plots")).unwrap().count() > 1);

    let table = ok(&["eval", "run", "--ground-truth", &p("gt.json"), "--detections", &p("dets.jsonl"), "--iou", "0.75"]);
    assert_eq!(table, lib.to_table());
}

#[test]
fn remote_detector_backend() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let store = store.to_str().unwrap();
    let dets = dir.path().join("dets.json");
    std::fs::write(
        &dets,
        json!([{ "label": "lion", "confidence": 0.9,
                 "bbox": [10.0, 10.0, 50.0, 40.0] }])
        .to_string(),
    )
    .unwrap();
    let d = Server::start(&["detector", "serve", "--detections", dets.to_str().unwrap()]);
    ok(&["fleet", "simulate", "--store", store, "--cameras", "2", "--images-per-camera", "2"]);
    let out = ok(&["--json", "pipeline", "run", "--store", store, "--backend", &d.base]);
    let summary: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["images_processed"], 4);
    assert_eq!(summary["events_appended"], 4);
    assert_eq!(summary["stats"]["distinct_labels"], 1);

    // A detector claiming another model is a protocol error: dead-lettered, not retried.
    let wrong = Server::start(&["detector", "serve", "--model-id", "other"]);
    let store2 = dir.path().join("store2");
    let store2 = store2.to_str().unwrap();
    ok(&["fleet", "simulate", "--store", store2, "--cameras", "1", "--images-per-camera", "2"]);
    let out = ok(&["--json", "pipeline", "run", "--store", store2, "--backend", &wrong.base]);
    let summary: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["dead_letters"], 2);
    assert_eq!(summary["retries"], 0);

    // Nothing listening: retried, then dead-lettered.
    let gone = wrong.base.clone();
    wrong.kill();
    let store3 = dir.path().join("store3");
    let store3 = store3.to_str().unwrap();
    ok(&["fleet", "simulate", "--store", store3, "--cameras", "1", "--images-per-camera", "1"]);
    let out = ok(&[
        "--json", "pipeline", "run", "--store", store3, "--backend", &gone, "--retry-limit", "2",
    ]);
    let summary: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["dead_letters"], 1);
    assert_eq!(summary["retries"], 2);
}

#[test]
fn augment_writes_variants() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("frame.png");
    let bytes = png(3);
    std::fs::write(&img, &bytes).unwrap();
    let truth = dir.path().join("frame.truth.json");
    std::fs::write(
        &truth,
        json!({ "boxes": [{ "label": "kudu",
            "bbox": [4.0, 4.0, 20.0, 16.0] }] })
        .to_string(),
    )
    .unwrap();
    let out = dir.path().join("out");
    ok(&[
        "curation", "augment", "--image", img.to_str().unwrap(), "--truth",
        truth.to_str().unwrap(), "--rotate", "0", "--rotate", "90", "--translate", "-2,3",
        "--out-dir", out.to_str().unwrap(),
    ]);
    let pngs = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png")
        .count();
    assert_eq!(pngs, 2);
    let rotated = image::open(out.join("frame_f0_r90_dx-2_dy3.png")).unwrap();
    assert_eq!((rotated.width(), rotated.height()), (48, 64));
}

#[test]
fn exit_codes() {
    let usage = wildtrap(&["eval", "run"]);
    assert_eq!(usage.status.code(), Some(2));
    let missing = wildtrap(&[
        "eval", "run", "--ground-truth", "/nonexistent/gt.json", "--detections", "/nonexistent/d",
    ]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error: "));
    let bad_iou = wildtrap(&[
        "eval", "run", "--ground-truth", "a", "--detections", "b", "--iou", "1.5",
    ]);
    assert_eq!(bad_iou.status.code(), Some(1));
    assert_eq!(wildtrap(&["bench", "throughput", "--latency-ms", "0"]).status.code(), Some(1));
}
