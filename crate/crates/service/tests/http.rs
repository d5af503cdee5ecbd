use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use reqwest::blocking::Client;
use serde_json::{json, Value};

use diss_core::dataprep::{encode_png_bytes, example_rng, synth_example, TrainingExample};
use diss_core::{ImageF32, ScheduleConfig, UNetConfig, UNetF32};
use diss_service::{Health, Model, Service, ServiceConfig};

const SIZE: usize = 16;

fn model(poison: bool) -> Model {
    let mut net = UNetF32::new(UNetConfig::tiny(SIZE), 7).unwrap();
    if poison {
        for t in net.params_mut().tensors_mut() {
            t.data_mut().fill(f32::NAN);
        }
    }
    Model {
        net,
        schedule: ScheduleConfig::scaled_linear(6).build().unwrap(),
        checkpoint_sha256: "test".into(),
    }
}

struct Server {
    base: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn spawn(svc: Arc<Service>) -> Server {
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            addr_tx.send(listener.local_addr().unwrap()).unwrap();
            diss_service::serve(svc, listener, async {
                let _ = rx.await;
            })
            .await
            .unwrap();
        });
    });
    let addr = addr_rx.recv().unwrap();
    Server {
        base: format!("http://{addr}"),
        stop: Some(tx),
        thread: Some(thread),
    }
}

fn start(poison: bool) -> (tempfile::TempDir, Server) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ServiceConfig::new(dir.path(), None);
    cfg.workers = 1;
    let svc = Service::with_model(&cfg, Some(model(poison)), None).unwrap();
    (dir, spawn(svc))
}

fn example() -> TrainingExample<f32> {
    synth_example(&mut example_rng(5, 0), SIZE).unwrap()
}

fn b64(img: &ImageF32) -> String {
    B64.encode(encode_png_bytes(img).unwrap())
}

fn payload(kind: &str, seed: u64) -> Value {
    let ex = example();
    let mut p = json!({
        "kind": kind,
        "comb_png_b64": b64(&ex.comb),
        "s_sketch": 2.0,
        "s_stroke": 1.5,
        "s_realism": 0.5,
        "seed": seed,
    });
    if kind == "edit" {
        p["original_png_b64"] = json!(b64(&ex.photo));
        p["refine_cutoff_R"] = json!(2);
    }
    p
}

fn submit(c: &Client, s: &Server, body: &Value) -> (u16, Value) {
    let r = c.post(format!("{}/api/jobs", s.base)).json(body).send().unwrap();
    (r.status().as_u16(), r.json().unwrap())
}

fn wait(c: &Client, s: &Server, id: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(120);
    loop {
        let rec: Value = c.get(format!("{}/api/jobs/{id}", s.base)).send().unwrap().json().unwrap();
        if rec["status"] == "done" || rec["status"] == "failed" {
            return rec;
        }
        assert!(Instant::now() < deadline, "job {id} did not finish");
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn fetch(c: &Client, s: &Server, reference: &str) -> (u16, Vec<u8>) {
    let r = c.get(format!("{}/api/images/{reference}", s.base)).send().unwrap();
    (r.status().as_u16(), r.bytes().unwrap().to_vec())
}

#[test]
fn generate_is_deterministic_and_served() {
    let (_dir, s) = start(false);
    let c = Client::new();
    let health: Health = c.get(format!("{}/api/health", s.base)).send().unwrap().json().unwrap();
    assert_eq!(health.status, "ok");
    assert_eq!(health.queue_depth, 0);
    assert_eq!(health.model_size, Some(SIZE));

    let (code, a) = submit(&c, &s, &payload("generate", 11));
    assert_eq!(code, 202);
    assert_eq!(a["status"], "queued");
    let (_, b) = submit(&c, &s, &payload("generate", 11));
    let (_, other) = submit(&c, &s, &payload("generate", 12));
    let ids: Vec<String> = [a, b, other].iter().map(|v| v["id"].as_str().unwrap().to_string()).collect();
    let mut images = Vec::new();
    for id in &ids {
        let rec = wait(&c, &s, id);
        assert_eq!(rec["status"], "done", "{rec}");
        let (code, bytes) = fetch(&c, &s, rec["output"].as_str().unwrap());
        assert_eq!(code, 200);
        assert_eq!(&bytes[1..4], b"PNG");
        images.push(bytes);
    }
    assert_eq!(images[0], images[1]);
    assert_ne!(images[0], images[2]);
    assert_eq!(fetch(&c, &s, &ids[0]).1, images[0]);

    let health: Health = c.get(format!("{}/api/health", s.base)).send().unwrap().json().unwrap();
    assert_eq!(health.submitted, 3);
    assert_eq!(health.completed, 3);
}

#[test]
fn edit_and_fill_jobs_complete() {
    let (_dir, s) = start(false);
    let c = Client::new();
    for kind in ["edit", "fill"] {
        let (code, v) = submit(&c, &s, &payload(kind, 1));
        assert_eq!(code, 202, "{v}");
        let rec = wait(&c, &s, v["id"].as_str().unwrap());
        assert_eq!(rec["status"], "done", "{rec}");
        assert_eq!(rec["kind"], kind);
    }
}

#[test]
fn validation_errors_name_the_field() {
    let (_dir, s) = start(false);
    let c = Client::new();
    let mut p = payload("generate", 0);
    p["s_realism"] = json!(1.5);
    let (code, v) = submit(&c, &s, &p);
    assert_eq!(code, 400);
    assert_eq!(v["field"], "s_realism");

    let mut p = payload("generate", 0);
    p["comb_png_b64"] = json!(b64(&ImageF32::filled(3, 4 * SIZE, 4 * SIZE, 1.0)));
    let (code, v) = submit(&c, &s, &p);
    assert_eq!(code, 400);
    assert!(v["message"].as_str().unwrap().contains("image size"), "{v}");

    let mut p = payload("generate", 0);
    p["kind"] = json!("paint");
    assert_eq!(submit(&c, &s, &p).1["field"], "kind");

    let health: Health = c.get(format!("{}/api/health", s.base)).send().unwrap().json().unwrap();
    assert_eq!(health.submitted, 0);
}

#[test]
fn unknown_ids_are_not_found() {
    let (_dir, s) = start(false);
    let c = Client::new();
    let r = c.get(format!("{}/api/jobs/nope", s.base)).send().unwrap();
    assert_eq!(r.status().as_u16(), 404);
    assert_eq!(fetch(&c, &s, "nope").0, 404);
}

#[test]
fn diverging_model_marks_job_failed() {
    let (_dir, s) = start(true);
    let c = Client::new();
    let (_, v) = submit(&c, &s, &payload("generate", 0));
    let id = v["id"].as_str().unwrap();
    let rec = wait(&c, &s, id);
    assert_eq!(rec["status"], "failed");
    assert!(rec["error"].as_str().unwrap().contains("divergence"), "{rec}");
    assert_eq!(fetch(&c, &s, id).0, 404);
}

#[test]
fn missing_checkpoint_degrades() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig::new(dir.path(), Some(dir.path().join("absent.ckpt")));
    let svc = Service::start(&cfg).unwrap();
    assert!(Service::start_strict(&cfg).is_err());
    let s = spawn(svc);
    let c = Client::new();
    let health: Health = c.get(format!("{}/api/health", s.base)).send().unwrap().json().unwrap();
    assert_eq!(health.status, "degraded");
    assert_eq!(health.workers, 0);
    let (code, v) = submit(&c, &s, &payload("generate", 0));
    assert_eq!(code, 503, "{v}");
}
