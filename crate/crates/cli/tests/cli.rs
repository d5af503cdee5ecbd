use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::Duration;

use diss_core::dataprep::{decode_png, encode_png, load_dataset};
use diss_core::ImageF32;

const SIZE: &str = "16";

fn diss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diss")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
    comb: PathBuf,
    photo: PathBuf,
}

/// A dataset and a briefly trained tiny checkpoint, shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let data = dir.join("data");
        let o = diss(&["gen-data", "--out", s(&data), "--count", "12", "--size", SIZE, "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let ckpt = dir.join("tiny.ckpt");
        let o = diss(&[
            "train", "--data", s(&data), "--stage", "both", "--steps", "6", "--arch", "tiny",
            "--diffusion-steps", "8", "--ckpt-out", s(&ckpt), "--seed", "1",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let ds = load_dataset::<f32>(&data).unwrap();
        let comb = dir.join("comb.png");
        encode_png(&ds.examples[0].comb, &comb).unwrap();
        let photo = dir.join("photo.png");
        encode_png(&ds.examples[1].photo, &photo).unwrap();
        Fixture {
            dir,
            data,
            ckpt,
            comb,
            photo,
        }
    })
}

#[test]
fn gen_data_writes_dataset_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o1 = diss(&["gen-data", "--out", s(&a), "--count", "10", "--size", SIZE, "--seed", "5"]);
    assert_eq!(code(&o1), 0, "{}", stderr(&o1));
    let pngs = walk_pngs(&a);
    assert_eq!(pngs, 30);
    assert!(a.join("manifest.json").exists());
    let o2 = diss(&["gen-data", "--out", s(&b), "--count", "10", "--size", SIZE, "--seed", "5"]);
    assert_eq!(stdout(&o1), stdout(&o2));
    assert_eq!(
        std::fs::read(a.join("manifest.json")).unwrap(),
        std::fs::read(b.join("manifest.json")).unwrap()
    );
    assert!(stderr(&o1).contains("[gen-data]"), "effective config is printed");
}

fn walk_pngs(dir: &Path) -> usize {
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            n += walk_pngs(&p);
        } else if p.extension().is_some_and(|x| x == "png") {
            n += 1;
        }
    }
    n
}

#[test]
fn gen_data_rejects_small_size() {
    let dir = tempfile::tempdir().unwrap();
    let o = diss(&["gen-data", "--out", s(dir.path()), "--count", "2", "--size", "15"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn unknown_flags_and_config_keys_are_rejected() {
    assert_eq!(code(&diss(&["gen-data", "--bogus", "1"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[gen-data]\ncount = 3\nbogus = 1\n").unwrap();
    let o = diss(&["--config", s(&cfg), "gen-data", "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[gen-data]\ncount = 3\nsize = 16\nseed = 8\n").unwrap();
    let out = dir.path().join("d");
    let o = diss(&["--config", s(&cfg), "gen-data", "--out", s(&out), "--count", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(m["count"], 2);
    assert_eq!(m["seed"], 8);
    assert!(stderr(&o).contains("count = 2"));
}

#[test]
fn train_stage_two_needs_checkpoint() {
    let f = fixture();
    let out = f.dir.join("never.ckpt");
    let o = diss(&["train", "--data", s(&f.data), "--stage", "2", "--steps", "2", "--ckpt-out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn training_is_reproducible_and_checkpoints() {
    let f = fixture();
    let run = |name: &str| {
        let ckpt = f.dir.join(format!("{name}.ckpt"));
        let o = diss(&[
            "train", "--data", s(&f.data), "--stage", "1", "--steps", "50", "--arch", "tiny",
            "--diffusion-steps", "8", "--batch-size", "2", "--ckpt-out", s(&ckpt), "--seed", "4",
            "--checkpoint-every", "25",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (
            std::fs::read(&ckpt).unwrap(),
            std::fs::read(ckpt.with_extension("losses.jsonl")).unwrap(),
        )
    };
    let (c1, l1) = run("r1");
    let (c2, l2) = run("r2");
    assert_eq!(l1, l2);
    assert_eq!(c1, c2);
    assert_eq!(String::from_utf8(l1).unwrap().lines().count(), 50);
    assert!(f.dir.join("checkpoints/r1/25.ckpt").exists());
    assert!(f.dir.join("checkpoints/r1/50.ckpt").exists());

    // stage two continues from the stage-one checkpoint
    let s2 = f.dir.join("r1s2.ckpt");
    let o = diss(&[
        "train", "--data", s(&f.data), "--stage", "2", "--steps", "3", "--ckpt-in", s(&f.dir.join("r1.ckpt")),
        "--ckpt-out", s(&s2),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["completed_stage"], 2);
    assert_eq!(summary["step"], 53);
}

#[test]
fn sample_is_deterministic_and_reports_metrics() {
    let f = fixture();
    let a = f.dir.join("sa.png");
    let b = f.dir.join("sb.png");
    let args = |out: &Path| {
        vec![
            "sample".to_string(), "--ckpt".into(), s(&f.ckpt).into(), "--comb".into(), s(&f.comb).into(),
            "--seed".into(), "9".into(), "--out".into(), s(out).into(),
        ]
    };
    let o = Command::new(env!("CARGO_BIN_EXE_diss")).args(args(&a)).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["sketch_consistency"].as_f64().unwrap() >= 0.0);
    assert!(report["stroke_distance"].as_f64().unwrap() >= 0.0);
    assert!(stderr(&o).contains("s-sketch = 2.0"));
    let o = Command::new(env!("CARGO_BIN_EXE_diss")).args(args(&b)).output().unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn full_consistency_regime_reproduces_drawing() {
    let f = fixture();
    let out = f.dir.join("full.png");
    let o = diss(&[
        "sample", "--ckpt", s(&f.ckpt), "--comb", s(&f.comb), "--s-realism", "0", "--divisor", "1",
        "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let got: ImageF32 = decode_png(&out).unwrap();
    let want: ImageF32 = decode_png(&f.comb).unwrap();
    assert!(got.max_abs_diff(&want) <= 1.0 / 127.5 + 1e-6, "{}", got.max_abs_diff(&want));
}

#[test]
fn sample_errors() {
    let f = fixture();
    let out = f.dir.join("x.png");
    let missing = f.dir.join("missing.ckpt");
    let o = diss(&["sample", "--ckpt", s(&missing), "--comb", s(&f.comb), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = diss(&["sample", "--ckpt", s(&f.ckpt), "--comb", s(&f.comb), "--s-realism", "2", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("s_realism"));
}

#[test]
fn cutoff_at_chain_length_is_pure_guided_sampling() {
    let f = fixture();
    let edit = f.dir.join("edit_T.png");
    let fill = f.dir.join("fill_T.png");
    let o = diss(&[
        "edit", "--ckpt", s(&f.ckpt), "--original", s(&f.photo), "--drawing", s(&f.comb), "--refine-cutoff", "8",
        "--out", s(&edit),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = diss(&["fill", "--ckpt", s(&f.ckpt), "--comb", s(&f.comb), "--refine-cutoff", "8", "--out", s(&fill)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(&edit).unwrap(), std::fs::read(&fill).unwrap());

    let o = diss(&["fill", "--ckpt", s(&f.ckpt), "--comb", s(&f.comb), "--refine-cutoff", "9", "--out", s(&fill)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn eval_emits_sweep_and_grid() {
    let f = fixture();
    let run = |name: &str| {
        let out = f.dir.join(name);
        let o = diss(&["eval", "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--seeds", "1", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (
            std::fs::read_to_string(out.join("report.jsonl")).unwrap(),
            std::fs::read_to_string(out.join("grid.json")).unwrap(),
        )
    };
    let (report, grid) = run("eval1");
    let points = report.lines().filter(|l| l.contains("median_stroke")).count();
    assert_eq!(points, 6);
    let cells: Vec<serde_json::Value> = serde_json::from_str(&grid).unwrap();
    assert_eq!(cells.len(), 16);
    assert_eq!(run("eval2"), (report, grid));
}

#[test]
fn serve_rejects_bad_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = diss(&["serve", "--ckpt", s(&dir.path().join("nope.ckpt")), "--data-dir", s(dir.path()), "--port", "0"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn serve_answers_health() {
    let f = fixture();
    let data_dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_diss"))
        .args(["serve", "--ckpt", s(&f.ckpt), "--data-dir", s(data_dir.path()), "--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").unwrap().to_string();
    let client = reqwest::blocking::Client::builder().timeout(Duration::from_secs(10)).build().unwrap();
    let health: serde_json::Value = client.get(format!("{base}/api/health")).send().unwrap().json().unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["model_size"], 16);
    assert_eq!(health["queue_depth"], 0);
}

#[test]
fn train_accepts_schedule_endpoints() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("sched.ckpt");
    let base = [
        "train", "--data", s(&f.data), "--steps", "1", "--arch", "tiny", "--diffusion-steps", "10", "--ckpt-out",
        s(&ckpt),
    ];
    let o = diss(&[&base[..], &["--beta-start", "0.02", "--beta-end", "0.3"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let meta = diss_core::Checkpoint::load(&ckpt).unwrap().meta.schedule;
    assert_eq!((meta.steps, meta.beta_start, meta.beta_end), (10, 0.02, 0.3));
    assert!(stderr(&o).contains("beta-end = 0.3"), "{}", stderr(&o));

    let o = diss(&[&base[..], &["--beta-start", "0.5", "--beta-end", "0.1"]].concat());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
