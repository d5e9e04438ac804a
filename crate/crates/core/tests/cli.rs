use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nmp_core::fusion::Checkpoint;

fn nmp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmp"))
        .args(args)
        .current_dir(dir)
        .env_remove("NMP_ADDR")
        .output()
        .unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn simulate_baseline_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("default.cfg"), "city.seed = 7\ntrips.count = 1\n").unwrap();
    let out = nmp(
        &["simulate", "--config", "default.cfg", "--strategy", "none", "--out", "report.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["fusion.strategy"], "none");
    assert_eq!(report["config"]["trips.count"], 1);
    assert_eq!(report["report"]["completed"], true);
    let trip = &report["report"]["trips"][0];
    assert!(trip["iou"]["mean"].as_f64().unwrap() > 0.0);
    assert!(trip["gate"].is_null());
}

#[test]
fn gradcheck_reports_error_below_limit() {
    let dir = tempfile::tempdir().unwrap();
    let out = nmp(&["gradcheck"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let err = json(&out)["max_rel_err"].as_f64().unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn bench_memory_on_default_city() {
    let dir = tempfile::tempdir().unwrap();
    let out = nmp(&["bench-memory", "--city-seed", "7"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let ratio = json(&out)["memory"]["ratio"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio <= 0.35, "{ratio}");
}

#[test]
fn train_gru_writes_checkpoint_and_loss_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = nmp(&["train-gru", "--steps", "3", "--out", "w.nmpw", "--loss-csv", "loss.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ck = Checkpoint::load(&dir.path().join("w.nmpw")).unwrap();
    assert_eq!(ck.get("sim.embedding").unwrap().data.len(), 8 * 4);
    let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("step,mse\n0,"));

    let sim = nmp(
        &["simulate", "--strategy", "gru", "--weights", "w.nmpw", "--trips", "1", "--out", "r.json"],
        dir.path(),
    );
    assert_eq!(sim.status.code(), Some(0), "{}", String::from_utf8_lossy(&sim.stderr));
}

#[test]
fn tiles_on_disk_can_be_inspected() {
    let dir = tempfile::tempdir().unwrap();
    let out = nmp(
        &["simulate", "--strategy", "ma", "--trips", "1", "--store-dir", "tiles", "--out", "r.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let tile = fs::read_dir(dir.path().join("tiles")).unwrap().next().unwrap().unwrap().path();
    let out = nmp(&["inspect-tile", tile.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let header = json(&out);
    assert_eq!(header["edge"], 64);
    assert!(header["version"].as_u64().unwrap() >= 1);

    let mut bytes = fs::read(&tile).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(&tile, bytes).unwrap();
    assert_eq!(nmp(&["inspect-tile", tile.to_str().unwrap()], dir.path()).status.code(), Some(2));
}

#[test]
fn render_writes_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let png = |sub: &str, name: &str| fs::read(dir.path().join(sub).join(name)).ok();
    let out = nmp(&["render", "--strategy", "ma", "--trips", "1", "--out-dir", "ma"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    for name in ["city.png", "prediction.png", "ground_truth.png"] {
        assert_eq!(&png("ma", name).unwrap()[1..4], b"PNG", "{name}");
    }
    assert!(png("ma", "gate.png").is_none(), "moving average has no gate");

    let args = ["render", "--strategy", "gru", "--set", "train.steps=2", "--trips", "1", "--out-dir", "gru"];
    assert_eq!(nmp(&args, dir.path()).status.code(), Some(0));
    assert_eq!(&png("gru", "gate.png").unwrap()[1..4], b"PNG");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(nmp(&["simulate", "--no-such-flag"], dir.path()).status.code(), Some(1));
    assert_eq!(nmp(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(nmp(&["gen-city", "--help"], dir.path()).status.code(), Some(0));
    fs::write(dir.path().join("bad.cfg"), "city.sed = 1\n").unwrap();
    let out = nmp(&["gen-city", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("city.sed"));
    assert_eq!(nmp(&["simulate", "--condition", "fog"], dir.path()).status.code(), Some(2));
    assert_eq!(nmp(&["gen-city", "--seed", "3"], dir.path()).status.code(), Some(0));
}

#[test]
fn simulate_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| ["simulate", "--seed", "3", "--strategy", "gru_ca", "--set", "train.steps=5", "--out", out];
    assert_eq!(nmp(&args("a.json"), dir.path()).status.code(), Some(0));
    assert_eq!(nmp(&args("b.json"), dir.path()).status.code(), Some(0));
    assert_eq!(fs::read(dir.path().join("a.json")).unwrap(), fs::read(dir.path().join("b.json")).unwrap());
}
