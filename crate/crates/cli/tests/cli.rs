use std::path::Path;
use std::process::{Command, Output};

fn musu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_musu"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_scenes_writes_file_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = musu(&[
        "generate-scenes",
        "--out",
        &out_arg(dir.path()),
        "--set",
        "scenes.num_scenes=3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let set = musu::SceneSet::load(&dir.path().join("scenes.json")).unwrap();
    assert_eq!(set.scenes.len(), 3);
    let resolved = std::fs::read_to_string(dir.path().join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("num_scenes = 3"));
}

#[test]
fn config_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "[scenes]\nnum_scenes = 4\nseed = 11\n[train]\nsteps = 7\n",
    )
    .unwrap();
    let o = musu(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train.steps=9",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 10);
    let ckpt = musu::Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(ckpt.params.len(), 4);
}

#[test]
fn unknown_key_fails_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = musu(&[
        "train",
        "--out",
        &out_arg(dir.path()),
        "--set",
        "train.assign.alhpa=0.1",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("train.assign.alhpa"), "{}", stderr(&o));
    assert!(!dir.path().join("checkpoint.json").exists());
}

#[test]
fn missing_checkpoint_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = musu(&["eval", "--out", &out_arg(dir.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("checkpoint.json"), "{}", stderr(&o));
}

#[test]
fn divergence_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let o = musu(&[
        "train",
        "--out",
        &out_arg(dir.path()),
        "--set",
        "train.learning_rate=1e300",
        "--set",
        "train.steps=100",
        "--set",
        "scenes.num_scenes=2",
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(
        err.contains("non-finite") && err.contains("abort_dump.json"),
        "{err}"
    );
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("abort_dump.json")).unwrap())
            .unwrap();
    assert!(dump["step"].is_u64());
}

#[test]
fn assign_debug_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/three_anchor.json");
    let o = musu(&[
        "assign-debug",
        "--snapshot",
        fixture,
        "--out",
        &out_arg(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("assignment.json")).unwrap())
            .unwrap();
    let records = dump["records"].as_array().unwrap();
    let ranks: Vec<u64> = records
        .iter()
        .map(|r| r["R_cls"].as_u64().unwrap())
        .collect();
    assert_eq!(ranks, vec![0, 2, 1]);
    let tau = 3f64.sqrt();
    for r in records {
        let w = r["w_cls"].as_f64().unwrap();
        let rank = r["R_cls"].as_f64().unwrap();
        assert!((w - (-rank / tau).exp()).abs() < 1e-12);
    }
}

#[test]
fn assign_debug_on_trained_scene() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let common = [
        "--out",
        &out,
        "--set",
        "scenes.num_scenes=2",
        "--set",
        "train.steps=20",
    ];
    assert!(musu(&[&["train"][..], &common].concat()).status.success());
    let o = musu(&[&["assign-debug", "--scene", "1"][..], &common].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = musu(&[&["assign-debug", "--scene", "5"][..], &common].concat());
    assert!(!o.status.success());
}

#[test]
fn small_sweep_writes_consolidated_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = musu(&[
        "sweep",
        "--out",
        &out_arg(dir.path()),
        "--set",
        "sweep.alpha=[0, 1/3]",
        "--set",
        "sweep.hard_targets=[false, true]",
        "--set",
        "scenes.num_scenes=3",
        "--set",
        "train.steps=30",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(dir.path().join("sweep_results.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        [
            "cell",
            "alpha",
            "b",
            "tau_ratio",
            "anchors",
            "hard",
            "ap50",
            "ap_coco",
            "agreement",
            "pearson",
            "status"
        ]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| &r[10] == "ok"));
    for i in 0..4 {
        assert!(dir
            .path()
            .join(format!("cell_{i:03}/eval_report.json"))
            .exists());
        assert!(dir
            .path()
            .join(format!("cell_{i:03}/config.resolved.toml"))
            .exists());
    }
}
