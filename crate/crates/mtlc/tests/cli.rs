use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "seed": 5,
  "synth": {"n_rows": 600, "d": 8, "groups": [[0, 1], [2, 3]], "within_group_angle": 0.2,
            "label_rate": 0.4, "noise_sd": 0.3},
  "folds": {"n_folds": 4},
  "grid": {"m_max": 3, "shifts": [0, 1],
    "stl_model": {"r": 6, "learning_rate": 0.01, "epochs": 3, "batch_size": 32},
    "mtl_model": {"r": 6, "learning_rate": 0.01, "epochs": 3, "batch_size": 32}},
  "tag": {"every": 5}
}"#;

fn mtlc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtlc"))
        .args(args)
        .current_dir(dir)
        .env_remove("MTLC_PARALLELISM")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = mtlc(args, dir);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, CONFIG).unwrap();
    (dir, cfg)
}

fn prepare(dir: &Path, out: &str) {
    ok(&["synth", "--config", "cfg.json", "--out", out], dir);
    ok(&["split", "--config", "cfg.json", "--out", out], dir);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let (dir, _) = workspace();
    let d = dir.path();
    fs::write(d.join("bad.json"), r#"{"seed": 1, "folds": {"n_folds": 1}}"#).unwrap();
    assert_eq!(mtlc(&["synth", "--config", "bad.json"], d).status.code(), Some(2));
    fs::write(d.join("broken.json"), "{ not json").unwrap();
    assert_eq!(mtlc(&["synth", "--config", "broken.json"], d).status.code(), Some(2));
    assert_eq!(mtlc(&["report", "--config", "cfg.json", "--out", "nowhere"], d).status.code(), Some(3));
    assert_eq!(mtlc(&["grid", "--config", "cfg.json", "--out", "nowhere"], d).status.code(), Some(3));
    assert_eq!(mtlc(&["synth", "--config", "missing.json"], d).status.code(), Some(3));
}

#[test]
fn grid_output_does_not_depend_on_parallelism() {
    let (dir, _) = workspace();
    let d = dir.path();
    prepare(d, "a");
    prepare(d, "b");
    ok(&["grid", "--config", "cfg.json", "--out", "a", "--parallelism", "1"], d);
    ok(&["grid", "--config", "cfg.json", "--out", "b", "--parallelism", "8"], d);
    for f in ["dataset.csv", "folds.csv", "grid.csv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resumed_grid_matches_an_uninterrupted_one() {
    let (dir, _) = workspace();
    let d = dir.path();
    prepare(d, "full");
    prepare(d, "part");
    ok(&["grid", "--config", "cfg.json", "--out", "full"], d);
    let first = ok(&["grid", "--config", "cfg.json", "--out", "part", "--stop-after", "7"], d);
    assert!(first.contains("stopped early"), "{first}");
    let second = ok(&["grid", "--config", "cfg.json", "--out", "part", "--resume"], d);
    assert!(second.contains("(7 reused)"), "{second}");
    assert_eq!(fs::read(d.join("full/grid.csv")).unwrap(), fs::read(d.join("part/grid.csv")).unwrap());
}

#[test]
fn pipeline_reruns_only_what_is_stale() {
    let (dir, _) = workspace();
    let d = dir.path();
    let first = ok(&["pipeline", "--config", "cfg.json"], d);
    assert!(first.contains("report: ran"), "{first}");
    assert_eq!(ok(&["pipeline", "--config", "cfg.json"], d).trim(), "up to date");

    let fits = d.join("out/fits_auroc.csv");
    let before = fs::read(&fits).unwrap();
    fs::remove_file(&fits).unwrap();
    let again = ok(&["pipeline", "--config", "cfg.json"], d);
    for line in ["synth: up to date", "split: up to date", "grid: up to date", "tag: up to date", "fit: ran", "report: ran"] {
        assert!(again.contains(line), "{again}");
    }
    assert_eq!(fs::read(&fits).unwrap(), before);

    // Refitting from the stored grid reproduces the table byte for byte.
    ok(&["fit", "--config", "cfg.json"], d);
    assert_eq!(fs::read(&fits).unwrap(), before);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("out/manifest.json")).unwrap()).unwrap();
    for stage in ["synth", "split", "grid", "fit", "tag", "report"] {
        assert!(manifest["stages"][stage]["config_hash"].is_string(), "{stage}");
    }
    let reports: Vec<_> = fs::read_dir(d.join("out/reports")).unwrap().collect();
    assert!(reports.len() >= 10);

    let forecast = ok(&["forecast", "--config", "cfg.json"], d);
    assert!(forecast.contains('|'), "{forecast}");
}

#[test]
fn a_changed_config_invalidates_the_grid() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    ok(&["pipeline", "--config", "cfg.json"], d);
    fs::write(&cfg, CONFIG.replace("\"epochs\": 3", "\"epochs\": 2")).unwrap();
    let again = ok(&["pipeline", "--config", "cfg.json"], d);
    assert!(again.contains("grid: ran") && again.contains("report: ran"), "{again}");
    // A report against the old grid is refused.
    let out = mtlc(&["report", "--config", "cfg.json", "--out", "out", "--seed", "6"], d);
    assert!(!out.status.success());
}
