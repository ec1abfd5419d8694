use std::path::Path;
use std::process::{Command, Output};

fn mmequity(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmequity")).args(args).env_remove("MMEQUITY_OUT_DIR").output().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let spec = dir.join("scenario.toml");
    std::fs::write(&spec, "rows = 4\ncols = 4\ndays = 2\n").unwrap();
    let input = dir.join("in");
    let mut args = vec!["synth", "--config", spec.to_str().unwrap(), "--out", input.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = mmequity(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn staged_commands_match_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), &["--seed", "3"]);
    let cfg = tmp.path().join("in/run.toml");
    let full = tmp.path().join("full");
    let staged = tmp.path().join("staged");
    assert_eq!(mmequity(&["run", "--config", s(&cfg), "--out", s(&full)]).status.code(), Some(0));
    for cmd in ["ingest-check", "infer-trips", "metrics", "report"] {
        let out = mmequity(&[cmd, "--config", s(&cfg), "--out", s(&staged)]);
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["report/table1_scooter.csv", "report/tableA2_welch.csv", "metrics/zone_metrics_bike.csv", "trips/scooter_trips.csv"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(staged.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_or_stale_upstream_is_a_validation_failure() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), &[]);
    let cfg = tmp.path().join("in/run.toml");
    let out_dir = tmp.path().join("out");

    let out = mmequity(&["metrics", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));

    let out = mmequity(&["run", "--config", s(&cfg), "--out", s(&out_dir), "--stage", "infer-trips"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(!out_dir.join("metrics").exists());
    std::fs::write(out_dir.join("trips/scooter_trips.csv"), "edited\n").unwrap();
    let out = mmequity(&["metrics", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scooter_trips.csv"));
}

#[test]
fn corrupt_feed_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), &[]);
    let dir = tmp.path().join("in/snapshots/lime");
    let first = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).min().unwrap();
    std::fs::write(&first, "{\"data\": {\"bikes\": [").unwrap();
    let out_dir = tmp.path().join("out");
    let out = mmequity(&["run", "--config", s(&tmp.path().join("in/run.toml")), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out_dir.exists());
}

#[test]
fn missing_zones_is_a_validation_failure() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), &[]);
    std::fs::remove_file(tmp.path().join("in/zones.geojson")).unwrap();
    let out = mmequity(&["run", "--config", s(&tmp.path().join("in/run.toml")), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scooter_only_report_notes_missing_bikeshare() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), &["--mode", "scooter"]);
    let out_dir = tmp.path().join("out");
    let out = mmequity(&["run", "--config", s(&tmp.path().join("in/run.toml")), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out_dir.join("report/table2_bike.csv").exists());
    let report = std::fs::read_to_string(out_dir.join("report/run_report.json")).unwrap();
    assert!(report.contains("bikeshare tables omitted"));
}

#[test]
fn bad_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[kde]\ncell_size_m = 500.0\n").unwrap();
    assert_eq!(mmequity(&["run", "--config", s(&cfg)]).status.code(), Some(2));
}
