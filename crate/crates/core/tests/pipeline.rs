use std::path::Path;

use mobiseq::ingest::CategoryCatalog;
use mobiseq::pipeline::{run_pipeline, sha256_file, PipelineConfig, Stage};
use mobiseq::simgen::{generate_log, GenConfig};
use mobiseq::{Error, EXIT_DATA, EXIT_USAGE};

fn simulate(dir: &Path, n_users: usize) {
    let cfg = GenConfig { n_users, n_days: 5, ..GenConfig::acceptance(21) };
    let g = generate_log(&cfg, &CategoryCatalog::default()).unwrap();
    std::fs::create_dir_all(dir).unwrap();
    g.log.write_csv(std::fs::File::create(dir.join("events.csv")).unwrap()).unwrap();
    g.profiles.write_csv(std::fs::File::create(dir.join("profiles.csv")).unwrap()).unwrap();
}

fn config(input: &Path, out: &Path) -> PipelineConfig {
    PipelineConfig {
        events: Some(input.join("events.csv")),
        profiles: Some(input.join("profiles.csv")),
        out: out.to_path_buf(),
        ..PipelineConfig::default()
    }
}

const ARTIFACTS: &[&str] = &[
    "ingest/events.csv",
    "ingest/categories.txt",
    "ingest/profiles.csv",
    "ingest/validation.json",
    "sessionize/sessions.csv",
    "sessionize/thresholds.csv",
    "describe/describe.json",
    "describe/transitions.csv",
    "dist/sequences.json",
    "cluster/clusters.json",
    "patterns/catalog.csv",
    "patterns/catalog.json",
    "patterns/patterns.svg",
    "patterns/subgroups.json",
    "trajectories/trajectories.csv",
    "reengage/reengagement.csv",
    "reengage/summary.json",
    "lmm/fit.json",
    "lmm/marginal_means.csv",
];

#[test]
fn full_run_writes_every_artifact_and_a_complete_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    simulate(&input, 25);
    let out = tmp.path().join("out");
    let m = run_pipeline(&config(&input, &out), None, None).unwrap();
    assert!(m.completed);
    assert_eq!(m.failed_stage, None);
    assert_eq!(m.stages.iter().map(|s| s.stage).collect::<Vec<_>>(), Stage::ALL.to_vec());
    for a in ARTIFACTS {
        assert!(out.join(a).is_file(), "missing {a}");
        let rec = m.stages.iter().find(|s| a.starts_with(s.stage.name())).unwrap();
        assert_eq!(rec.files[*a], sha256_file(&out.join(a)).unwrap(), "{a}");
    }
    assert!(out.join("run_manifest.json").is_file());
    assert!(std::fs::read_dir(out.join("dist")).unwrap().count() > 2);
}

#[test]
fn rerun_reproduces_checksums_and_resume_detects_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    simulate(&input, 12);
    let out = tmp.path().join("out");
    let cfg = config(&input, &out);
    let first = run_pipeline(&cfg, None, None).unwrap();
    let second = run_pipeline(&cfg, None, None).unwrap();
    assert_eq!(first.stages, second.stages);
    assert_eq!(first.config_hash, second.config_hash);

    let resumed = run_pipeline(&cfg, Some(Stage::Cluster), None).unwrap();
    assert_eq!(resumed.stages, first.stages);

    let victim = out.join("dist/m00000.csv");
    std::fs::write(&victim, "0,not-a-number\n").unwrap();
    let err = run_pipeline(&cfg, Some(Stage::Cluster), None).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Stage { stage: "cluster", .. }), "{msg}");
    assert!(msg.contains("cluster") && msg.contains("m00000.csv"), "{msg}");
    assert_eq!(err.exit_code(), EXIT_DATA);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["failed_stage"], "cluster");
    assert_eq!(manifest["completed"], false);
}

#[test]
fn partial_range_and_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    simulate(&input, 5);
    let out = tmp.path().join("out");
    let cfg = config(&input, &out);
    let m = run_pipeline(&cfg, None, Some(Stage::Describe)).unwrap();
    assert_eq!(m.stages.len(), 3);
    assert!(!out.join("dist").exists());

    let err = run_pipeline(&cfg, Some(Stage::Lmm), Some(Stage::Ingest)).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_USAGE);
    let bad = PipelineConfig { slot_secs: 7, ..cfg.clone() };
    assert_eq!(run_pipeline(&bad, None, None).unwrap_err().exit_code(), EXIT_USAGE);
    let missing = PipelineConfig { events: Some(tmp.path().join("nope.csv")), ..cfg };
    assert_eq!(run_pipeline(&missing, None, None).unwrap_err().exit_code(), EXIT_DATA);
}

#[test]
fn config_text_round_trip() {
    let mut cfg = PipelineConfig::default();
    cfg.apply_text("kmax = 6\nsplit = 90\n# comment\nseed = 7\n").unwrap();
    assert_eq!(cfg.kmax, 6);
    let back = PipelineConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(back.hash(), cfg.hash());
    assert!(cfg.apply_text("nonsense = 1").is_err());
}
