mod common;

use std::path::Path;

use serde_json::Value;

use semcom::channel::ChannelConfig;
use semcom::config::RunConfig;
use semcom::pipeline::{
    read_records, run_end_to_end, Aggregate, PipelineError, SceneStatus, REPORT_RECORDS, REPORT_TEXT,
    RUNTIME_FILE,
};

const SCENES: usize = 6;

fn config(out: &Path) -> RunConfig {
    let mut cfg = common::fixture_config(out);
    cfg.eval_scenes = SCENES;
    cfg
}

#[test]
fn ideal_link_delivers_every_map_intact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let report = run_end_to_end(&cfg).unwrap();
    let a = &report.aggregate;
    assert_eq!((a.scenes, a.delivered, a.seg_identical), (SCENES, SCENES, SCENES));
    assert_eq!(a.dropped + a.corrupt + a.failed, 0);
    for r in &report.scenes {
        assert_eq!(r.metrics.len(), 2);
        for m in &r.metrics {
            assert!(m.mse >= 0.0 && m.mse.is_finite());
            assert!(m.psnr > 0.0);
            for v in [m.pixel_accuracy, m.miou, m.classification_accuracy] {
                assert!((0.0..=1.0).contains(&v), "{v}");
            }
        }
    }
    for i in 0..SCENES {
        assert!(dir.path().join(format!("frames/scene_{i}.frame")).is_file());
        assert!(dir.path().join(format!("images/scene_{i}.ppm")).is_file());
        assert!(dir.path().join(format!("images/scene_{i}.pgm")).is_file());
    }
    for f in [REPORT_TEXT, REPORT_RECORDS, RUNTIME_FILE] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert_eq!(read_records(&dir.path().join(REPORT_RECORDS)).unwrap(), report.scenes);
}

#[test]
fn full_erasure_drops_everything() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.channel = ChannelConfig::erasure(1.0, 3).unwrap();
    let report = run_end_to_end(&cfg).unwrap();
    assert_eq!(report.aggregate.dropped, SCENES);
    assert!(report.aggregate.modalities.is_empty());
    for r in &report.scenes {
        assert_eq!(r.status, SceneStatus::Dropped);
        assert!(r.metrics.is_empty());
        assert_eq!(r.seg_identical, None);
    }
}

#[test]
fn bit_errors_surface_as_corrupt_frames() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.channel = ChannelConfig::bit_flip(0.01, 5).unwrap();
    let report = run_end_to_end(&cfg).unwrap();
    let a = &report.aggregate;
    assert!(a.corrupt > 0);
    assert_eq!(a.corrupt + a.delivered, SCENES);
    // Whatever got through was checked, so it is the map that was sent.
    assert_eq!(a.seg_identical, a.delivered);
    for r in report.scenes.iter().filter(|r| r.status == SceneStatus::Corrupt) {
        assert!(r.error.is_some() && r.metrics.is_empty());
    }
}

fn mean_of(rows: &[Value], f: impl Fn(&Value) -> Option<f64>) -> f64 {
    let vals: Vec<f64> = rows.iter().filter_map(f).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// The aggregate in memory agrees with one rebuilt by hand from the raw JSON
/// lines on disk.
#[test]
fn aggregate_matches_recomputation_from_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.channel = ChannelConfig::erasure(0.5, 9).unwrap();
    let report = run_end_to_end(&cfg).unwrap();
    let text = std::fs::read_to_string(dir.path().join(REPORT_RECORDS)).unwrap();
    let rows: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), SCENES);

    let a = &report.aggregate;
    let status = |s: &str| rows.iter().filter(|r| r["status"] == s).count();
    assert_eq!(a.delivered, status("delivered"));
    assert_eq!(a.dropped, status("dropped"));
    assert!(a.delivered > 0 && a.dropped > 0, "erasure draws should give a mix");

    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * y.abs().max(1.0);
    assert!(close(a.mean_compressed_bytes, mean_of(&rows, |r| r["compression"]["compressed_bytes"].as_f64())));
    assert!(close(a.mean_ratio_onehot, mean_of(&rows, |r| r["compression"]["ratio_onehot"].as_f64())));

    for m in &a.modalities {
        let rows_m: Vec<Value> = rows
            .iter()
            .flat_map(|r| r["metrics"].as_array().unwrap().clone())
            .filter(|x| x["modality"] == m.modality.as_str())
            .collect();
        assert_eq!(m.scenes, rows_m.len());
        assert!(close(m.pixel_accuracy, mean_of(&rows_m, |x| x["pixel_accuracy"].as_f64())));
        assert!(close(m.miou, mean_of(&rows_m, |x| x["miou"].as_f64())));
        assert!(close(m.psnr, mean_of(&rows_m, |x| x["psnr"].as_f64())));
    }
    assert_eq!(&Aggregate::from_scenes(&read_records(&dir.path().join(REPORT_RECORDS)).unwrap()), a);
}

#[test]
fn missing_weights_are_reported_as_such() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.weights_dir = dir.path().join("nowhere");
    match run_end_to_end(&cfg) {
        Err(PipelineError::MissingWeights(p)) => assert!(p.starts_with(&cfg.weights_dir)),
        other => panic!("expected missing weights, got {:?}", other.map(|r| r.aggregate)),
    }
}

#[test]
fn single_modality_runs_only_that_decoder() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.eval_scenes = 2;
    cfg.modalities = vec![semcom::autoenc::ModalityId::Ir];
    let report = run_end_to_end(&cfg).unwrap();
    for r in &report.scenes {
        assert_eq!(r.metrics.len(), 1);
        assert_eq!(r.metrics[0].modality, "ir");
    }
    assert!(!dir.path().join("images/scene_0.ppm").exists());
}
