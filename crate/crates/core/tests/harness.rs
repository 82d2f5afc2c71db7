use std::fs;
use std::path::Path;

use ssmavs::harness::{
    self, bench_scan, dataset_dump, eval_checkpoint, fit_slope, layout_dump, train, validate_formats, BenchConfig,
    LayoutDumpOptions, RunConfig, CHECKPOINT_DIR, METRICS_JSON, METRICS_LOG, RUN_CONFIG_FILE,
};
use ssmavs::layout::{AudioAttach, Extent, LayoutKind};
use ssmavs::model::{binary_metrics, MetricOptions, ModelConfig, Task};
use ssmavs::tensor::io;
use ssmavs::Tensor;

fn run_config(out: &Path, steps: usize) -> RunConfig {
    let model = ModelConfig {
        channels: 8,
        state: 4,
        encoder_layers: 1,
        decoder_layers: 1,
        direction_count: 2,
        t_max: 3,
        ..ModelConfig::default()
    };
    RunConfig {
        frames: 2,
        eval_every: 2,
        eval_clips: 2,
        ..RunConfig::new(model, Task::S4, 7, steps, out)
    }
}

#[test]
fn training_outputs_are_well_formed_and_reloadable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_config(dir.path(), 3);
    let summary = train(&cfg).unwrap();
    for f in [RUN_CONFIG_FILE, METRICS_LOG, METRICS_JSON, CHECKPOINT_DIR] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(dir.path().join(METRICS_LOG)).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,M_J,M_F"));
    let resolved = RunConfig::load(dir.path().join(RUN_CONFIG_FILE)).unwrap();
    assert_eq!(resolved.model_config().unwrap(), cfg.model_config().unwrap());

    let again = eval_checkpoint(&summary.checkpoint, Task::S4, 7, 2, 2, MetricOptions::default()).unwrap();
    assert_eq!(again.m_j.to_bits(), summary.metrics.m_j.to_bits());
    assert!(eval_checkpoint(&summary.checkpoint, Task::Semantic, 7, 2, 2, MetricOptions::default()).is_err());

    let feats = dir.path().join("features");
    let dump = harness::dump_features(dir.path(), Task::S4, 7, 0, 2, &feats).unwrap();
    assert!(dump.files.iter().any(|f| f.extension().is_some_and(|e| e == "ppm")));

    let report = validate_formats(dir.path()).unwrap();
    assert!(report.ok(), "{:?}", report.failures);
    assert!(report.checked.len() >= 6);
}

#[test]
fn output_directories_are_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let _held = harness::OutputLock::acquire(dir.path()).unwrap();
    assert!(train(&run_config(dir.path(), 1)).is_err());
}

#[test]
fn validation_catches_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.csv"), "a,b\n1\n").unwrap();
    fs::write(dir.path().join("bad.json"), "{").unwrap();
    let mut bytes = io::encode(&Tensor::<f32>::ones([3]));
    bytes.pop();
    fs::write(dir.path().join(format!("bad.{}", io::EXTENSION)), bytes).unwrap();
    let report = validate_formats(dir.path()).unwrap();
    assert_eq!(report.failures.len(), 3);
}

#[test]
fn layout_dump_lists_every_slot() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("layout.csv");
    let opts = LayoutDumpOptions {
        extents: vec![Extent::new(2, 3), Extent::new(1, 2)],
        frames: 2,
        kind: LayoutKind::Spatiotemporal,
        directions: 4,
        attach: AudioAttach::Append,
    };
    let layout = layout_dump(&opts, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("direction,sequence,position,scale,t,y,x,audio_slot"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4 * (2 * 8 + 2));
    assert_eq!(rows.len(), layout.seqs() * layout.len());
    let audio = rows.iter().filter(|r| !r[7].is_empty()).count();
    assert_eq!(audio, 4 * 2);
    assert!(validate_formats(dir.path()).unwrap().ok());
}

#[test]
fn dataset_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset_dump(Task::Ms3, 3, 4, 2, dir.path()).unwrap();
    assert_eq!(manifest.samples.len(), 4);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(json["T"], 2);
    for (e, s) in manifest
        .samples
        .iter()
        .zip(ssmavs::data::generate(3, Task::Ms3, 4, 2).unwrap())
    {
        let v: Tensor<f32> = io::load(dir.path().join(&e.video)).unwrap();
        let m: Tensor<f32> = io::load(dir.path().join(&e.masks)).unwrap();
        assert!(v.bit_eq(&s.video) && m.bit_eq(&s.masks));
    }
}

#[test]
fn slope_fit_recovers_power_laws() {
    let pts: Vec<(f64, f64)> = [64.0, 128.0, 256.0, 512.0]
        .iter()
        .map(|&x: &f64| (x, 3.0 * x.powf(1.5)))
        .collect();
    assert!((fit_slope(&pts) - 1.5).abs() < 1e-12);
}

#[test]
fn bench_writes_rows_for_both_kernels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BenchConfig {
        lengths: vec![64, 256],
        repetitions: 1,
        channels: 4,
        state: 4,
    };
    let summary = bench_scan(&cfg, 1, Some(dir.path())).unwrap();
    assert_eq!(summary.rows.len(), 4);
    assert!(summary.max_rel_dev < 1e-5);
    assert!(validate_formats(dir.path()).unwrap().ok());
}

#[test]
fn all_background_prediction_scores_only_silent_frames() {
    let (t, n) = (4, 8);
    let masks = Tensor::<f32>::from_fn([t, n, n], |i| if i / (n * n) % 2 == 0 && i % n < 3 { 1.0 } else { 0.0 });
    let logits = Tensor::<f32>::full([t, n, n, 1], -5.0);
    let counts = binary_metrics(&logits, &masks, &[1.0, 1.0, 1.0, 0.0]).unwrap();
    let m = counts.metrics(MetricOptions::default());
    assert_eq!(m.frames, 3);
    assert!((m.m_j - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(m.m_f, 0.0);
    assert_eq!(m.silent_empty_rate, Some(1.0));
}
