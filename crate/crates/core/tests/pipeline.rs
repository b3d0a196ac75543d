use std::path::Path;

use agmask_core::dataio::{load_manifest, synth_generate, SynthConfig};
use agmask_core::encoder::train::{train_manifest, TrainConfig};
use agmask_core::encoder::DualEncoder;
use agmask_core::pipeline::{caption_set, evaluate_masking, run_batch, BatchItem, PipelineConfig};
use agmask_core::prompting::PromptMode;

fn corpus(dir: &Path) -> (Vec<BatchItem>, DualEncoder) {
    let synth = SynthConfig { count_per_concept: 2, seed: 4, ..SynthConfig::default() };
    synth_generate(&synth, dir).unwrap();
    let manifest = dir.join("manifest.jsonl");
    let cfg = TrainConfig { epochs: 3, batch_size: 8, lr: 1e-2, ..TrainConfig::default() };
    let report = train_manifest(&manifest, &cfg, &dir.join("enc.agmw")).unwrap();
    let items = load_manifest(&manifest)
        .unwrap()
        .into_iter()
        .map(|e| BatchItem { id: e.id, image: e.image_path, caption: e.caption })
        .collect();
    (items, report.encoder)
}

fn config(workers: usize, threshold: f64, gate: bool) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.pipeline.workers = workers;
    cfg.pipeline.threshold = threshold;
    cfg.pipeline.gate = gate;
    cfg
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let (items, enc) = corpus(dir.path());
    for mode in PromptMode::ALL {
        let mut one = config(1, -1.0, true);
        one.pipeline.mode = mode;
        let mut four = one.clone();
        four.pipeline.workers = 4;
        let a = run_batch(&items, &enc, &one, None).unwrap();
        let b = run_batch(&items, &enc, &four, None).unwrap();
        assert_eq!(a.len(), items.len());
        for ((ida, ra), (idb, rb)) in a.iter().zip(&b) {
            assert_eq!(ida, idb);
            assert!(ra.as_ref().unwrap().same_outcome(rb.as_ref().unwrap()));
        }
    }
}

#[test]
fn stage_timings_add_up_to_the_total() {
    let dir = tempfile::tempdir().unwrap();
    let (items, enc) = corpus(dir.path());
    let out = dir.path().join("out");
    for (_, r) in run_batch(&items, &enc, &config(1, -1.0, true), Some(&out)).unwrap() {
        let r = r.unwrap();
        let t = r.timings;
        assert!(t.attention_ms > 0.0 && t.segmentation_ms > 0.0);
        let sum = t.stage_sum();
        assert!((sum - t.total_ms).abs() <= 0.05 * t.total_ms, "{t:?}");
        assert!(r.mask.unwrap().exists());
    }
}

#[test]
fn gate_skips_attention_below_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let (items, enc) = corpus(dir.path());
    for (_, r) in run_batch(&items, &enc, &config(1, 1.0, true), None).unwrap() {
        let r = r.unwrap();
        assert!(!r.present);
        assert!(r.prompts.is_none() && r.mask.is_none());
        assert_eq!(r.timings.attention_ms, 0.0);
    }
    // with the gate off the map is still computed but presence follows the score
    for (_, r) in run_batch(&items, &enc, &config(1, 1.0, false), None).unwrap() {
        let r = r.unwrap();
        assert!(!r.present);
        assert!(r.timings.attention_ms > 0.0);
    }
}

#[test]
fn masking_report_is_independent_of_workers() {
    let dir = tempfile::tempdir().unwrap();
    let (_, enc) = corpus(dir.path());
    let entries = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    let captions = caption_set(&entries);
    let a = evaluate_masking(&entries, &captions, &enc, &config(1, 0.0, false), &PromptMode::ALL).unwrap();
    let b = evaluate_masking(&entries, &captions, &enc, &config(4, 0.0, false), &PromptMode::ALL).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_sample.len(), 3 * entries.len());
}
