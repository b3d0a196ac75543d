//! Generates the synthetic corpus, trains the toy encoder and reports masking quality.
//!
//! `cargo run --example synthetic_demo -- <config.toml> [out_dir]`

use std::path::PathBuf;
use std::time::Instant;

use agmask_core::dataio::{load_manifest, synth_generate, Split};
use agmask_core::encoder::train::train_manifest;
use agmask_core::pipeline::{caption_set, evaluate_masking, ConfigFile};
use agmask_core::prompting::PromptMode;

fn main() -> agmask_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let config = args
        .first()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../cli/config/synthetic.toml")));
    let out = PathBuf::from(args.get(1).cloned().unwrap_or_else(|| "synthetic-demo".into()));
    let file = ConfigFile::load(&config)?;
    let start = Instant::now();

    synth_generate(&file.synth, &out)?;
    let manifest = out.join("manifest.jsonl");
    let report = train_manifest(&manifest, &file.train, &out.join("encoder.agmw"))?;
    println!(
        "loss {:.4} -> {:.4} in {:.1}s",
        report.epoch_losses[0],
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        start.elapsed().as_secs_f64()
    );

    let entries = load_manifest(&manifest)?;
    let captions = caption_set(&entries);
    let eval: Vec<_> = entries.into_iter().filter(|e| e.split == Split::Eval).collect();
    let masking = evaluate_masking(&eval, &captions, &report.encoder, &file.pipeline_config(), &PromptMode::ALL)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "eval_images": eval.len(),
            "accuracy": masking.accuracy,
            "mean_iou_by_kind": masking.mean_iou_by_kind,
            "threshold": masking.threshold_report.threshold,
            "f1": masking.threshold_report.f1,
        }))?
    );
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
