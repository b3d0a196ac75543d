//! `agmask`: command-line front end.
//!
//! Machine output goes to stdout as one JSON document; logs go to stderr.
//! Exit codes: 0 success, 1 usage or configuration error, 2 object absent
//! (`run` on a single image), 3 runtime failure.

use std::fs;
use std::io::{stdin, stdout, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agmask_core::adapter::stub::{serve, StubMode};
use agmask_core::dataio::pnm::{load_mask, load_ppm, save_mask, save_pgm};
use agmask_core::dataio::synth::ShapeKind;
use agmask_core::dataio::{load_manifest, synth_generate, ManifestEntry, Split};
use agmask_core::encoder::train::train_manifest;
use agmask_core::encoder::DualEncoder;
use agmask_core::evaluation::{iou, optimal_threshold, round6, ScoredSample};
use agmask_core::gradcam::attention_for;
use agmask_core::pipeline::{
    caption_set, evaluate_masking, run_batch, run_pipeline, score_entries, BatchItem, ConfigFile, PipelineConfig,
};
use agmask_core::prompting::{prompts_for, Connectivity, PromptJson, PromptMode, PromptSet};
use agmask_core::segmenter::{Backend, Segmenter};
use agmask_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "agmask", version, about = "Attention-guided object masking", arg_required_else_help = true)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Overrides for configuration keys.
#[derive(Args, Default)]
struct Overrides {
    /// [pipeline] checkpoint
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// [pipeline] threshold
    #[arg(long, global = true, allow_negative_numbers = true)]
    threshold: Option<f64>,
    /// [pipeline] gate
    #[arg(long, global = true)]
    gate: Option<bool>,
    /// [pipeline] mode
    #[arg(long, global = true)]
    mode: Option<PromptMode>,
    /// [pipeline] workers
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Seed of the section the command uses ([synth], [train] or [pipeline]).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// [prompting] activation_fraction
    #[arg(long, global = true)]
    activation_fraction: Option<f64>,
    /// [prompting] connectivity (4 or 8)
    #[arg(long, global = true)]
    connectivity: Option<u8>,
    /// [prompting] sample_count
    #[arg(long, global = true)]
    sample_count: Option<usize>,
    /// [prompting] sample_radius
    #[arg(long, global = true)]
    sample_radius: Option<usize>,
    /// [segmenter] backend
    #[arg(long, global = true)]
    backend: Option<Backend>,
    /// [segmenter] color_tolerance
    #[arg(long, global = true)]
    color_tolerance: Option<f64>,
    /// [segmenter] command, split on whitespace
    #[arg(long, global = true)]
    adapter_command: Option<String>,
    /// [segmenter] timeout_ms
    #[arg(long, global = true)]
    timeout_ms: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    All,
}

impl SplitArg {
    fn keep(&self, split: Split) -> bool {
        match self {
            SplitArg::Train => split == Split::Train,
            SplitArg::Eval => split == Split::Eval,
            SplitArg::All => true,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count_per_concept: Option<usize>,
        /// Image side length.
        #[arg(long)]
        size: Option<usize>,
        /// Comma-separated shapes.
        #[arg(long, value_delimiter = ',')]
        shapes: Option<Vec<String>>,
        #[arg(long)]
        distractors: Option<usize>,
        #[arg(long)]
        noise: Option<u8>,
    },
    /// Train the dual encoder on a manifest's train split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Similarity of one image and caption.
    Score {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        caption: String,
    },
    /// Write the attention map as an 8-bit PGM.
    Attend {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the prompts derived from the attention map.
    Prompt {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        caption: String,
        /// Sample id for seeding; defaults to the image file stem.
        #[arg(long)]
        id: Option<String>,
    },
    /// Segment an image from explicit prompts.
    Mask {
        #[arg(long)]
        image: PathBuf,
        /// Prompt JSON, or @FILE.
        #[arg(long)]
        prompts: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline on one image, or on every entry of a manifest.
    Run {
        #[arg(long, required_unless_present = "manifest", requires = "caption")]
        image: Option<PathBuf>,
        #[arg(long)]
        caption: Option<String>,
        #[arg(long)]
        id: Option<String>,
        #[arg(long, conflicts_with = "image")]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        /// Directory for mask PGMs.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// IoU of two masks, or the masking report over a manifest.
    EvalIou {
        #[arg(long, requires = "truth", required_unless_present = "manifest")]
        pred: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, conflicts_with = "pred")]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        /// Comma-separated prompt modes.
        #[arg(long, value_delimiter = ',', default_value = "single,multi,box")]
        modes: Vec<PromptMode>,
    },
    /// F1-optimal similarity threshold from scored samples.
    EvalThreshold {
        /// JSON array or JSON lines of {id, score, correct}.
        #[arg(long)]
        samples: PathBuf,
    },
    /// Top-1 and top-5 caption accuracy over a manifest.
    EvalAccuracy {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        /// Also write the scored samples as JSON lines.
        #[arg(long)]
        samples_out: Option<PathBuf>,
    },
    /// Serve the adapter protocol with a stub segmenter.
    #[command(hide = true)]
    StubAdapter {
        /// ones, wrong-dims or delay
        #[arg(long, default_value = "ones")]
        stub_mode: String,
        #[arg(long, default_value_t = 1000)]
        delay_ms: u64,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

type CliResult<T> = Result<T, Failure>;

const EXIT_ABSENT: u8 = 2;

fn emit(value: &impl serde::Serialize) -> CliResult<()> {
    let mut out = stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_config(cli: &Cli) -> CliResult<ConfigFile> {
    let mut file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let o = &cli.overrides;
    let p = &mut file.pipeline;
    if let Some(v) = &o.checkpoint {
        p.checkpoint = Some(v.clone());
    }
    if let Some(v) = o.threshold {
        p.threshold = v;
    }
    if let Some(v) = o.gate {
        p.gate = v;
    }
    if let Some(v) = o.mode {
        p.mode = v;
    }
    if let Some(v) = o.workers {
        p.workers = v;
    }
    if let Some(v) = o.seed {
        match cli.command {
            Command::Synth { .. } => file.synth.seed = v,
            Command::Train { .. } => file.train.seed = v,
            _ => file.pipeline.seed = v,
        }
    }
    let pr = &mut file.prompting;
    if let Some(v) = o.activation_fraction {
        pr.activation_fraction = v;
    }
    if let Some(v) = o.connectivity {
        pr.connectivity = Connectivity::try_from(v).map_err(Failure::Usage)?;
    }
    if let Some(v) = o.sample_count {
        pr.sample_count = v;
    }
    if let Some(v) = o.sample_radius {
        pr.sample_radius = Some(v);
    }
    let s = &mut file.segmenter;
    if let Some(v) = o.backend {
        s.backend = v;
    }
    if let Some(v) = o.color_tolerance {
        s.color_tolerance = v;
    }
    if let Some(v) = &o.adapter_command {
        s.command = v.split_whitespace().map(str::to_string).collect();
    }
    if let Some(v) = o.timeout_ms {
        s.timeout_ms = v;
    }
    file.pipeline_config().validate()?;
    Ok(file)
}

fn load_encoder(cfg: &PipelineConfig) -> CliResult<DualEncoder> {
    let path = cfg.checkpoint()?;
    log::info!("loading checkpoint {}", path.display());
    Ok(DualEncoder::load(path)?)
}

fn stem_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn manifest_subset(path: &Path, split: SplitArg) -> CliResult<(Vec<ManifestEntry>, Vec<String>)> {
    let entries = load_manifest(path)?;
    let captions = caption_set(&entries);
    let subset: Vec<ManifestEntry> = entries.into_iter().filter(|e| split.keep(e.split)).collect();
    Ok((subset, captions))
}

fn read_samples(path: &Path) -> CliResult<Vec<ScoredSample>> {
    let text = fs::read_to_string(path)?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(&text)?);
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Failure::from))
        .collect()
}

fn read_prompts(arg: &str) -> CliResult<PromptSet> {
    let text = match arg.strip_prefix('@') {
        Some(path) => fs::read_to_string(path)?,
        None => arg.to_string(),
    };
    let json: PromptJson = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("prompts: {e}")))?;
    Ok(PromptSet::from_json(&json)?)
}

fn dispatch(cli: &Cli) -> CliResult<u8> {
    if let Command::StubAdapter { stub_mode, delay_ms } = &cli.command {
        let mode = StubMode::parse(stub_mode, *delay_ms)?;
        serve(stdin().lock(), stdout().lock(), mode)?;
        return Ok(0);
    }
    let file = load_config(cli)?;
    let cfg = file.pipeline_config();

    match &cli.command {
        Command::Synth { out, count_per_concept, size, shapes, distractors, noise } => {
            let mut synth = file.synth.clone();
            if let Some(v) = count_per_concept {
                synth.count_per_concept = *v;
            }
            if let Some(v) = size {
                synth.width = *v;
                synth.height = *v;
            }
            if let Some(names) = shapes {
                synth.shapes = names
                    .iter()
                    .map(|n| ShapeKind::parse(n).ok_or_else(|| Failure::Usage(format!("unknown shape `{n}`"))))
                    .collect::<CliResult<_>>()?;
            }
            if let Some(v) = distractors {
                synth.distractors = *v;
            }
            if let Some(v) = noise {
                synth.noise = *v;
            }
            let records = synth_generate(&synth, out)?;
            emit(&json!({ "manifest": out.join("manifest.jsonl"), "count": records.len() }))?;
        }
        Command::Train { manifest, out, epochs, lr, batch_size, weight_decay, temperature } => {
            let mut train = file.train.clone();
            if let Some(v) = epochs {
                train.epochs = *v;
            }
            if let Some(v) = lr {
                train.lr = *v;
            }
            if let Some(v) = batch_size {
                train.batch_size = *v;
            }
            if let Some(v) = weight_decay {
                train.weight_decay = *v;
            }
            if let Some(v) = temperature {
                train.temperature = *v;
            }
            let report = train_manifest(manifest, &train, out)?;
            let losses: Vec<f64> = report.epoch_losses.iter().map(|&l| round6(l)).collect();
            emit(&json!({ "checkpoint": out, "epoch_losses": losses }))?;
        }
        Command::Score { image, caption } => {
            let encoder = load_encoder(&cfg)?;
            let s = encoder.score(&load_ppm(image)?, caption)?.value();
            emit(&json!({
                "caption": caption,
                "similarity": s,
                "threshold": cfg.pipeline.threshold,
                "present": s >= cfg.pipeline.threshold,
            }))?;
        }
        Command::Attend { image, caption, out } => {
            let encoder = load_encoder(&cfg)?;
            let map = attention_for(&load_ppm(image)?, caption, &encoder)?;
            save_pgm(map.width(), map.height(), &map.to_gray(), out)?;
            emit(&json!({
                "output": out,
                "peak": [map.peak.1, map.peak.0],
                "empty": map.empty,
            }))?;
        }
        Command::Prompt { image, caption, id } => {
            let encoder = load_encoder(&cfg)?;
            let id = id.clone().unwrap_or_else(|| stem_id(image));
            let map = attention_for(&load_ppm(image)?, caption, &encoder)?;
            let prompts = prompts_for(&map, cfg.pipeline.mode, &cfg.prompt_config_for(&id))?;
            emit(&prompts.to_json())?;
        }
        Command::Mask { image, prompts, out } => {
            let image = load_ppm(image)?;
            let prompts = read_prompts(prompts)?;
            let mask = Segmenter::new(&cfg.segmenter)?.segment(&image, &prompts)?;
            save_mask(&mask, out)?;
            emit(&json!({ "output": out, "area": mask.count() }))?;
        }
        Command::Run { image, caption, id, manifest, split, out_dir } => {
            let encoder = load_encoder(&cfg)?;
            if let Some(manifest) = manifest {
                let (entries, _) = manifest_subset(manifest, *split)?;
                let items: Vec<BatchItem> = entries
                    .iter()
                    .map(|e| BatchItem { id: e.id.clone(), image: e.image_path.clone(), caption: e.caption.clone() })
                    .collect();
                let results = run_batch(&items, &encoder, &cfg, out_dir.as_deref())?;
                let failed = results.iter().filter(|(_, r)| r.is_err()).count();
                let docs: Vec<Value> = results
                    .into_iter()
                    .map(|(id, r)| match r {
                        Ok(r) => serde_json::to_value(r).expect("serializable"),
                        Err(e) => json!({ "id": id, "error": e.to_string() }),
                    })
                    .collect();
                emit(&docs)?;
                return Ok(if failed > 0 { 3 } else { 0 });
            }
            let image = image.as_ref().expect("required by clap");
            let caption = caption.as_ref().expect("required by clap");
            let id = id.clone().unwrap_or_else(|| stem_id(image));
            let mut segmenter = Segmenter::new(&cfg.segmenter)?;
            let result = run_pipeline(image, &id, caption, &encoder, &cfg, &mut segmenter, out_dir.as_deref())?;
            if let Some(w) = &result.warning {
                log::warn!("{id}: {w}");
            }
            emit(&result)?;
            return Ok(if result.present { 0 } else { EXIT_ABSENT });
        }
        Command::EvalIou { pred, truth, manifest, split, modes } => {
            if let (Some(pred), Some(truth)) = (pred, truth) {
                let v = iou(&load_mask(pred)?, &load_mask(truth)?)?;
                emit(&json!({ "iou": round6(v) }))?;
            } else {
                let manifest = manifest.as_ref().expect("required by clap");
                let encoder = load_encoder(&cfg)?;
                let (entries, captions) = manifest_subset(manifest, *split)?;
                let report = evaluate_masking(&entries, &captions, &encoder, &cfg, modes)?;
                emit(&report)?;
            }
        }
        Command::EvalThreshold { samples } => {
            let report = optimal_threshold(&read_samples(samples)?)?;
            emit(&report)?;
        }
        Command::EvalAccuracy { manifest, split, samples_out } => {
            let encoder = load_encoder(&cfg)?;
            let (entries, captions) = manifest_subset(manifest, *split)?;
            let (scored, accuracy) = score_entries(&entries, &captions, &encoder, cfg.pipeline.workers)?;
            if let Some(path) = samples_out {
                let mut text = String::new();
                for s in &scored {
                    text.push_str(&serde_json::to_string(s)?);
                    text.push('\n');
                }
                fs::write(path, text)?;
            }
            emit(&json!({
                "samples": scored.len(),
                "captions": captions.len(),
                "top1": round6(accuracy.top1),
                "top5": round6(accuracy.top5),
            }))?;
        }
        Command::StubAdapter { .. } => unreachable!("handled above"),
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            // usage shown because arguments were missing is still a usage error
            let missing = e.kind() == clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand;
            return ExitCode::from(if missing { 1 } else { code });
        }
    };
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e.root() {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(3),
            }
        }
    }
}
