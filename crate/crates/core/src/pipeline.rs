//! End-to-end masking: score, gate, attend, prompt, segment, write.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::pnm::{load_mask, load_ppm, save_mask};
use crate::dataio::{ManifestEntry, Mask, RgbImage, SynthConfig};
use crate::encoder::train::TrainConfig;
use crate::encoder::DualEncoder;
use crate::error::{Error, Result, Stage};
use crate::evaluation::{iou, optimal_threshold, top_k, topk_accuracy, Accuracy, MaskingReport, SampleIou, ScoredSample};
use crate::gradcam::{attention_for, AttentionMap};
use crate::prompting::{prompts_for, PromptConfig, PromptJson, PromptMode, PromptSet};
use crate::seed;
use crate::segmenter::{Segmenter, SegmenterConfig};

/// Similarity gate shipped as the default operating point.
pub const DEFAULT_THRESHOLD: f64 = 0.489;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub checkpoint: Option<PathBuf>,
    pub threshold: f64,
    /// Skip attention and segmentation when the score is below the threshold.
    pub gate: bool,
    pub mode: PromptMode,
    pub workers: usize,
    pub seed: u64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            threshold: DEFAULT_THRESHOLD,
            gate: true,
            mode: PromptMode::Multi,
            workers: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub pipeline: PipelineSection,
    pub prompting: PromptConfig,
    pub segmenter: SegmenterConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.pipeline;
        if !(-1.0..=1.0).contains(&p.threshold) {
            return Err(Error::Config(format!("threshold must lie in [-1, 1], got {}", p.threshold)));
        }
        if p.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.prompting.validate()?;
        self.segmenter.validate()
    }

    /// Prompt settings for one sample, seeded from the global seed and the sample id.
    pub fn prompt_config_for(&self, id: &str) -> PromptConfig {
        PromptConfig { seed: seed::derive(self.pipeline.seed, id), ..self.prompting.clone() }
    }

    pub fn checkpoint(&self) -> Result<&Path> {
        self.pipeline
            .checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("no checkpoint configured".into()))
    }
}

/// Whole configuration file: `[pipeline]`, `[prompting]`, `[segmenter]`, `[train]`, `[synth]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub pipeline: PipelineSection,
    pub prompting: PromptConfig,
    pub segmenter: SegmenterConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            pipeline: self.pipeline.clone(),
            prompting: self.prompting.clone(),
            segmenter: self.segmenter.clone(),
        }
    }
}

/// Wall-clock milliseconds per stage; skipped stages are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub load_ms: f64,
    pub similarity_ms: f64,
    pub attention_ms: f64,
    pub prompting_ms: f64,
    pub segmentation_ms: f64,
    pub output_ms: f64,
    pub total_ms: f64,
}

impl Timings {
    pub fn stage_sum(&self) -> f64 {
        self.load_ms + self.similarity_ms + self.attention_ms + self.prompting_ms + self.segmentation_ms + self.output_ms
    }
}

fn elapsed_ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Similarity and, unless gated out, the attention map.
#[derive(Debug, Clone)]
pub struct Attended {
    pub similarity: f64,
    pub present: bool,
    pub attention: Option<AttentionMap>,
}

pub fn score_and_attend(
    image: &RgbImage,
    caption: &str,
    encoder: &DualEncoder,
    cfg: &PipelineConfig,
    timings: &mut Timings,
) -> Result<Attended> {
    let t = Instant::now();
    let similarity = encoder.score(image, caption).map_err(|e| e.at(Stage::Similarity))?.value();
    timings.similarity_ms = elapsed_ms(t);
    let present = similarity >= cfg.pipeline.threshold;
    if !present && cfg.pipeline.gate {
        return Ok(Attended { similarity, present, attention: None });
    }
    let t = Instant::now();
    let attention = attention_for(image, caption, encoder).map_err(|e| e.at(Stage::Attention))?;
    timings.attention_ms = elapsed_ms(t);
    Ok(Attended { similarity, present, attention: Some(attention) })
}

/// Prompts and mask for one mode. `Ok(None)` means the map had no activation.
pub fn mask_from_attention(
    image: &RgbImage,
    id: &str,
    attention: &AttentionMap,
    mode: PromptMode,
    cfg: &PipelineConfig,
    segmenter: &mut Segmenter,
    timings: &mut Timings,
) -> Result<Option<(PromptSet, Mask)>> {
    let t = Instant::now();
    let prompts = match prompts_for(attention, mode, &cfg.prompt_config_for(id)) {
        Ok(p) => p,
        Err(Error::NoActivation) => {
            timings.prompting_ms = elapsed_ms(t);
            return Ok(None);
        }
        Err(e) => return Err(e.at(Stage::Prompting)),
    };
    timings.prompting_ms = elapsed_ms(t);
    let t = Instant::now();
    let mask = segmenter.segment(image, &prompts).map_err(|e| e.at(Stage::Segmentation))?;
    timings.segmentation_ms = elapsed_ms(t);
    Ok(Some((prompts, mask)))
}

pub const WARNING_NO_ACTIVATION: &str = "no_activation";

/// Outcome of one image before anything is written.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub similarity: f64,
    pub present: bool,
    pub prompts: Option<PromptSet>,
    pub mask: Option<Mask>,
    pub warning: Option<String>,
    pub timings: Timings,
}

pub fn predict(
    image: &RgbImage,
    id: &str,
    caption: &str,
    encoder: &DualEncoder,
    cfg: &PipelineConfig,
    segmenter: &mut Segmenter,
) -> Result<Prediction> {
    let mut timings = Timings::default();
    let attended = score_and_attend(image, caption, encoder, cfg, &mut timings)?;
    let mut out = Prediction {
        similarity: attended.similarity,
        present: attended.present,
        prompts: None,
        mask: None,
        warning: None,
        timings,
    };
    let Some(attention) = attended.attention else {
        return Ok(out);
    };
    match mask_from_attention(image, id, &attention, cfg.pipeline.mode, cfg, segmenter, &mut out.timings)? {
        Some((prompts, mask)) => {
            out.prompts = Some(prompts);
            out.mask = Some(mask);
        }
        None => {
            out.present = false;
            out.warning = Some(WARNING_NO_ACTIVATION.into());
        }
    }
    Ok(out)
}

/// Machine-readable result of one `run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunResult {
    pub id: String,
    pub caption: String,
    pub similarity: f64,
    pub threshold: f64,
    pub present: bool,
    pub prompts: Option<PromptJson>,
    pub mask: Option<PathBuf>,
    pub warning: Option<String>,
    pub timings: Timings,
}

impl RunResult {
    /// Equality ignoring timings.
    pub fn same_outcome(&self, other: &RunResult) -> bool {
        RunResult { timings: Timings::default(), ..self.clone() } == RunResult { timings: Timings::default(), ..other.clone() }
    }
}

/// Runs one image from disk; the mask goes to `out_dir/<id>.pgm` when an output directory is given.
pub fn run_pipeline(
    image_path: &Path,
    id: &str,
    caption: &str,
    encoder: &DualEncoder,
    cfg: &PipelineConfig,
    segmenter: &mut Segmenter,
    out_dir: Option<&Path>,
) -> Result<RunResult> {
    let start = Instant::now();
    let image = load_ppm(image_path).map_err(|e| e.at(Stage::Load))?;
    let load_ms = elapsed_ms(start);
    let pred = predict(&image, id, caption, encoder, cfg, segmenter)?;
    let t = Instant::now();
    let mask_path = match (&pred.mask, out_dir) {
        (Some(mask), Some(dir)) => {
            let path = dir.join(format!("{id}.pgm"));
            fs::create_dir_all(dir)
                .map_err(Error::from)
                .and_then(|_| save_mask(mask, &path))
                .map_err(|e| e.at(Stage::Output))?;
            Some(path)
        }
        _ => None,
    };
    let timings = Timings { load_ms, output_ms: elapsed_ms(t), total_ms: elapsed_ms(start), ..pred.timings };
    Ok(RunResult {
        id: id.to_string(),
        caption: caption.to_string(),
        similarity: pred.similarity,
        threshold: cfg.pipeline.threshold,
        present: pred.present,
        prompts: pred.prompts.as_ref().map(PromptSet::to_json),
        mask: mask_path,
        warning: pred.warning,
        timings,
    })
}

/// Segmenters shared by a worker pool; at most one per concurrently running task.
pub struct SegmenterPool {
    cfg: SegmenterConfig,
    idle: Mutex<Vec<Segmenter>>,
}

impl SegmenterPool {
    pub fn new(cfg: &SegmenterConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg: cfg.clone(), idle: Mutex::new(Vec::new()) })
    }

    pub fn with<T>(&self, f: impl FnOnce(&mut Segmenter) -> Result<T>) -> Result<T> {
        let cached = self.idle.lock().expect("segmenter pool poisoned").pop();
        let mut seg = match cached {
            Some(s) => s,
            None => Segmenter::new(&self.cfg)?,
        };
        let out = f(&mut seg);
        self.idle.lock().expect("segmenter pool poisoned").push(seg);
        out
    }
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub id: String,
    pub image: PathBuf,
    pub caption: String,
}

/// Runs every item on `cfg.pipeline.workers` threads; results are ordered by id.
pub fn run_batch(
    items: &[BatchItem],
    encoder: &DualEncoder,
    cfg: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<(String, Result<RunResult>)>> {
    cfg.validate()?;
    let pool = worker_pool(cfg.pipeline.workers)?;
    let segmenters = SegmenterPool::new(&cfg.segmenter)?;
    let mut results: Vec<(String, Result<RunResult>)> = pool.install(|| {
        items
            .par_iter()
            .map(|item| {
                let r = segmenters.with(|seg| run_pipeline(&item.image, &item.id, &item.caption, encoder, cfg, seg, out_dir));
                (item.id.clone(), r)
            })
            .collect()
    });
    results.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(results)
}

/// Sorted distinct captions, the label set for accuracy.
pub fn caption_set(entries: &[ManifestEntry]) -> Vec<String> {
    let mut c: Vec<String> = entries.iter().map(|e| e.caption.clone()).collect();
    c.sort();
    c.dedup();
    c
}

/// Scores `image` against every caption; returns the best-caption sample, the score row and the label index.
fn score_entry(
    entry: &ManifestEntry,
    image: &RgbImage,
    captions: &[String],
    encoder: &DualEncoder,
) -> Result<(ScoredSample, Vec<f64>, usize)> {
    let label = captions
        .iter()
        .position(|c| *c == entry.caption)
        .ok_or_else(|| Error::InvalidArgument(format!("caption of `{}` is not in the caption set", entry.id)))?;
    let scores: Vec<f64> = captions
        .iter()
        .map(|c| encoder.score(image, c).map(|s| s.value()))
        .collect::<Result<_>>()
        .map_err(|e| e.at(Stage::Similarity))?;
    let best = top_k(&scores, 1)[0];
    let scored = ScoredSample { id: entry.id.clone(), score: scores[best], correct: best == label };
    Ok((scored, scores, label))
}

struct SampleEval {
    scores: Vec<f64>,
    label: usize,
    scored: ScoredSample,
    ious: Vec<SampleIou>,
    missing: bool,
}

fn evaluate_one(
    entry: &ManifestEntry,
    captions: &[String],
    encoder: &DualEncoder,
    cfg: &PipelineConfig,
    modes: &[PromptMode],
    segmenters: &SegmenterPool,
) -> Result<SampleEval> {
    let image = load_ppm(&entry.image_path).map_err(|e| e.at(Stage::Load))?;
    let (scored, scores, label) = score_entry(entry, &image, captions, encoder)?;

    let Some(mask_path) = &entry.mask_path else {
        return Ok(SampleEval { scores, label, scored, ious: Vec::new(), missing: true });
    };
    let truth = load_mask(mask_path).map_err(|e| e.at(Stage::Load))?;
    let mut timings = Timings::default();
    let attended = score_and_attend(&image, &entry.caption, encoder, cfg, &mut timings)?;
    let mut ious = Vec::with_capacity(modes.len());
    for &mode in modes {
        let predicted = match &attended.attention {
            Some(map) => segmenters
                .with(|seg| mask_from_attention(&image, &entry.id, map, mode, cfg, seg, &mut timings))?
                .map(|(_, m)| m),
            None => None,
        };
        let pred = predicted.unwrap_or_else(|| Mask::new(image.width(), image.height()));
        ious.push(SampleIou {
            id: entry.id.clone(),
            prompt_kind: mode.name().to_string(),
            iou: iou(&pred, &truth)?,
        });
    }
    Ok(SampleEval { scores, label, scored, ious, missing: false })
}

/// Per-sample IoU for each prompt mode plus accuracy and threshold selection over `entries`.
///
/// Gated-out or activation-free samples count as empty predictions.
pub fn evaluate_masking(
    entries: &[ManifestEntry],
    captions: &[String],
    encoder: &DualEncoder,
    cfg: &PipelineConfig,
    modes: &[PromptMode],
) -> Result<MaskingReport> {
    if entries.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    cfg.validate()?;
    let pool = worker_pool(cfg.pipeline.workers)?;
    let segmenters = SegmenterPool::new(&cfg.segmenter)?;
    let evals: Vec<SampleEval> = pool.install(|| {
        entries
            .par_iter()
            .map(|e| evaluate_one(e, captions, encoder, cfg, modes, &segmenters))
            .collect::<Result<_>>()
    })?;

    let score_rows: Vec<Vec<f64>> = evals.iter().map(|e| e.scores.clone()).collect();
    let labels: Vec<usize> = evals.iter().map(|e| e.label).collect();
    let accuracy = Accuracy {
        top1: topk_accuracy(&score_rows, &labels, 1)?,
        top5: topk_accuracy(&score_rows, &labels, 5)?,
    };
    let scored: Vec<ScoredSample> = evals.iter().map(|e| e.scored.clone()).collect();
    let threshold_report = optimal_threshold(&scored)?;
    let missing = evals.iter().filter(|e| e.missing).map(|e| e.scored.id.clone()).collect();
    let per_sample = evals.into_iter().flat_map(|e| e.ious).collect();
    Ok(MaskingReport::build(per_sample, threshold_report, accuracy, missing))
}

/// Best-caption score of every entry, for threshold selection.
pub fn score_entries(entries: &[ManifestEntry], captions: &[String], encoder: &DualEncoder, workers: usize) -> Result<(Vec<ScoredSample>, Accuracy)> {
    if entries.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let pool = worker_pool(workers.max(1))?;
    let rows: Vec<(ScoredSample, Vec<f64>, usize)> = pool.install(|| {
        entries
            .par_iter()
            .map(|entry| {
                let image = load_ppm(&entry.image_path).map_err(|e| e.at(Stage::Load))?;
                score_entry(entry, &image, captions, encoder)
            })
            .collect::<Result<_>>()
    })?;
    let score_rows: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
    let labels: Vec<usize> = rows.iter().map(|r| r.2).collect();
    let accuracy = Accuracy {
        top1: topk_accuracy(&score_rows, &labels, 1)?,
        top5: topk_accuracy(&score_rows, &labels, 5)?,
    };
    Ok((rows.into_iter().map(|r| r.0).collect(), accuracy))
}
