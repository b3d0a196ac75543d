//! Contrastive fine-tuning loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::pnm::load_ppm;
use crate::dataio::{load_manifest, RgbImage, Split};
use crate::encoder::{contrastive_loss, image_to_tensor, DualEncoder, Embedding, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig, AdamState, NodeId, Tape, Tensor};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Skip the trailing partial batch of each epoch.
    pub drop_incomplete: bool,
    /// Never put two pairs with the same caption in one batch, so no
    /// off-diagonal entry is a hidden positive.
    pub distinct_captions: bool,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 64,
            epochs: 50,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            temperature: 0.07,
            seed: 0,
            drop_incomplete: false,
            distinct_captions: false,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One image-caption training pair.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub image: RgbImage,
    pub caption: String,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub encoder: DualEncoder,
    /// Loss over the training set at initialization (index 0) and after each epoch.
    pub epoch_losses: Vec<f64>,
}

struct Recorded {
    tape: Tape,
    params: Vec<NodeId>,
    unit: NodeId,
}

fn record_image(enc: &DualEncoder, input: &Tensor) -> Result<Recorded> {
    let mut tape = Tape::new();
    let nodes = enc.image.record(&mut tape, input.clone())?;
    let unit = tape.normalize(nodes.embedding)?;
    Ok(Recorded { tape, params: nodes.params.to_vec(), unit })
}

fn record_text(enc: &DualEncoder, caption: &str) -> Result<Recorded> {
    let mut tape = Tape::new();
    let nodes = enc.text.record(&mut tape, caption)?;
    let unit = tape.normalize(nodes.embedding)?;
    Ok(Recorded { tape, params: nodes.params.to_vec(), unit })
}

fn unit_of(r: &Recorded) -> Result<Embedding> {
    Ok(Embedding::from_tensor(r.tape.value(r.unit)?, true))
}

fn param_grads(r: &Recorded, seed: &[f64]) -> Result<Vec<Tensor>> {
    let grads = r.tape.backward(r.unit, &Tensor::vector(seed.to_vec())?)?;
    r.params.iter().map(|&p| grads.get(p).cloned()).collect()
}

/// Loss and per-parameter gradients (named-parameter order) of one batch.
fn batch_step(enc: &DualEncoder, inputs: &[Tensor], captions: &[&str], temperature: f64) -> Result<(f64, Vec<Tensor>)> {
    let images: Vec<Recorded> = inputs.par_iter().map(|x| record_image(enc, x)).collect::<Result<_>>()?;
    let texts: Vec<Recorded> = captions.par_iter().map(|c| record_text(enc, c)).collect::<Result<_>>()?;
    let ev: Vec<Embedding> = images.iter().map(unit_of).collect::<Result<_>>()?;
    let et: Vec<Embedding> = texts.iter().map(unit_of).collect::<Result<_>>()?;
    let out = contrastive_loss(&ev, &et, temperature)?;

    let image_grads: Vec<Vec<Tensor>> = images
        .par_iter()
        .zip(&out.image_grads)
        .map(|(r, g)| param_grads(r, g))
        .collect::<Result<_>>()?;
    let text_grads: Vec<Vec<Tensor>> = texts
        .par_iter()
        .zip(&out.text_grads)
        .map(|(r, g)| param_grads(r, g))
        .collect::<Result<_>>()?;

    // Sequential sums keep the result independent of thread scheduling.
    let mut total: Vec<Tensor> = enc.named_params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let n_image = enc.image.named_params().len();
    for g in &image_grads {
        for (acc, gi) in total[..n_image].iter_mut().zip(g) {
            acc.add_assign(gi)?;
        }
    }
    for g in &text_grads {
        for (acc, gi) in total[n_image..].iter_mut().zip(g) {
            acc.add_assign(gi)?;
        }
    }
    Ok((out.loss, total))
}

fn batches(order: &[usize], captions: &[&str], cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let size = cfg.batch_size;
    let all: Vec<Vec<usize>> = if cfg.distinct_captions {
        // First fit in shuffled order: each pair joins the oldest open batch lacking its caption.
        let mut out: Vec<Vec<usize>> = Vec::new();
        for &i in order {
            let slot = out
                .iter()
                .position(|b| b.len() < size && b.iter().all(|&j| captions[j] != captions[i]));
            match slot {
                Some(b) => out[b].push(i),
                None => out.push(vec![i]),
            }
        }
        out
    } else {
        order.chunks(size).map(<[usize]>::to_vec).collect()
    };
    all.into_iter().filter(|b| !cfg.drop_incomplete || b.len() == size).collect()
}

fn dataset_loss(enc: &DualEncoder, inputs: &[Tensor], captions: &[&str], order: &[usize], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches(order, captions, cfg) {
        let xs: Vec<Tensor> = batch.iter().map(|&i| inputs[i].clone()).collect();
        let cs: Vec<&str> = batch.iter().map(|&i| captions[i]).collect();
        let ev: Vec<Embedding> = xs
            .iter()
            .map(|x| record_image(enc, x).and_then(|r| unit_of(&r)))
            .collect::<Result<_>>()?;
        let et: Vec<Embedding> = cs
            .iter()
            .map(|c| record_text(enc, c).and_then(|r| unit_of(&r)))
            .collect::<Result<_>>()?;
        total += contrastive_loss(&ev, &et, cfg.temperature)?.loss * batch.len() as f64;
        count += batch.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Trains a freshly initialized dual encoder on `pairs`, with the vocabulary
/// built from `vocab_captions`.
pub fn train_pairs<'a>(
    pairs: &[TrainPair],
    vocab_captions: impl IntoIterator<Item = &'a str>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if cfg.drop_incomplete && cfg.batch_size > pairs.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training pairs and incomplete batches are dropped",
            cfg.batch_size,
            pairs.len()
        )));
    }
    let vocab = DualEncoder::vocab_from_captions(vocab_captions);
    let mut enc = DualEncoder::init(cfg.encoder, &vocab, cfg.seed)?;
    let inputs: Vec<Tensor> = pairs
        .iter()
        .map(|p| image_to_tensor(&p.image, cfg.encoder.in_channels, cfg.encoder.input_pool))
        .collect::<Result<_>>()?;
    let captions: Vec<&str> = pairs.iter().map(|p| p.caption.as_str()).collect();

    let mut eval_order: Vec<usize> = (0..pairs.len()).collect();
    eval_order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive_pair(cfg.seed, u64::MAX)));

    let adam = cfg.adam();
    let mut states: Vec<AdamState> = enc.named_params().iter().map(|(_, t)| AdamState::new(t.shape())).collect();
    let mut losses = vec![dataset_loss(&enc, &inputs, &captions, &eval_order, cfg)?];
    log::info!("epoch 0 loss {:.6}", losses[0]);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive_pair(cfg.seed, epoch as u64)));
        for batch in batches(&order, &captions, cfg) {
            let xs: Vec<Tensor> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let cs: Vec<&str> = batch.iter().map(|&i| captions[i]).collect();
            let (_, grads) = batch_step(&enc, &xs, &cs, cfg.temperature)?;
            for ((param, grad), state) in enc.params_mut().into_iter().zip(&grads).zip(&mut states) {
                adam_step(param, grad, state, &adam)?;
            }
        }
        let loss = dataset_loss(&enc, &inputs, &captions, &eval_order, cfg)?;
        log::info!("epoch {} loss {:.6}", epoch + 1, loss);
        losses.push(loss);
    }
    Ok(TrainReport { encoder: enc, epoch_losses: losses })
}

/// Loads the train split of a manifest, trains, and writes the checkpoint.
pub fn train_manifest(manifest: &Path, cfg: &TrainConfig, checkpoint: &Path) -> Result<TrainReport> {
    let entries = load_manifest(manifest)?;
    let pairs: Vec<TrainPair> = entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| {
            Ok(TrainPair {
                image: load_ppm(&e.image_path)?,
                caption: e.caption.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let report = train_pairs(&pairs, entries.iter().map(|e| e.caption.as_str()), cfg)?;
    report.encoder.save(checkpoint)?;
    Ok(report)
}
