//! Toy vision-language dual encoder.
//!
//! The image side is two 3x3 conv layers with ReLU, global average pooling and
//! a linear projection; the post-ReLU output of the second conv is the target
//! layer Grad-CAM differentiates. The text side averages token embeddings and
//! projects them into the same space. Similarity is the dot product of the two
//! normalized embeddings.

mod contrastive;
mod image;
mod text;
pub mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use contrastive::{contrastive_loss, ContrastiveOutput};
pub use image::{image_to_tensor, ImageEncoder};
pub use text::{tokenize, TextEncoder, UNK_TOKEN};

use crate::dataio::RgbImage;
use crate::error::{Error, Result};
use crate::nn::ops::{self, MIN_NORM};
use crate::nn::weights::{load_weights, save_weights, WeightsFile};
use crate::nn::{Tape, Tensor};

/// Tolerance on the unit norm of a normalized embedding.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    /// K: channels of the Grad-CAM target layer.
    pub feature_channels: usize,
    /// D: shared embedding dimension.
    pub embed_dim: usize,
    pub text_dim: usize,
    pub conv1_stride: usize,
    /// Box-average downsampling factor applied before conv1.
    pub input_pool: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            hidden_channels: 8,
            feature_channels: 8,
            embed_dim: 16,
            text_dim: 16,
            conv1_stride: 3,
            input_pool: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    normalized: bool,
}

impl Embedding {
    pub fn raw(values: Vec<f64>) -> Result<Self> {
        Tensor::vector(values.clone())?;
        Ok(Self { values, normalized: false })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn from_tensor(t: &Tensor, normalized: bool) -> Self {
        Self {
            values: t.data().to_vec(),
            normalized,
        }
    }
}

pub fn normalize(e: &Embedding) -> Result<Embedding> {
    let norm = e.norm();
    if norm <= MIN_NORM {
        return Err(Error::DegenerateEmbedding(norm));
    }
    let t = ops::normalize(&Tensor::vector(e.values.clone())?)?;
    Ok(Embedding::from_tensor(&t, true))
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn value(&self) -> f64 {
        self.0
    }
}

fn require_unit(e: &Embedding) -> Result<()> {
    let n = e.norm();
    if !e.normalized || (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::NotNormalized(n));
    }
    Ok(())
}

pub fn similarity(image: &Embedding, text: &Embedding) -> Result<SimilarityScore> {
    if image.dim() != text.dim() {
        return Err(Error::dim(format!(
            "embedding dims differ: {} vs {}",
            image.dim(),
            text.dim()
        )));
    }
    require_unit(image)?;
    require_unit(text)?;
    let s: f64 = image.values.iter().zip(&text.values).map(|(a, b)| a * b).sum();
    Ok(SimilarityScore(s.clamp(-1.0, 1.0)))
}

/// Checkpoint metadata stored in the weights header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: EncoderConfig,
    pub vocab: Vec<String>,
    pub seed: u64,
}

/// Paired image and text encoders sharing an embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub config: EncoderConfig,
    pub seed: u64,
}

impl DualEncoder {
    /// Randomly initialized encoders over `vocab` (UNK is added at index 0).
    pub fn init(config: EncoderConfig, vocab: &[String], seed: u64) -> Result<Self> {
        if config.embed_dim == 0 || config.feature_channels == 0 || config.hidden_channels == 0 || config.text_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = ImageEncoder::init(&config, &mut rng)?;
        let text = TextEncoder::init(&config, vocab, &mut rng)?;
        Ok(Self { image, text, config, seed })
    }

    /// Lowercased whitespace tokens of every caption, sorted and deduplicated.
    pub fn vocab_from_captions<'a>(captions: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut v: Vec<String> = captions.into_iter().flat_map(tokenize).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn encode_image(&self, image: &RgbImage) -> Result<(Embedding, Tensor)> {
        self.image.encode(image)
    }

    pub fn encode_text(&self, caption: &str) -> Result<Embedding> {
        self.text.encode(caption)
    }

    pub fn score(&self, image: &RgbImage, caption: &str) -> Result<SimilarityScore> {
        let (v, _) = self.encode_image(image)?;
        let t = self.encode_text(caption)?;
        similarity(&normalize(&v)?, &normalize(&t)?)
    }

    /// dS/df_k at the target layer, together with the features and S.
    pub fn feature_gradients(&self, image: &RgbImage, caption: &str) -> Result<FeatureGradients> {
        let text = normalize(&self.encode_text(caption)?)?;
        let input = self.image.input(image)?;
        let mut tape = Tape::new();
        let nodes = self.image.record(&mut tape, input)?;
        let ev = tape.normalize(nodes.embedding)?;
        let et = tape.leaf(Tensor::vector(text.values.clone())?);
        let s = tape.dot(ev, et)?;
        let score = tape.value(s)?.data()[0];
        let grads = tape.backward(s, &Tensor::scalar(1.0)?)?;
        Ok(FeatureGradients {
            features: tape.value(nodes.features)?.clone(),
            gradients: grads.get(nodes.features)?.clone(),
            score: SimilarityScore(score.clamp(-1.0, 1.0)),
        })
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut p = self.image.named_params();
        p.extend(self.text.named_params());
        p
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.image.params_mut();
        p.extend(self.text.params_mut());
        p
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config: self.config,
            vocab: self.text.vocab().to_vec(),
            seed: self.seed,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(self.meta())?;
        save_weights(path, &self.named_params(), &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weights(&load_weights(path)?)
    }

    pub fn from_weights(file: &WeightsFile) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(file.meta.clone())?;
        // vocab in the file already carries UNK at index 0
        let mut enc = Self::init(meta.config, &meta.vocab[1..], meta.seed)?;
        if enc.text.vocab() != meta.vocab.as_slice() {
            return Err(Error::Protocol("checkpoint vocabulary is malformed".into()));
        }
        let names: Vec<&'static str> = enc.named_params().iter().map(|(n, _)| *n).collect();
        for (name, slot) in names.into_iter().zip(enc.params_mut()) {
            let t = file.get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::dim(format!(
                    "checkpoint `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(enc)
    }
}

#[derive(Debug, Clone)]
pub struct FeatureGradients {
    pub features: Tensor,
    pub gradients: Tensor,
    pub score: SimilarityScore,
}
