use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::{Embedding, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{NodeId, Tape, Tensor};

pub const UNK_TOKEN: &str = "<unk>";

/// Lowercase, then split on whitespace.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption.to_lowercase().split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    pub table: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct TextNodes {
    pub params: [NodeId; 3],
    pub embedding: NodeId,
}

impl TextEncoder {
    pub fn init(cfg: &EncoderConfig, vocab: &[String], rng: &mut impl Rng) -> Result<Self> {
        let mut words = vec![UNK_TOKEN.to_string()];
        for w in vocab {
            if w != UNK_TOKEN && !words.contains(w) {
                words.push(w.clone());
            }
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let proj = Normal::new(0.0, (1.0 / cfg.text_dim as f64).sqrt()).expect("positive std");
        let v = words.len();
        let table = Tensor::new(vec![v, cfg.text_dim], (0..v * cfg.text_dim).map(|_| normal.sample(rng)).collect())?;
        let proj_weight = Tensor::new(
            vec![cfg.embed_dim, cfg.text_dim],
            (0..cfg.embed_dim * cfg.text_dim).map(|_| proj.sample(rng)).collect(),
        )?;
        Ok(Self {
            vocab: words,
            index,
            table,
            proj_weight,
            proj_bias: Tensor::zeros(&[cfg.embed_dim]),
        })
    }

    /// Vocabulary with UNK at index 0.
    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token_ids(&self, caption: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = tokenize(caption)
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(0))
            .collect();
        if ids.is_empty() {
            return Err(Error::EmptyCaption);
        }
        Ok(ids)
    }

    pub fn record(&self, tape: &mut Tape, caption: &str) -> Result<TextNodes> {
        let ids = self.token_ids(caption)?;
        let params = [
            tape.leaf(self.table.clone()),
            tape.leaf(self.proj_weight.clone()),
            tape.leaf(self.proj_bias.clone()),
        ];
        let mean = tape.embedding_mean(params[0], &ids)?;
        let embedding = tape.linear(params[1], params[2], mean)?;
        Ok(TextNodes { params, embedding })
    }

    pub fn encode(&self, caption: &str) -> Result<Embedding> {
        let mut tape = Tape::new();
        let nodes = self.record(&mut tape, caption)?;
        Ok(Embedding::from_tensor(tape.value(nodes.embedding)?, false))
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("text.embedding", &self.table),
            ("text.proj.weight", &self.proj_weight),
            ("text.proj.bias", &self.proj_bias),
        ]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.table, &mut self.proj_weight, &mut self.proj_bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::linear;
    use rand::SeedableRng;

    fn encoder() -> TextEncoder {
        let vocab: Vec<String> = ["red", "circle", "blue"].iter().map(|s| s.to_string()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        TextEncoder::init(&EncoderConfig::default(), &vocab, &mut rng).unwrap()
    }

    fn row(enc: &TextEncoder, i: usize) -> Vec<f64> {
        let d = enc.table.shape()[1];
        enc.table.data()[i * d..(i + 1) * d].to_vec()
    }

    fn project(enc: &TextEncoder, v: Vec<f64>) -> Vec<f64> {
        linear(&enc.proj_weight, &enc.proj_bias, &Tensor::vector(v).unwrap())
            .unwrap()
            .into_data()
    }

    #[test]
    fn single_token_is_projected_row() {
        let enc = encoder();
        let id = enc.token_ids("circle").unwrap()[0];
        assert_eq!(enc.encode("circle").unwrap().values(), project(&enc, row(&enc, id)).as_slice());
    }

    #[test]
    fn two_tokens_average_then_project() {
        let enc = encoder();
        let (r, c) = (enc.index["red"], enc.index["circle"]);
        let mean: Vec<f64> = row(&enc, r).iter().zip(row(&enc, c)).map(|(a, b)| (a + b) / 2.0).collect();
        assert_eq!(enc.encode("red circle").unwrap().values(), project(&enc, mean).as_slice());
    }

    #[test]
    fn unknown_tokens_use_unk_row() {
        let enc = encoder();
        let expected = project(&enc, row(&enc, 0));
        assert_eq!(enc.encode("purple hexagon").unwrap().values(), expected.as_slice());
    }

    #[test]
    fn tokenization_is_idempotent() {
        let enc = encoder();
        let caption = "  Red\tCIRCLE ";
        let rejoined = tokenize(caption).join(" ");
        assert_eq!(enc.encode(caption).unwrap(), enc.encode(&rejoined).unwrap());
    }

    #[test]
    fn empty_caption_is_rejected() {
        assert!(matches!(encoder().encode(" \t "), Err(Error::EmptyCaption)));
    }
}
