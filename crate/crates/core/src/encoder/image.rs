use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::RgbImage;
use crate::encoder::{Embedding, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{ConvGeometry, NodeId, Tape, Tensor};

pub const MIN_IMAGE_SIDE: usize = 5;

/// Pixels scaled to [-0.5, 0.5], channel-major, box-averaged over `pool` x `pool` blocks.
///
/// Trailing rows and columns that do not fill a block are dropped.
pub fn image_to_tensor(image: &RgbImage, channels: usize, pool: usize) -> Result<Tensor> {
    if channels != 3 {
        return Err(Error::dim(format!("encoder expects {channels} channels, RGB images have 3")));
    }
    let (w, h) = (image.width(), image.height());
    if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE {
        return Err(Error::dim(format!("image {w}x{h} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")));
    }
    if pool == 0 {
        return Err(Error::Config("input_pool must be positive".into()));
    }
    let (pw, ph) = (w / pool, h / pool);
    if pw == 0 || ph == 0 {
        return Err(Error::dim(format!("image {w}x{h} is smaller than one {pool}x{pool} pooling block")));
    }
    let px = image.data();
    let scale = 1.0 / (255.0 * (pool * pool) as f64);
    let mut data = vec![0.0; 3 * pw * ph];
    for y in 0..ph {
        for x in 0..pw {
            for c in 0..3 {
                let mut sum = 0u32;
                for dy in 0..pool {
                    let row = (y * pool + dy) * w;
                    for dx in 0..pool {
                        sum += px[(row + x * pool + dx) * 3 + c] as u32;
                    }
                }
                data[c * pw * ph + y * pw + x] = sum as f64 * scale - 0.5;
            }
        }
    }
    Tensor::new(vec![3, ph, pw], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub conv1_geom: ConvGeometry,
    pub conv2_geom: ConvGeometry,
    pub input_pool: usize,
}

/// Node ids of one recorded image forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ImageNodes {
    pub params: [NodeId; 6],
    /// Post-ReLU conv2 output, the Grad-CAM target layer.
    pub features: NodeId,
    /// Unnormalized embedding V.
    pub embedding: NodeId,
}

fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("finite samples")
}

impl ImageEncoder {
    pub fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.conv1_stride == 0 {
            return Err(Error::Config("conv1_stride must be positive".into()));
        }
        if cfg.input_pool == 0 {
            return Err(Error::Config("input_pool must be positive".into()));
        }
        let (cin, hid, k, d) = (cfg.in_channels, cfg.hidden_channels, cfg.feature_channels, cfg.embed_dim);
        Ok(Self {
            conv1_weight: gaussian(&[hid, cin, 3, 3], (2.0 / (cin * 9) as f64).sqrt(), rng),
            conv1_bias: Tensor::filled(&[hid], 0.01),
            conv2_weight: gaussian(&[k, hid, 3, 3], (2.0 / (hid * 9) as f64).sqrt(), rng),
            conv2_bias: Tensor::filled(&[k], 0.01),
            proj_weight: gaussian(&[d, k], (1.0 / k as f64).sqrt(), rng),
            proj_bias: Tensor::zeros(&[d]),
            conv1_geom: ConvGeometry::new(cfg.conv1_stride, 1),
            conv2_geom: ConvGeometry::new(1, 1),
            input_pool: cfg.input_pool,
        })
    }

    pub fn input(&self, image: &RgbImage) -> Result<Tensor> {
        image_to_tensor(image, self.in_channels(), self.input_pool)
    }

    pub fn in_channels(&self) -> usize {
        self.conv1_weight.shape()[1]
    }

    /// Spatial size (Hf, Wf) of the target layer for an HxW image.
    pub fn feature_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (h1, w1) = self.conv1_geom.output_size(h / self.input_pool, w / self.input_pool, 3, 3)?;
        self.conv2_geom.output_size(h1, w1, 3, 3)
    }

    pub fn record(&self, tape: &mut Tape, input: Tensor) -> Result<ImageNodes> {
        let x = tape.leaf(input);
        let params = [
            tape.leaf(self.conv1_weight.clone()),
            tape.leaf(self.conv1_bias.clone()),
            tape.leaf(self.conv2_weight.clone()),
            tape.leaf(self.conv2_bias.clone()),
            tape.leaf(self.proj_weight.clone()),
            tape.leaf(self.proj_bias.clone()),
        ];
        let c1 = tape.conv2d(x, params[0], params[1], self.conv1_geom)?;
        let r1 = tape.relu(c1)?;
        let c2 = tape.conv2d(r1, params[2], params[3], self.conv2_geom)?;
        let features = tape.relu(c2)?;
        let pooled = tape.global_avg_pool(features)?;
        let embedding = tape.linear(params[4], params[5], pooled)?;
        Ok(ImageNodes { params, features, embedding })
    }

    /// Unnormalized embedding V and target-layer activations (K x Hf x Wf).
    pub fn encode(&self, image: &RgbImage) -> Result<(Embedding, Tensor)> {
        let input = self.input(image)?;
        let mut tape = Tape::new();
        let nodes = self.record(&mut tape, input)?;
        Ok((
            Embedding::from_tensor(tape.value(nodes.embedding)?, false),
            tape.value(nodes.features)?.clone(),
        ))
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("image.conv1.weight", &self.conv1_weight),
            ("image.conv1.bias", &self.conv1_bias),
            ("image.conv2.weight", &self.conv2_weight),
            ("image.conv2.bias", &self.conv2_bias),
            ("image.proj.weight", &self.proj_weight),
            ("image.proj.bias", &self.proj_bias),
        ]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1_weight,
            &mut self.conv1_bias,
            &mut self.conv2_weight,
            &mut self.conv2_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
        ]
    }
}
