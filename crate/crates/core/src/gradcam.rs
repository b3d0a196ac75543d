//! Grad-CAM attention maps: `A(x, y) = ReLU(sum_k alpha_k f_k(x, y))` with
//! `alpha_k` the spatial mean of dS/df_k, normalized to [0, 1] and upsampled
//! to image resolution with corner-aligned bilinear interpolation.

use crate::dataio::RgbImage;
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// Hf x Wf, non-negative.
    pub raw: Tensor,
    /// H x W at image resolution, values in [0, 1].
    pub normalized: Tensor,
    /// (row, col) of the normalized maximum, smallest row then col on ties.
    pub peak: (usize, usize),
    /// True when the raw map is identically zero.
    pub empty: bool,
}

impl AttentionMap {
    pub fn width(&self) -> usize {
        self.normalized.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.normalized.shape()[0]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.normalized.data()[row * self.width() + col]
    }

    /// 8-bit gray plane, `round(255 * normalized)`.
    pub fn to_gray(&self) -> Vec<u8> {
        self.normalized
            .data()
            .iter()
            .map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Builds the image-resolution view from a raw map.
    pub fn from_raw(raw: Tensor, height: usize, width: usize) -> Result<Self> {
        let norm = normalize_map(&raw)?;
        // Renormalize: the upsampled grid need not hit the source maximum.
        let normalized = normalize_map(&upsample_bilinear(&norm, height, width)?)?;
        let empty = raw.data().iter().all(|&v| v == 0.0);
        let peak = argmax(&normalized);
        Ok(Self { raw, normalized, peak, empty })
    }
}

/// (row, col) of the first maximum in row-major order.
pub fn argmax(map: &Tensor) -> (usize, usize) {
    let w = map.shape()[1];
    let mut best = 0;
    for (i, &v) in map.data().iter().enumerate() {
        if v > map.data()[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

/// alpha_k: spatial mean of each gradient channel.
pub fn channel_weights(grads: &Tensor) -> Result<Vec<f64>> {
    let (k, h, w) = grads.dims3()?;
    if k == 0 || h * w == 0 {
        return Err(Error::Empty("gradient tensor".into()));
    }
    Ok(grads
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f64>() / (h * w) as f64)
        .collect())
}

/// Pixelwise ReLU of the alpha-weighted channel sum, shape [Hf, Wf].
pub fn raw_attention(features: &Tensor, alpha: &[f64]) -> Result<Tensor> {
    let (k, h, w) = features.dims3()?;
    if alpha.len() != k {
        return Err(Error::dim(format!("{} channel weights for {k} feature channels", alpha.len())));
    }
    let mut out = vec![0.0; h * w];
    for (plane, &a) in features.data().chunks_exact(h * w).zip(alpha) {
        for (o, &f) in out.iter_mut().zip(plane) {
            *o += a * f;
        }
    }
    for o in out.iter_mut() {
        if *o <= 0.0 {
            *o = 0.0;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Divides by the maximum; an all-zero map stays zero.
pub fn normalize_map(raw: &Tensor) -> Result<Tensor> {
    raw.dims2()?;
    if let Some(v) = raw.data().iter().find(|&&v| v < 0.0) {
        return Err(Error::InvalidArgument(format!("attention map has negative value {v}")));
    }
    let max = raw.data().iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(Tensor::zeros(raw.shape()));
    }
    Tensor::new(raw.shape().to_vec(), raw.data().iter().map(|v| v / max).collect())
}

/// Source coordinate and blend weight for target index `t` of `target` samples over `source`.
#[inline]
fn corner_aligned(t: usize, source: usize, target: usize) -> (usize, usize, f64) {
    if target == 1 || source == 1 {
        return (0, 0, 0.0);
    }
    let pos = (t * (source - 1)) as f64 / (target - 1) as f64;
    let i0 = (pos.floor() as usize).min(source - 1);
    let i1 = (i0 + 1).min(source - 1);
    (i0, i1, pos - i0 as f64)
}

/// Corner-aligned bilinear resize of an [h, w] map to [height, width].
pub fn upsample_bilinear(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    if height < h || width < w || h == 0 || w == 0 {
        return Err(Error::dim(format!("cannot upsample {h}x{w} to {height}x{width}")));
    }
    let src = map.data();
    let cols: Vec<(usize, usize, f64)> = (0..width).map(|c| corner_aligned(c, w, width)).collect();
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let (r0, r1, fr) = corner_aligned(r, h, height);
        for &(c0, c1, fc) in &cols {
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bottom = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    Tensor::new(vec![height, width], out)
}

/// Attention map from target-layer features and dS/df.
pub fn attention_from_gradients(features: &Tensor, grads: &Tensor, height: usize, width: usize) -> Result<AttentionMap> {
    features.same_shape(grads)?;
    let alpha = channel_weights(grads)?;
    let raw = raw_attention(features, &alpha)?;
    AttentionMap::from_raw(raw, height, width)
}

/// Full Grad-CAM chain for one image/caption pair.
pub fn attention_for(image: &RgbImage, caption: &str, encoder: &DualEncoder) -> Result<AttentionMap> {
    let fg = encoder.feature_gradients(image, caption)?;
    attention_from_gradients(&fg.features, &fg.gradients, image.height(), image.width())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn channel_weight_examples() {
        let g = t(&[2, 2, 2], &[1.5, 1.5, 1.5, 1.5, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(channel_weights(&g).unwrap(), vec![1.5, 2.5]);
        assert_eq!(channel_weights(&Tensor::zeros(&[3, 2, 2])).unwrap(), vec![0.0; 3]);
        assert!(channel_weights(&Tensor::zeros(&[0, 2, 2])).is_err());
    }

    #[test]
    fn raw_attention_examples() {
        let f = t(&[2, 2, 2], &[2.0, 0.0, 0.0, 0.0, 1.0, 3.0, 0.0, 0.0]);
        let a = raw_attention(&f, &[1.0, -1.0]).unwrap();
        assert_eq!(a.data(), &[1.0, 0.0, 0.0, 0.0]);

        let single = t(&[1, 2, 2], &[-1.0, 2.0, 0.5, -3.0]);
        assert_eq!(raw_attention(&single, &[1.0]).unwrap().data(), &[0.0, 2.0, 0.5, 0.0]);
        assert!(raw_attention(&f, &[0.0, 0.0]).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(raw_attention(&f, &[1.0]).is_err());
    }

    #[test]
    fn normalize_map_examples() {
        let n = normalize_map(&t(&[2, 2], &[4.0, 2.0, 1.0, 0.0])).unwrap();
        assert_eq!(n.data(), &[1.0, 0.5, 0.25, 0.0]);
        assert_eq!(normalize_map(&Tensor::zeros(&[2, 3])).unwrap(), Tensor::zeros(&[2, 3]));
        assert_eq!(normalize_map(&Tensor::filled(&[3, 3], 0.7)).unwrap().data(), &[1.0; 9]);
        assert!(normalize_map(&t(&[1, 2], &[1.0, -0.1])).is_err());
        assert_eq!(normalize_map(&n).unwrap(), n);
    }

    #[test]
    fn upsample_examples() {
        let c = upsample_bilinear(&Tensor::filled(&[3, 2], 0.25), 7, 5).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.25));
        let one = upsample_bilinear(&t(&[1, 1], &[0.6]), 4, 3).unwrap();
        assert!(one.data().iter().all(|&v| v == 0.6));

        let up = upsample_bilinear(&t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]), 4, 4).unwrap();
        for row in up.data().chunks(4) {
            let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
            for (a, b) in row.iter().zip(expected) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert!(upsample_bilinear(&Tensor::zeros(&[4, 4]), 3, 8).is_err());
    }

    #[test]
    fn upsample_hits_source_points_when_aligned() {
        // 22 -> 64 maps source i onto target 3i exactly
        let src: Vec<f64> = (0..22 * 22).map(|i| ((i * 37) % 101) as f64).collect();
        let map = t(&[22, 22], &src);
        let up = upsample_bilinear(&map, 64, 64).unwrap();
        for i in 0..22 {
            for j in 0..22 {
                assert_eq!(up.data()[(3 * i) * 64 + 3 * j], src[i * 22 + j]);
            }
        }
    }

    #[test]
    fn zero_map_is_flagged_empty() {
        let m = AttentionMap::from_raw(Tensor::zeros(&[4, 4]), 8, 8).unwrap();
        assert!(m.empty);
        assert!(m.normalized.data().iter().all(|&v| v == 0.0));
        assert_eq!(m.peak, (0, 0));
    }

    #[test]
    fn normalized_max_is_exactly_one_even_unaligned() {
        let raw = t(&[3, 3], &[0.0, 0.1, 0.0, 0.2, 5.0, 0.3, 0.0, 0.0, 0.0]);
        let m = AttentionMap::from_raw(raw, 10, 10).unwrap();
        assert_eq!(m.normalized.data().iter().cloned().fold(0.0, f64::max), 1.0);
        assert_eq!(m.at(m.peak.0, m.peak.1), 1.0);
    }

    #[test]
    fn gray_rendering_rounds() {
        let raw = t(&[1, 2], &[1.0, 0.5]);
        let m = AttentionMap::from_raw(raw, 1, 2).unwrap();
        assert_eq!(m.to_gray(), vec![255, 128]);
    }
}
