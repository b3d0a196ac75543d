//! Forward and backward kernels for the handful of layers the encoders use.
//!
//! Every function here is pure. Backward kernels take the forward inputs plus
//! the upstream gradient and return gradients for each differentiable input.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Spatial geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if kh > ph || kw > pw || kh == 0 || kw == 0 {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} does not fit padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

struct ConvShapes {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_shapes(input: &Tensor, weights: &Tensor, bias: &Tensor, geom: ConvGeometry) -> Result<ConvShapes> {
    let (c, h, w) = input.dims3()?;
    let (k, wc, kh, kw) = match *weights.shape() {
        [k, c, kh, kw] => (k, c, kh, kw),
        _ => {
            return Err(Error::dim(format!(
                "conv weights must be KxCxkhxkw, got {:?}",
                weights.shape()
            )))
        }
    };
    if wc != c {
        return Err(Error::dim(format!(
            "conv weights expect {wc} input channels, input has {c}"
        )));
    }
    if bias.shape() != [k] {
        return Err(Error::dim(format!(
            "conv bias must have {k} values, got {:?}",
            bias.shape()
        )));
    }
    let (oh, ow) = geom.output_size(h, w, kh, kw)?;
    Ok(ConvShapes { c, h, w, k, kh, kw, oh, ow })
}

/// Row range of output positions `o` for which `o*stride + i - padding` lands in `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, offset: usize, geom: ConvGeometry) -> (usize, usize) {
    let s = geom.stride;
    let p = geom.padding;
    // o*s + offset >= p
    let lo = if offset >= p { 0 } else { (p - offset).div_ceil(s) };
    // o*s + offset - p <= len - 1
    let hi = if len + p > offset {
        ((len + p - 1 - offset) / s + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Cross-correlation of a CxHxW input with KxCxkhxkw weights.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let ConvShapes { c, h, w, k, kh, kw, oh, ow } = conv_shapes(input, weights, bias, geom)?;
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0; k * oh * ow];
    let s = geom.stride;
    let p = geom.padding;
    for ko in 0..k {
        let plane = &mut out[ko * oh * ow..(ko + 1) * oh * ow];
        plane.fill(bias.data()[ko]);
        for ci in 0..c {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for i in 0..kh {
                let (oy0, oy1) = valid_range(h, oh, i, geom);
                for j in 0..kw {
                    let wv = wt[((ko * c + ci) * kh + i) * kw + j];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(w, ow, j, geom);
                    for oy in oy0..oy1 {
                        let iy = oy * s + i - p;
                        let row = &xin[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * row[ox * s + j - p];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![k, oh, ow], out))
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    geom: ConvGeometry,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let ConvShapes { c, h, w, k, kh, kw, oh, ow } = conv_shapes(input, weights, bias, geom)?;
    if grad_out.shape() != [k, oh, ow] {
        return Err(Error::dim(format!(
            "conv upstream gradient must be {:?}, got {:?}",
            [k, oh, ow],
            grad_out.shape()
        )));
    }
    let x = input.data();
    let wt = weights.data();
    let g = grad_out.data();
    let s = geom.stride;
    let p = geom.padding;
    let mut gx = vec![0.0; c * h * w];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; k];
    for ko in 0..k {
        let gplane = &g[ko * oh * ow..(ko + 1) * oh * ow];
        gb[ko] = gplane.iter().sum();
        for ci in 0..c {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            let gxin = &mut gx[ci * h * w..(ci + 1) * h * w];
            for i in 0..kh {
                let (oy0, oy1) = valid_range(h, oh, i, geom);
                for j in 0..kw {
                    let widx = ((ko * c + ci) * kh + i) * kw + j;
                    let wv = wt[widx];
                    let (ox0, ox1) = valid_range(w, ow, j, geom);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * s + i - p;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            let ix = ox * s + j - p;
                            acc += grow[ox] * xin[iy * w + ix];
                            gxin[iy * w + ix] += grow[ox] * wv;
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![c, h, w], gx),
        Tensor::from_parts(weights.shape().to_vec(), gw),
        Tensor::from_parts(vec![k], gb),
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::from_parts(
        input.shape().to_vec(),
        input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    )
}

/// Subgradient convention: zero at exactly 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.same_shape(grad_out)?;
    Ok(Tensor::from_parts(
        input.shape().to_vec(),
        input
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    ))
}

/// Per-channel spatial mean of a KxHxW tensor.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (k, h, w) = input.dims3()?;
    let area = h * w;
    if area == 0 {
        return Err(Error::dim("global_avg_pool over empty spatial dims"));
    }
    let out = input
        .data()
        .chunks_exact(area)
        .map(|plane| plane.iter().sum::<f64>() / area as f64)
        .collect();
    Ok(Tensor::from_parts(vec![k], out))
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (k, h, w) = match *input_shape {
        [k, h, w] => (k, h, w),
        _ => return Err(Error::dim("global_avg_pool input must be KxHxW")),
    };
    if grad_out.shape() != [k] {
        return Err(Error::dim("global_avg_pool upstream gradient must have K values"));
    }
    let area = h * w;
    let mut gx = Vec::with_capacity(k * area);
    for &g in grad_out.data() {
        gx.extend(std::iter::repeat_n(g / area as f64, area));
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), gx))
}

fn linear_dims(weights: &Tensor, bias: &Tensor, input: &Tensor) -> Result<(usize, usize)> {
    let (d, n) = weights.dims2()?;
    if input.shape() != [n] {
        return Err(Error::dim(format!(
            "linear expects input of {n} values, got {:?}",
            input.shape()
        )));
    }
    if bias.shape() != [d] {
        return Err(Error::dim(format!(
            "linear bias must have {d} values, got {:?}",
            bias.shape()
        )));
    }
    Ok((d, n))
}

/// `W x + b` for `W` of shape DxN.
pub fn linear(weights: &Tensor, bias: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (d, n) = linear_dims(weights, bias, input)?;
    let x = input.data();
    let out = (0..d)
        .map(|r| {
            let row = &weights.data()[r * n..(r + 1) * n];
            bias.data()[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Ok(Tensor::from_parts(vec![d], out))
}

/// Returns (grad weights, grad bias, grad input).
pub fn linear_backward(
    weights: &Tensor,
    bias: &Tensor,
    input: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (d, n) = linear_dims(weights, bias, input)?;
    if grad_out.shape() != [d] {
        return Err(Error::dim("linear upstream gradient must have D values"));
    }
    let x = input.data();
    let g = grad_out.data();
    let mut gw = vec![0.0; d * n];
    let mut gx = vec![0.0; n];
    for r in 0..d {
        let row = &weights.data()[r * n..(r + 1) * n];
        for c in 0..n {
            gw[r * n + c] = g[r] * x[c];
            gx[c] += g[r] * row[c];
        }
    }
    Ok((
        Tensor::from_parts(vec![d, n], gw),
        Tensor::from_parts(vec![d], g.to_vec()),
        Tensor::from_parts(vec![n], gx),
    ))
}

/// Norms at or below this are treated as degenerate.
pub const MIN_NORM: f64 = 1e-12;

pub fn normalize(input: &Tensor) -> Result<Tensor> {
    let norm = input.norm();
    if norm <= MIN_NORM {
        return Err(Error::DegenerateEmbedding(norm));
    }
    Ok(input.scale(1.0 / norm))
}

/// d(x/|x|) = (g - y (y.g)) / |x|
pub fn normalize_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.same_shape(grad_out)?;
    let norm = input.norm();
    if norm <= MIN_NORM {
        return Err(Error::DegenerateEmbedding(norm));
    }
    let y: Vec<f64> = input.data().iter().map(|v| v / norm).collect();
    let yg: f64 = y.iter().zip(grad_out.data()).map(|(a, b)| a * b).sum();
    Ok(Tensor::from_parts(
        input.shape().to_vec(),
        y.iter()
            .zip(grad_out.data())
            .map(|(yi, gi)| (gi - yi * yg) / norm)
            .collect(),
    ))
}

pub fn dot(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 1 {
        return Err(Error::dim("dot expects vectors"));
    }
    a.same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
}

/// Mean of the selected rows of a VxD table.
pub fn embedding_mean(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (v, d) = table.dims2()?;
    if indices.is_empty() {
        return Err(Error::dim("embedding_mean needs at least one index"));
    }
    let mut out = vec![0.0; d];
    for &i in indices {
        if i >= v {
            return Err(Error::dim(format!("embedding index {i} out of range {v}")));
        }
        for (o, t) in out.iter_mut().zip(&table.data()[i * d..(i + 1) * d]) {
            *o += t;
        }
    }
    let n = indices.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(Tensor::from_parts(vec![d], out))
}

pub fn embedding_mean_backward(table_shape: &[usize], indices: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (v, d) = match *table_shape {
        [v, d] => (v, d),
        _ => return Err(Error::dim("embedding table must be rank-2")),
    };
    if grad_out.shape() != [d] {
        return Err(Error::dim("embedding_mean upstream gradient must have D values"));
    }
    let n = indices.len() as f64;
    let mut g = vec![0.0; v * d];
    for &i in indices {
        for (gt, go) in g[i * d..(i + 1) * d].iter_mut().zip(grad_out.data()) {
            *gt += go / n;
        }
    }
    Ok(Tensor::from_parts(table_shape.to_vec(), g))
}
