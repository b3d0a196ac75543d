//! Independent oracles shared by the integration tests and the acceptance run.
//!
//! Nothing here calls the library routine it checks: gradients come from
//! central differences, IoU from a per-pixel loop, thresholds from a dense grid,
//! prompt geometry from a separate union-find labelling.

#![allow(dead_code)]

use agmask_core::dataio::Mask;
use agmask_core::encoder::{DualEncoder, EncoderConfig};
use agmask_core::evaluation::ScoredSample;
use agmask_core::gradcam::AttentionMap;
use agmask_core::nn::{ConvGeometry, NodeId, Tape, Tensor};
use agmask_core::dataio::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values at least `gap` away from zero, for inputs that feed a ReLU.
pub fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = uniform(rng, shape, -1.0, 1.0);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + gap);
    }
    t
}

/// ||a - b|| / max(||a||, ||b||); both vectors must be non-trivial.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    assert!(den > 1e-8, "gradient is too small for a relative check ({den:e})");
    diff / den
}

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn numeric_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], which: usize) -> Vec<f64> {
    let mut xs = inputs.to_vec();
    (0..inputs[which].len())
        .map(|i| {
            let orig = xs[which].data()[i];
            xs[which].data_mut()[i] = orig + FD_STEP;
            let up = f(&xs);
            xs[which].data_mut()[i] = orig - FD_STEP;
            let down = f(&xs);
            xs[which].data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

type Build<'a> = dyn Fn(&mut Tape, &[NodeId]) -> NodeId + 'a;

/// Worst relative error between tape gradients and central differences of
/// `sum(r * out)` over every input, with `r` a random projection.
pub fn tape_grad_error(inputs: &[Tensor], build: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let forward = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &ids);
        (tape, ids, out)
    };
    let (tape, ids, out) = forward(inputs);
    let shape = tape.value(out).unwrap().shape().to_vec();
    let r = uniform(rng, &shape, -1.0, 1.0);
    let grads = tape.backward(out, &r).unwrap();
    let project = |xs: &[Tensor]| {
        let (t, _, o) = forward(xs);
        t.value(o).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    (0..inputs.len())
        .map(|i| rel_err(grads.get(ids[i]).unwrap().data(), &numeric_grad(&project, inputs, i)))
        .fold(0.0, f64::max)
}

/// Relative gradient error of every differentiable tape op for one seed.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..=1);
    let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
    let (h, w) = (r.random_range(4..=7), r.random_range(4..=7));
    let inputs = [
        uniform(&mut r, &[cin, h, w], -1.0, 1.0),
        uniform(&mut r, &[cout, cin, 3, 3], -1.0, 1.0),
        uniform(&mut r, &[cout], -1.0, 1.0),
    ];
    let geom = ConvGeometry::new(stride, pad);
    let e = tape_grad_error(&inputs, &|t, ids| t.conv2d(ids[0], ids[1], ids[2], geom).unwrap(), &mut r);
    out.push(("conv2d", e));

    let inputs = [off_kink(&mut r, &[2, 3, 4], 0.05)];
    let e = tape_grad_error(&inputs, &|t, ids| t.relu(ids[0]).unwrap(), &mut r);
    out.push(("relu", e));

    let inputs = [uniform(&mut r, &[3, 4, 5], -1.0, 1.0)];
    let e = tape_grad_error(&inputs, &|t, ids| t.global_avg_pool(ids[0]).unwrap(), &mut r);
    out.push(("global_avg_pool", e));

    let (m, n) = (r.random_range(1..=6), r.random_range(1..=6));
    let inputs = [
        uniform(&mut r, &[m, n], -1.0, 1.0),
        uniform(&mut r, &[m], -1.0, 1.0),
        uniform(&mut r, &[n], -1.0, 1.0),
    ];
    let e = tape_grad_error(&inputs, &|t, ids| t.linear(ids[0], ids[1], ids[2]).unwrap(), &mut r);
    out.push(("linear", e));

    let n = r.random_range(2..=8);
    let inputs = [uniform(&mut r, &[n], -1.0, 1.0)];
    let e = tape_grad_error(&inputs, &|t, ids| t.normalize(ids[0]).unwrap(), &mut r);
    out.push(("normalize", e));

    let inputs = [uniform(&mut r, &[n], -1.0, 1.0), uniform(&mut r, &[n], -1.0, 1.0)];
    let e = tape_grad_error(&inputs, &|t, ids| t.dot(ids[0], ids[1]).unwrap(), &mut r);
    out.push(("dot", e));

    let (v, d) = (r.random_range(2..=6), r.random_range(1..=5));
    let len = r.random_range(1..=5);
    // repeats are likely with a small vocabulary
    let idx: Vec<usize> = (0..len).map(|_| r.random_range(0..v)).collect();
    let inputs = [uniform(&mut r, &[v, d], -1.0, 1.0)];
    let e = tape_grad_error(&inputs, &|t, ids| t.embedding_mean(ids[0], &idx).unwrap(), &mut r);
    out.push(("embedding_mean", e));

    // a composed chain exercises accumulation across nodes
    let inputs = [
        uniform(&mut r, &[2, 6, 6], -1.0, 1.0),
        uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0),
        uniform(&mut r, &[3], 0.3, 0.6),
        uniform(&mut r, &[4, 3], -1.0, 1.0),
        uniform(&mut r, &[4], -1.0, 1.0),
        uniform(&mut r, &[4], -1.0, 1.0),
    ];
    let e = tape_grad_error(
        &inputs,
        &|t, ids| {
            let c = t.conv2d(ids[0], ids[1], ids[2], ConvGeometry::new(1, 1)).unwrap();
            let p = t.global_avg_pool(c).unwrap();
            let l = t.linear(ids[3], ids[4], p).unwrap();
            let n = t.normalize(l).unwrap();
            t.dot(n, ids[5]).unwrap()
        },
        &mut r,
    );
    out.push(("chain", e));
    out
}

/// S as a plain function of the target-layer activations:
/// `normalize(W * mean_xy(f) + b) . t_hat`.
pub fn score_from_features(features: &Tensor, w: &Tensor, b: &Tensor, t_hat: &[f64]) -> f64 {
    let (k, h, wd) = features.dims3().unwrap();
    let plane = h * wd;
    let pooled: Vec<f64> = (0..k)
        .map(|c| features.data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    let d = b.len();
    let v: Vec<f64> = (0..d)
        .map(|i| b.data()[i] + (0..k).map(|j| w.data()[i * k + j] * pooled[j]).sum::<f64>())
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().zip(t_hat).map(|(a, t)| a * t).sum::<f64>() / norm
}

pub fn random_image(rng: &mut ChaCha8Rng, width: usize, height: usize) -> RgbImage {
    let data = (0..width * height * 3).map(|_| rng.random::<u8>()).collect();
    RgbImage::new(width, height, data).unwrap()
}

/// Relative error of the encoder's dS/df against central differences of
/// `score_from_features`, for a randomly shaped encoder and image.
pub fn encoder_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let cfg = EncoderConfig {
        in_channels: 3,
        hidden_channels: r.random_range(2..=4),
        feature_channels: r.random_range(1..=4),
        embed_dim: r.random_range(2..=8),
        text_dim: r.random_range(2..=6),
        conv1_stride: r.random_range(1..=3),
        input_pool: r.random_range(1..=2),
    };
    let vocab = vec!["red".to_string(), "circle".to_string(), "square".to_string()];
    let mut enc = DualEncoder::init(cfg, &vocab, seed).unwrap();
    // a zero bias with K = 1 pins the embedding direction and zeroes dS/df
    enc.image.proj_bias = uniform(&mut r, &[cfg.embed_dim], -0.5, 0.5);
    let side = r.random_range(10..=16);
    let image = random_image(&mut r, side, side + 1);
    let caption = ["red circle", "red square", "blue circle"][r.random_range(0..3)];

    let fg = enc.feature_gradients(&image, caption).unwrap();
    let t = enc.encode_text(caption).unwrap();
    let tn = t.norm();
    let t_hat: Vec<f64> = t.values().iter().map(|v| v / tn).collect();
    let (w, b) = (&enc.image.proj_weight, &enc.image.proj_bias);
    let s = |xs: &[Tensor]| score_from_features(&xs[0], w, b, &t_hat);
    let s0 = s(std::slice::from_ref(&fg.features));
    assert!((s0 - fg.score.value()).abs() < 1e-9, "oracle score {s0} vs {}", fg.score.value());
    let numeric = numeric_grad(&s, std::slice::from_ref(&fg.features), 0);
    rel_err(fg.gradients.data(), &numeric)
}

/// IoU by visiting every pixel; two empty masks count as identical.
pub fn naive_iou(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn random_mask(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Mask {
    let density: f64 = rng.random_range(0.0..1.0);
    Mask::from_fn(width, height, |_, _| rng.random_bool(density))
}

fn f1_at(samples: &[ScoredSample], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for s in samples {
        let present = s.score >= threshold;
        if present && s.correct {
            tp += 1.0;
        } else if present {
            fp += 1.0;
        } else if s.correct {
            fn_ += 1.0;
        }
    }
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

pub const GRID_POINTS: usize = 10_000;

/// Best F1 and its smallest threshold over `GRID_POINTS` evenly spaced thresholds in [-1, 1].
pub fn grid_best_f1(samples: &[ScoredSample]) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for i in 0..GRID_POINTS {
        let theta = -1.0 + 2.0 * i as f64 / (GRID_POINTS - 1) as f64;
        let f = f1_at(samples, theta);
        if f > best.0 {
            best = (f, theta);
        }
    }
    best
}

/// Scores on a 1e-3 lattice in [-0.999, 0.999], so distinct scores are at
/// least five grid steps apart and the grid sees every partition.
pub fn random_samples(rng: &mut ChaCha8Rng) -> Vec<ScoredSample> {
    let n = rng.random_range(1..=40);
    let p_correct: f64 = rng.random_range(0.1..0.9);
    (0..n)
        .map(|i| ScoredSample {
            id: format!("s{i}"),
            score: rng.random_range(-999..=999) as f64 / 1000.0,
            correct: rng.random_bool(p_correct),
        })
        .collect()
}

/// An attention map built from non-overlapping cones `(row, col, radius, height)`,
/// at image resolution so no interpolation is involved.
pub fn cone_map(height: usize, width: usize, cones: &[(usize, usize, f64, f64)]) -> AttentionMap {
    let mut raw = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            for &(cr, cc, rad, amp) in cones {
                let d = ((y as f64 - cr as f64).powi(2) + (x as f64 - cc as f64).powi(2)).sqrt();
                raw[y * width + x] += amp * (1.0 - d / rad).max(0.0);
            }
        }
    }
    AttentionMap::from_raw(Tensor::new(vec![height, width], raw).unwrap(), height, width).unwrap()
}

/// Random map with one or two well separated cones.
pub fn random_cone_map(rng: &mut ChaCha8Rng, cones: usize) -> AttentionMap {
    let (h, w) = (rng.random_range(40..=56), rng.random_range(64..=80));
    loop {
        let picked: Vec<(usize, usize, f64, f64)> = (0..cones)
            .map(|i| {
                let rad = rng.random_range(12.0..18.0);
                let amp = if i == 0 { 1.0 } else { rng.random_range(0.85..0.99) };
                (rng.random_range(0..h), rng.random_range(0..w), rad, amp)
            })
            .collect();
        let apart = picked.iter().enumerate().all(|(i, a)| {
            picked[i + 1..].iter().all(|b| {
                let d = ((a.0 as f64 - b.0 as f64).powi(2) + (a.1 as f64 - b.1 as f64).powi(2)).sqrt();
                d > a.2 + b.2 + 2.0
            })
        });
        if apart {
            return cone_map(h, w, &picked);
        }
    }
}

/// Pixels with value >= fraction * max, by direct comparison.
pub fn red_pixels(map: &AttentionMap, fraction: f64) -> Vec<(usize, usize)> {
    let max = map.normalized.data().iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::new();
    for r in 0..map.height() {
        for c in 0..map.width() {
            if max > 0.0 && map.at(r, c) >= fraction * max {
                out.push((r, c));
            }
        }
    }
    out
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 8-connected components by union-find, each sorted row-major.
pub fn label_components(pixels: &[(usize, usize)]) -> Vec<Vec<(usize, usize)>> {
    let mut parent: Vec<usize> = (0..pixels.len()).collect();
    for i in 0..pixels.len() {
        for j in i + 1..pixels.len() {
            let (a, b) = (pixels[i], pixels[j]);
            if a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
    for i in 0..pixels.len() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(pixels[i]);
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect()
}

/// Member pixel nearest the mean position, first in row-major order on ties.
pub fn snapped_centroid(pixels: &[(usize, usize)]) -> (usize, usize) {
    let n = pixels.len() as f64;
    let mr = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let mc = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let d = |p: &(usize, usize)| (p.0 as f64 - mr).powi(2) + (p.1 as f64 - mc).powi(2);
    let mut best = pixels[0];
    for p in pixels {
        if d(p) < d(&best) {
            best = *p;
        }
    }
    best
}

/// First maximum in row-major order.
pub fn first_peak(map: &AttentionMap) -> (usize, usize) {
    let mut best = (0, 0);
    for r in 0..map.height() {
        for c in 0..map.width() {
            if map.at(r, c) > map.at(best.0, best.1) {
                best = (r, c);
            }
        }
    }
    best
}
