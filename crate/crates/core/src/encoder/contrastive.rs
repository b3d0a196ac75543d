use crate::encoder::{Embedding, UNIT_NORM_TOLERANCE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// dL/dE_V per row.
    pub image_grads: Vec<Vec<f64>>,
    /// dL/dE_T per row.
    pub text_grads: Vec<Vec<f64>>,
}

/// Softmax of `logits` and the cross-entropy against index `target`.
fn softmax_ce(logits: &[f64], target: usize) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[target];
    (exps.iter().map(|e| e / sum).collect(), loss)
}

/// Symmetric InfoNCE over the NxN matrix of `E_V[i] . E_T[j] / temperature`;
/// row i is paired with column i. The loss averages the image-to-text and
/// text-to-image cross-entropies.
pub fn contrastive_loss(images: &[Embedding], texts: &[Embedding], temperature: f64) -> Result<ContrastiveOutput> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let n = images.len();
    if n == 0 || texts.len() != n {
        return Err(Error::dim(format!("need N >= 1 matched pairs, got {} images and {} texts", n, texts.len())));
    }
    let d = images[0].dim();
    for e in images.iter().chain(texts) {
        if e.dim() != d {
            return Err(Error::dim("embedding dims differ within the batch"));
        }
        if !e.is_normalized() || (e.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::NotNormalized(e.norm()));
        }
    }

    let v: Vec<Vec<f64>> = images.iter().map(|e| e.values().to_vec()).collect();
    let t: Vec<Vec<f64>> = texts.iter().map(|e| e.values().to_vec()).collect();
    Ok(infonce(&v, &t, temperature))
}

fn infonce(images: &[Vec<f64>], texts: &[Vec<f64>], temperature: f64) -> ContrastiveOutput {
    let n = images.len();
    let d = images[0].len();
    let logits: Vec<Vec<f64>> = images
        .iter()
        .map(|v| {
            texts
                .iter()
                .map(|t| v.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / temperature)
                .collect()
        })
        .collect();

    // dL/dlogits accumulated from both directions
    let mut g = vec![vec![0.0; n]; n];
    let scale = 0.5 / n as f64;
    let mut loss_i2t = 0.0;
    for i in 0..n {
        let (p, l) = softmax_ce(&logits[i], i);
        loss_i2t += l;
        for j in 0..n {
            g[i][j] += scale * (p[j] - if i == j { 1.0 } else { 0.0 });
        }
    }
    let mut loss_t2i = 0.0;
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| logits[i][j]).collect();
        let (p, l) = softmax_ce(&col, j);
        loss_t2i += l;
        for i in 0..n {
            g[i][j] += scale * (p[i] - if i == j { 1.0 } else { 0.0 });
        }
    }
    let loss = 0.5 * (loss_i2t + loss_t2i) / n as f64;

    let mut image_grads = vec![vec![0.0; d]; n];
    let mut text_grads = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            let w = g[i][j] / temperature;
            if w == 0.0 {
                continue;
            }
            for k in 0..d {
                image_grads[i][k] += w * texts[j][k];
                text_grads[j][k] += w * images[i][k];
            }
        }
    }
    ContrastiveOutput { loss, image_grads, text_grads }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::normalize;

    fn unit(v: &[f64]) -> Embedding {
        normalize(&Embedding::raw(v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let out = contrastive_loss(&[unit(&[1.0, 2.0])], &[unit(&[-3.0, 0.5])], 0.07).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn uniform_similarities_give_ln_n() {
        for n in [2usize, 3, 5] {
            let e: Vec<Embedding> = (0..n).map(|_| unit(&[1.0, 0.0])).collect();
            let out = contrastive_loss(&e, &e, 0.07).unwrap();
            assert!((out.loss - (n as f64).ln()).abs() < 1e-12, "n={n}");
        }
        let e = vec![unit(&[0.0, 1.0]); 2];
        let out = contrastive_loss(&e, &e, 0.5).unwrap();
        assert!((out.loss - 0.693_147_180_559_945_3).abs() < 1e-12);
    }

    #[test]
    fn saturated_diagonal_is_near_zero() {
        let e: Vec<Embedding> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                unit(&v)
            })
            .collect();
        let out = contrastive_loss(&e, &e, 0.01).unwrap();
        assert!(out.loss >= 0.0 && out.loss < 1e-10, "{}", out.loss);
    }

    #[test]
    fn rejects_bad_temperature_and_inputs() {
        let e = vec![unit(&[1.0, 0.0])];
        assert!(contrastive_loss(&e, &e, 0.0).is_err());
        assert!(contrastive_loss(&e, &e, -1.0).is_err());
        assert!(contrastive_loss(&[], &[], 1.0).is_err());
        let raw = vec![Embedding::raw(vec![2.0, 0.0]).unwrap()];
        assert!(matches!(contrastive_loss(&raw, &e, 1.0), Err(Error::NotNormalized(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Independent oracle: direct log-sum-exp formula over raw rows.
        let tau = 0.3;
        let loss_at = |v: &[Vec<f64>], t: &[Vec<f64>]| -> f64 {
            let n = v.len();
            let logit = |i: usize, j: usize| v[i].iter().zip(&t[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
            let mut total = 0.0;
            for i in 0..n {
                total += (0..n).map(|j| logit(i, j).exp()).sum::<f64>().ln() - logit(i, i);
                total += (0..n).map(|k| logit(k, i).exp()).sum::<f64>().ln() - logit(i, i);
            }
            total / (2.0 * n as f64)
        };
        let v = vec![vec![0.3, -0.8, 0.5], vec![0.9, 0.1, -0.4], vec![-0.2, 0.6, 0.7]];
        let t = vec![vec![0.1, 0.9, -0.3], vec![0.5, -0.5, 0.5], vec![0.7, 0.2, 0.1]];
        let out = infonce(&v, &t, tau);
        assert!((out.loss - loss_at(&v, &t)).abs() < 1e-12);
        let h = 1e-6;
        for i in 0..3 {
            for k in 0..3 {
                let (mut p, mut m) = (v.clone(), v.clone());
                p[i][k] += h;
                m[i][k] -= h;
                let fd = (loss_at(&p, &t) - loss_at(&m, &t)) / (2.0 * h);
                assert!((fd - out.image_grads[i][k]).abs() < 1e-8);
                let (mut p, mut m) = (t.clone(), t.clone());
                p[i][k] += h;
                m[i][k] -= h;
                let fd = (loss_at(&v, &p) - loss_at(&v, &m)) / (2.0 * h);
                assert!((fd - out.text_grads[i][k]).abs() < 1e-8);
            }
        }
    }
}
