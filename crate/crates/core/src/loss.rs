//! Segmentation losses over a single open-probability channel `p`, read as
//! the two-class distribution `(1 - p, p)` with class 0 = occupied and
//! class 1 = open.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROB_CLAMP: f64 = 1e-7;
pub const N_CLASSES: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} at pixel {index} is not 0 or 1")]
    InvalidLabel { index: usize, label: u8 },
    #[error("{probs} probabilities for {labels} labels")]
    Length { probs: usize, labels: usize },
    #[error("frame size {frame} does not divide {len} pixels")]
    FrameSize { frame: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy with trainable per-class weights.
    #[default]
    SmceTrain,
    Smce,
    Lovasz,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "smce_train" => Ok(Self::SmceTrain),
            "smce" => Ok(Self::Smce),
            "lovasz" => Ok(Self::Lovasz),
            other => Err(format!("unknown loss {other:?} (expected smce_train, smce or lovasz)")),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SmceTrain => "smce_train",
            Self::Smce => "smce",
            Self::Lovasz => "lovasz",
        })
    }
}

/// Trainable log-scale class weights `w_c`, initialized to zero.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: [f64; N_CLASSES],
}

/// Scalar loss with gradients wrt the open probabilities and class weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_probs: Vec<f64>,
    pub grad_weights: [f64; N_CLASSES],
}

fn check(probs: &[f64], labels: &[u8], frame: usize) -> Result<usize> {
    if probs.len() != labels.len() {
        return Err(LossError::Length {
            probs: probs.len(),
            labels: labels.len(),
        });
    }
    if frame == 0 || probs.len() % frame != 0 {
        return Err(LossError::FrameSize { frame, len: probs.len() });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 1) {
        return Err(LossError::InvalidLabel { index, label });
    }
    Ok(probs.len() / frame)
}

/// `-ln(p_label)` with `p` clamped to `[1e-7, 1 - 1e-7]`, and its gradient
/// wrt both class probabilities (zero where the clamp is active).
pub fn smce_pixel(probs: [f64; N_CLASSES], label: u8) -> Result<(f64, [f64; N_CLASSES])> {
    if label as usize >= N_CLASSES {
        return Err(LossError::InvalidLabel { index: 0, label });
    }
    let p = probs[label as usize];
    let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let mut grad = [0.0; N_CLASSES];
    if clamped == p {
        grad[label as usize] = -1.0 / p;
    }
    Ok((-clamped.ln(), grad))
}

/// Per-pixel SMCE and its derivative wrt the open probability.
fn smce_open(p: f64, label: u8) -> (f64, f64) {
    let (l, g) = smce_pixel([1.0 - p, p], label).expect("labels validated");
    (l, g[1] - g[0])
}

/// Mean per-pixel SMCE over all pixels (and so over frames).
pub fn smce(probs: &[f64], labels: &[u8]) -> Result<LossOutput> {
    check(probs, labels, probs.len().max(1))?;
    let n = probs.len() as f64;
    let mut loss = 0.0;
    let mut grad_probs = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(labels) {
        let (l, g) = smce_open(p, y);
        loss += l;
        grad_probs.push(g / n);
    }
    Ok(LossOutput {
        loss: loss / n,
        grad_probs,
        grad_weights: [0.0; N_CLASSES],
    })
}

/// Per frame: `sum_c [exp(-w_c) * mean_{i in c} SMCE_i + |w_c|]` over the
/// classes present in the frame's labels; averaged over frames.
pub fn smce_train_loss(probs: &[f64], labels: &[u8], frame: usize, weights: &ClassWeights) -> Result<LossOutput> {
    let frames = check(probs, labels, frame)?;
    let mut loss = 0.0;
    let mut grad_probs = vec![0.0; probs.len()];
    let mut grad_weights = [0.0; N_CLASSES];
    let inv_frames = 1.0 / frames as f64;
    for f in 0..frames {
        let range = f * frame..(f + 1) * frame;
        let mut sum = [0.0; N_CLASSES];
        let mut count = [0usize; N_CLASSES];
        let mut pixel_grad = vec![0.0; frame];
        for (k, i) in range.clone().enumerate() {
            let (l, g) = smce_open(probs[i], labels[i]);
            let c = labels[i] as usize;
            sum[c] += l;
            count[c] += 1;
            pixel_grad[k] = g;
        }
        for c in 0..N_CLASSES {
            if count[c] == 0 {
                continue;
            }
            let w = weights.w[c];
            let mean = sum[c] / count[c] as f64;
            let scale = (-w).exp();
            loss += inv_frames * (scale * mean + w.abs());
            grad_weights[c] += inv_frames * (-scale * mean + sign(w));
        }
        for (k, i) in range.enumerate() {
            let c = labels[i] as usize;
            grad_probs[i] = inv_frames * (-weights.w[c]).exp() * pixel_grad[k] / count[c] as f64;
        }
    }
    Ok(LossOutput {
        loss,
        grad_probs,
        grad_weights,
    })
}

fn sign(w: f64) -> f64 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the Lovász extension of the Jaccard loss at a
/// descending-sorted error vector, given ground-truth membership in sorted
/// order.
fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut grad = Vec::with_capacity(gt_sorted.len());
    let (mut cum_gt, mut cum_neg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            cum_gt += 1.0;
        } else {
            cum_neg += 1.0;
        }
        let intersection = gts - cum_gt;
        let union = gts + cum_neg;
        let jaccard = 1.0 - intersection / union;
        grad.push(jaccard - prev);
        prev = jaccard;
    }
    grad
}

/// Lovász-softmax for one frame. Returns the loss and `dL/dp_open`.
fn lovasz_frame(probs: &[f64], labels: &[u8]) -> (f64, Vec<f64>) {
    let n = probs.len();
    let mut grad = vec![0.0; n];
    let mut total = 0.0;
    let mut present = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    for c in 0..N_CLASSES as u8 {
        if !labels.contains(&c) {
            continue;
        }
        present += 1;
        let class_prob = |i: usize| if c == 1 { probs[i] } else { 1.0 - probs[i] };
        let errors: Vec<f64> = (0..n)
            .map(|i| {
                let p = class_prob(i);
                if labels[i] == c {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        let gt_sorted: Vec<bool> = order.iter().map(|&i| labels[i] == c).collect();
        let g = lovasz_grad(&gt_sorted);
        for (rank, &i) in order.iter().enumerate() {
            total += errors[i] * g[rank];
            // d error / d p_c is -1 on class pixels, +1 elsewhere; p_0 = 1 - p
            let de_dpc = if labels[i] == c { -1.0 } else { 1.0 };
            let dpc_dp = if c == 1 { 1.0 } else { -1.0 };
            grad[i] += g[rank] * de_dpc * dpc_dp;
        }
    }
    let inv = 1.0 / present as f64;
    grad.iter_mut().for_each(|v| *v *= inv);
    (total * inv, grad)
}

/// Lovász-softmax averaged over the classes present in each frame, then
/// over frames.
pub fn lovasz_softmax(probs: &[f64], labels: &[u8], frame: usize) -> Result<LossOutput> {
    let frames = check(probs, labels, frame)?;
    let mut loss = 0.0;
    let mut grad_probs = Vec::with_capacity(probs.len());
    for f in 0..frames {
        let r = f * frame..(f + 1) * frame;
        let (l, g) = lovasz_frame(&probs[r.clone()], &labels[r]);
        loss += l / frames as f64;
        grad_probs.extend(g.into_iter().map(|v| v / frames as f64));
    }
    Ok(LossOutput {
        loss,
        grad_probs,
        grad_weights: [0.0; N_CLASSES],
    })
}

/// Dispatches on `kind`; `frame` is the pixel count of one frame.
pub fn compute_loss(
    kind: LossKind,
    probs: &[f64],
    labels: &[u8],
    frame: usize,
    weights: &ClassWeights,
) -> Result<LossOutput> {
    match kind {
        LossKind::SmceTrain => smce_train_loss(probs, labels, frame, weights),
        LossKind::Smce => {
            check(probs, labels, frame)?;
            smce(probs, labels)
        }
        LossKind::Lovasz => lovasz_softmax(probs, labels, frame),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<u8>) {
        let probs = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        (probs, labels)
    }

    #[test]
    fn pixel_values() {
        assert_eq!(smce_pixel([0.0, 1.0], 1).unwrap().0, -(1.0f64 - PROB_CLAMP).ln());
        assert!((smce_pixel([0.5, 0.5], 0).unwrap().0 - 2f64.ln()).abs() < 1e-15);
        assert_eq!(smce_pixel([0.5, 0.5], 2), Err(LossError::InvalidLabel { index: 0, label: 2 }));
        // clamp saturates the gradient
        assert_eq!(smce_pixel([1.0, 0.0], 1).unwrap().1, [0.0, 0.0]);
    }

    #[test]
    fn pixel_gradient() {
        for (p, y) in [([0.3, 0.7], 1u8), ([0.9, 0.1], 0), ([0.2, 0.8], 0)] {
            let (_, g) = smce_pixel(p, y).unwrap();
            let err = finite_diff_gradcheck(|v| smce_pixel([v[0], v[1]], y).unwrap().0, &p, &g, 1e-6);
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn zero_weights_reduce_to_class_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (probs, labels) = random_frame(&mut rng, 50);
        let out = smce_train_loss(&probs, &labels, 50, &ClassWeights::default()).unwrap();
        let mut expect = 0.0;
        for c in 0..2u8 {
            let vals: Vec<f64> = probs
                .iter()
                .zip(&labels)
                .filter(|(_, &y)| y == c)
                .map(|(&p, _)| -(if c == 1 { p } else { 1.0 - p }).ln())
                .collect();
            expect += vals.iter().sum::<f64>() / vals.len() as f64;
        }
        assert_eq!(out.loss, expect);
    }

    #[test]
    fn perfect_prediction_floor() {
        let labels = [1u8, 0, 1, 0];
        let probs: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
        let out = smce_train_loss(&probs, &labels, 4, &ClassWeights::default()).unwrap();
        assert!((out.loss - 2.0 * -(1.0f64 - 1e-7).ln()).abs() < 1e-18);
    }

    #[test]
    fn smce_train_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (probs, labels) = random_frame(&mut rng, 3 * 20);
        let w = ClassWeights { w: [0.4, -0.7] };
        let out = smce_train_loss(&probs, &labels, 20, &w).unwrap();
        let err = finite_diff_gradcheck(
            |v| smce_train_loss(&probs, &labels, 20, &ClassWeights { w: [v[0], v[1]] }).unwrap().loss,
            &w.w,
            &out.grad_weights,
            1e-6,
        );
        assert!(err < 1e-6, "w: {err}");
        let err = finite_diff_gradcheck(
            |v| smce_train_loss(v, &labels, 20, &w).unwrap().loss,
            &probs,
            &out.grad_probs,
            1e-7,
        );
        assert!(err < 1e-6, "p: {err}");
    }

    #[test]
    fn absent_class_contributes_nothing() {
        let probs = [0.8, 0.6];
        let labels = [1u8, 1];
        let w = ClassWeights { w: [3.0, 0.0] };
        let out = smce_train_loss(&probs, &labels, 2, &w).unwrap();
        assert_eq!(out.grad_weights[0], 0.0);
        assert!((out.loss - (-(0.8f64).ln() - (0.6f64).ln()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn weight_scan_minimum() {
        // equal per-class means m: per class e^{-w} m + |w| is minimized at w = ln m
        let labels = [0u8, 0, 1, 1];
        let p = (-2.5f64).exp();
        let probs = [1.0 - p, 1.0 - p, p, p];
        let mean = 2.5;
        let eval = |w: f64| smce_train_loss(&probs, &labels, 4, &ClassWeights { w: [w, w] }).unwrap().loss;
        let best = (0..=4000)
            .map(|k| k as f64 * 1e-3)
            .min_by(|&a, &b| eval(a).total_cmp(&eval(b)))
            .unwrap();
        assert!((best - f64::ln(mean)).abs() <= 1e-3, "{best}");
    }

    #[test]
    fn smce_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (probs, labels) = random_frame(&mut rng, 30);
        let out = smce(&probs, &labels).unwrap();
        let err = finite_diff_gradcheck(|v| smce(v, &labels).unwrap().loss, &probs, &out.grad_probs, 1e-7);
        assert!(err < 1e-6, "{err}");
    }

    /// Choquet integral of the Jaccard set function tabulated over all
    /// subsets, averaged over present classes.
    fn lovasz_enumerated(probs: &[f64], labels: &[u8]) -> f64 {
        let n = probs.len();
        let mut total = 0.0;
        let mut present = 0;
        for c in 0..2u8 {
            if !labels.contains(&c) {
                continue;
            }
            present += 1;
            let fg: u32 = (0..n).filter(|&i| labels[i] == c).map(|i| 1 << i).sum();
            let table: Vec<f64> = (0u32..1 << n)
                .map(|m| f64::from(m.count_ones()) / f64::from((m | fg).count_ones().max(1)))
                .collect();
            let errors: Vec<f64> = (0..n)
                .map(|i| {
                    let p = if c == 1 { probs[i] } else { 1.0 - probs[i] };
                    if labels[i] == c {
                        1.0 - p
                    } else {
                        p
                    }
                })
                .collect();
            let mut levels = errors.clone();
            levels.sort_by(|a, b| b.total_cmp(a));
            levels.dedup();
            levels.push(0.0);
            for w in levels.windows(2) {
                let set: u32 = (0..n).filter(|&i| errors[i] >= w[0]).map(|i| 1 << i).sum();
                total += (w[0] - w[1]) * table[set as usize];
            }
        }
        total / present as f64
    }

    #[test]
    fn lovasz_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 1..=12 {
            for _ in 0..5 {
                let (mut probs, labels) = random_frame(&mut rng, n);
                if n > 3 {
                    probs[1] = probs[0]; // ties
                }
                let got = lovasz_softmax(&probs, &labels, n).unwrap().loss;
                let expect = lovasz_enumerated(&probs, &labels);
                assert!((got - expect).abs() < 1e-9, "n={n}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn lovasz_hard_predictions_are_one_minus_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 40;
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let probs: Vec<f64> = pred.iter().map(|&p| f64::from(p)).collect();
            let mut expect = 0.0;
            let mut present = 0;
            for c in 0..2u8 {
                if !labels.contains(&c) {
                    continue;
                }
                present += 1;
                let inter = (0..n).filter(|&i| labels[i] == c && pred[i] == c).count() as f64;
                let union = (0..n).filter(|&i| labels[i] == c || pred[i] == c).count() as f64;
                expect += 1.0 - inter / union;
            }
            let got = lovasz_softmax(&probs, &labels, n).unwrap().loss;
            assert!((got - expect / present as f64).abs() < 1e-9);
        }
        let labels = [1u8, 0, 1];
        assert_eq!(lovasz_softmax(&[1.0, 0.0, 1.0], &labels, 3).unwrap().loss, 0.0);
    }

    #[test]
    fn one_wrong_pixel_loss_shrinks_with_frame_size() {
        let mut prev = f64::INFINITY;
        for n in 2..=8 {
            let labels = vec![1u8; n];
            let mut probs = vec![1.0; n];
            probs[0] = 0.0;
            let l = lovasz_softmax(&probs, &labels, n).unwrap().loss;
            assert!((l - lovasz_enumerated(&probs, &labels)).abs() < 1e-12);
            assert!(l > 0.0 && l < prev);
            prev = l;
        }
    }

    #[test]
    fn lovasz_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (probs, labels) = random_frame(&mut rng, 2 * 10);
        let out = lovasz_softmax(&probs, &labels, 10).unwrap();
        // piecewise linear: exact away from ties
        let err = finite_diff_gradcheck(|v| lovasz_softmax(v, &labels, 10).unwrap().loss, &probs, &out.grad_probs, 1e-8);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn losses_are_permutation_invariant_within_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (probs, labels) = random_frame(&mut rng, 16);
        let mut idx: Vec<usize> = (0..16).collect();
        idx.reverse();
        let p2: Vec<f64> = idx.iter().map(|&i| probs[i]).collect();
        let l2: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        let w = ClassWeights { w: [0.2, -0.1] };
        for kind in [LossKind::SmceTrain, LossKind::Smce, LossKind::Lovasz] {
            let a = compute_loss(kind, &probs, &labels, 16, &w).unwrap().loss;
            let b = compute_loss(kind, &p2, &l2, 16, &w).unwrap().loss;
            assert!((a - b).abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(smce(&[0.5], &[3]), Err(LossError::InvalidLabel { .. })));
        assert!(matches!(smce_train_loss(&[0.5; 4], &[0; 3], 4, &ClassWeights::default()), Err(LossError::Length { .. })));
        assert!(matches!(lovasz_softmax(&[0.5; 4], &[0; 4], 3), Err(LossError::FrameSize { .. })));
    }
}
