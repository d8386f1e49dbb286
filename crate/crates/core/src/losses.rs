//! Cross-entropy losses and the prototype machinery.
//!
//! Label grids use 0 for unknown and `1..=K` for classes; class `k` maps to
//! channel `k - 1` of logits and probabilities.

use sparseg_tensor::{Graph, Tensor, Var};

use crate::data::{Grid, UNKNOWN};
use crate::error::{Error, Result};

/// `[N, K, H, W]` indicator of the labeled pixels; unknown pixels are all zero.
pub fn one_hot(masks: &[&Grid<u8>], classes: usize) -> Result<Tensor> {
    let Some(first) = masks.first() else {
        return Err(Error::Shape("empty mask batch".into()));
    };
    let (h, w) = first.dims();
    let mut out = Tensor::zeros(&[masks.len(), classes, h, w]);
    let data = out.data_mut();
    for (n, mask) in masks.iter().enumerate() {
        if mask.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "mask {n} is {:?}, expected {:?}",
                mask.dims(),
                (h, w)
            )));
        }
        for (i, &v) in mask.data().iter().enumerate() {
            if v == UNKNOWN {
                continue;
            }
            let k = v as usize;
            if k > classes {
                return Err(Error::Shape(format!("label {v} exceeds class count {classes}")));
            }
            data[(n * classes + k - 1) * h * w + i] = 1.0;
        }
    }
    Ok(out)
}

fn check_targets(logits: &[usize], targets: &Tensor) -> Result<()> {
    if logits != targets.shape() {
        return Err(Error::Shape(format!(
            "logits {logits:?} do not match targets {:?}",
            targets.shape()
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of the true class over every pixel.
///
/// `targets` is a one-hot tensor with exactly one 1 per pixel.
pub fn cross_entropy<'g>(logits: Var<'g>, targets: &Tensor) -> Result<Var<'g>> {
    check_targets(&logits.shape(), targets)?;
    let [n, _, h, w] = logits.shape()[..] else { unreachable!() };
    let labeled = targets.sum() as usize;
    if labeled != n * h * w {
        return Err(Error::Shape(format!(
            "dense targets must label all {} pixels, {labeled} labeled",
            n * h * w
        )));
    }
    let t = logits.graph().constant(targets.clone());
    Ok(-(logits.log_softmax_channels() * t).sum().scale(1.0 / labeled as f64))
}

/// Cross-entropy summed over labeled pixels and divided by their count.
/// Unknown pixels contribute nothing to the value or the gradient.
pub fn selective_cross_entropy<'g>(logits: Var<'g>, targets: &Tensor) -> Result<Var<'g>> {
    check_targets(&logits.shape(), targets)?;
    let labeled = targets.sum();
    if labeled == 0.0 {
        return Err(Error::AllUnknown);
    }
    let t = logits.graph().constant(targets.clone());
    Ok(-(logits.log_softmax_channels() * t).sum().scale(1.0 / labeled))
}

/// Per-class labeled-pixel counts `N_k` of a one-hot target tensor.
pub fn class_counts(targets: &Tensor) -> Vec<usize> {
    let (n, k, h, w) = targets.dims4();
    let data = targets.data();
    (0..k)
        .map(|c| {
            (0..n)
                .map(|i| {
                    let start = (i * k + c) * h * w;
                    data[start..start + h * w].iter().filter(|&&v| v != 0.0).count()
                })
                .sum()
        })
        .collect()
}

/// Class prototypes `[K, D, 1, 1]`: the mean feature vector of all labeled
/// pixels of each class, pooled over the whole batch before dividing.
pub fn prototypes<'g>(features: Var<'g>, targets: &Tensor) -> Result<Var<'g>> {
    let fs = features.shape();
    let ts = targets.shape();
    if fs.len() != 4 || ts.len() != 4 || fs[0] != ts[0] || fs[2..] != ts[2..] {
        return Err(Error::Shape(format!("features {fs:?} do not match targets {ts:?}")));
    }
    let counts = class_counts(targets);
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingPrototype { class: k as u8 + 1 });
    }
    let graph = features.graph();
    let d = fs[1];
    let sums = features.conv2d_weight(graph.constant(targets.clone()), 1, 1, 0);
    let inv = Tensor::from_fn(&[counts.len(), d, 1, 1], |i| 1.0 / counts[i / d] as f64);
    Ok(sums * graph.constant(inv))
}

/// Log-probabilities `[N, K, H, W]` of a softmax over negative squared
/// euclidean distances to the prototypes.
pub fn proto_log_probs<'g>(features: Var<'g>, prototypes: Var<'g>) -> Var<'g> {
    let [n, _, h, w] = features.shape()[..] else {
        panic!("features must be [N, D, H, W]")
    };
    let k = prototypes.shape()[0];
    let shape = [n, k, h, w];
    let f_sq = (features * features).sum_over_channels().expand_over_channels(k);
    let c_sq = (prototypes * prototypes)
        .sum_over_channels()
        .reshape(&[k])
        .expand_channel(&shape);
    let cross = features.conv2d(prototypes, 0);
    let dist = f_sq - cross.scale(2.0) + c_sq;
    (-dist).log_softmax_channels()
}

/// Negative log-probability of the true class summed over the labeled
/// pixels of each query image, averaged over images.
pub fn proto_loss<'g>(log_probs: Var<'g>, targets: &Tensor) -> Result<Var<'g>> {
    check_targets(&log_probs.shape(), targets)?;
    if targets.sum() == 0.0 {
        return Err(Error::AllUnknown);
    }
    let images = targets.shape()[0] as f64;
    let t = log_probs.graph().constant(targets.clone());
    Ok(-(log_probs * t).sum().scale(1.0 / images))
}

/// Plain-value prototypes `c_k` and counts `N_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    /// `[K, D, 1, 1]`
    pub vectors: Tensor,
    pub counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn compute(features: &Tensor, targets: &Tensor) -> Result<Self> {
        let graph = Graph::new();
        let c = prototypes(graph.constant(features.clone()), targets)?;
        Ok(Self {
            vectors: c.value(),
            counts: class_counts(targets),
        })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    /// Prototype of class `k` (1-based).
    pub fn vector(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[(k - 1) * d..k * d]
    }

    /// Class probabilities `[N, K, H, W]` for every pixel of `features`.
    pub fn probabilities(&self, features: &Tensor) -> Tensor {
        let graph = Graph::new();
        let lp = proto_log_probs(graph.constant(features.clone()), graph.constant(self.vectors.clone()));
        lp.value().map(f64::exp)
    }

    /// Per-pixel argmax labels in `1..=K`, one grid per image.
    pub fn predict(&self, features: &Tensor) -> Vec<Grid<u8>> {
        argmax_labels(&self.probabilities(features))
    }
}

/// Per-pixel argmax over channels as 1-based labels.
pub fn argmax_labels(scores: &Tensor) -> Vec<Grid<u8>> {
    let (n, k, h, w) = scores.dims4();
    let data = scores.data();
    (0..n)
        .map(|i| {
            Grid::from_fn(h, w, |y, x| {
                let mut best = 0;
                for c in 1..k {
                    if data[((i * k + c) * h + y) * w + x] > data[((i * k + best) * h + y) * w + x] {
                        best = c;
                    }
                }
                best as u8 + 1
            })
        })
        .collect()
}
