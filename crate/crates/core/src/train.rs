//! Supervised training on (possibly sparse) label grids.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sparseg_tensor::{Graph, Tensor};

use crate::data::{Grid, Image};
use crate::error::{Error, Result};
use crate::losses::{one_hot, selective_cross_entropy};
use crate::network::{forward_segment, Mode, Network};
use crate::optim::{Adam, AdamConfig};

pub const DEFAULT_BATCH_SIZE: usize = 5;

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: DEFAULT_BATCH_SIZE,
            adam: AdamConfig::default(),
            seed,
        }
    }
}

/// `[N, B, H, W]` batch of images with equal shapes.
pub fn stack_images(images: &[&Image]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let (b, h, w) = (first.bands(), first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * b * h * w);
    for img in images {
        if (img.bands(), img.height(), img.width()) != (b, h, w) {
            return Err(Error::Shape(format!(
                "image of {}×{}×{} in a batch of {b}×{h}×{w}",
                img.bands(),
                img.height(),
                img.width()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::new(&[images.len(), b, h, w], data))
}

/// One Adam step of selective cross-entropy on a batch. Returns the loss.
pub fn supervised_step(
    net: &mut Network,
    adam: &mut Adam,
    images: &Tensor,
    targets: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let graph = Graph::new();
    let params = net.params.to_graph(&graph);
    let x = graph.constant(images.clone());
    let mut mode = Mode::Train {
        rng,
        stats: Some(&mut net.stats),
    };
    let logits = forward_segment(&net.spec, &params, x, &mut mode)?;
    let loss = selective_cross_entropy(logits, targets)?;
    let grads = graph.grad_tensors(loss, &params);
    adam.step(&mut net.params, &grads);
    Ok(loss.value().item())
}

/// Trains on images with label grids (0 = unknown) for `config.epochs`
/// shuffled passes. Mini-batches without any labeled pixel are skipped.
/// Returns the mean loss of every epoch.
pub fn train_supervised(
    net: &mut Network,
    images: &[&Image],
    labels: &[&Grid<u8>],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    assert_eq!(images.len(), labels.len());
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    if labels.iter().all(|l| l.data().iter().all(|&v| v == 0)) {
        return Err(Error::AllUnknown);
    }
    let classes = net.spec.classes;
    let mut rng = crate::rng(config.seed);
    let mut adam = Adam::new(config.adam.clone(), &net.params);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch_labels: Vec<&Grid<u8>> = chunk.iter().map(|&i| labels[i]).collect();
            let targets = one_hot(&batch_labels, classes)?;
            if targets.sum() == 0.0 {
                continue;
            }
            let batch_images: Vec<&Image> = chunk.iter().map(|&i| images[i]).collect();
            let x = stack_images(&batch_images)?;
            losses.push(supervised_step(net, &mut adam, &x, &targets, &mut rng)?);
        }
        history.push(losses.iter().sum::<f64>() / losses.len().max(1) as f64);
    }
    Ok(history)
}
