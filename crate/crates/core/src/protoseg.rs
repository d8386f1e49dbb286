//! Episodic training of a pixel embedding and prototype-based segmentation.
//!
//! An episode embeds a sparsely labeled support batch, averages the
//! embeddings of each class over every labeled pixel of the batch, and
//! scores a densely labeled query batch by softmax over negative squared
//! distances to those prototypes. At test time the few-shot support gives
//! the prototypes and no parameter changes.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sparseg_tensor::{Graph, Tensor};

use crate::data::{sample_task_batch, FewShotTask, Grid, Image, SegTask, TaskDistribution};
use crate::error::{Error, Result};
use crate::losses::{one_hot, proto_log_probs, proto_loss, prototypes, PrototypeSet};
use crate::network::{forward_embed, Mode, Network, NetworkSpec};
use crate::optim::{Adam, AdamConfig};
use crate::sparsify::AnnotationStyle;
use crate::train::stack_images;
use crate::weasel::{episode_batch, MetaLogEntry, MetaTrainOutcome};

fn default_batch() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtoTrainConfig {
    pub meta_epochs: usize,
    pub task_batch: usize,
    #[serde(default = "default_batch")]
    pub support_batch: usize,
    #[serde(default = "default_batch")]
    pub query_batch: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    /// Annotation styles for episode supports; one is drawn per (epoch, task).
    #[serde(default)]
    pub sparsity: Vec<AnnotationStyle>,
}

impl ProtoTrainConfig {
    pub fn new(meta_epochs: usize, task_batch: usize, sparsity: Vec<AnnotationStyle>, seed: u64) -> Self {
        Self {
            meta_epochs,
            task_batch,
            support_batch: default_batch(),
            query_batch: default_batch(),
            adam: AdamConfig::default(),
            seed,
            sparsity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_batch == 0 || self.support_batch == 0 || self.query_batch == 0 {
            return Err(Error::Config("task, support and query batches must be >= 1".into()));
        }
        if self.sparsity.is_empty() {
            return Err(Error::Config("episodes need at least one annotation style".into()));
        }
        self.sparsity.iter().try_for_each(AnnotationStyle::validate)
    }
}

/// One episode: prototypes from the support, loss on the query, one
/// optimizer step. Returns the episode loss.
pub fn episode_step(
    net: &mut Network,
    adam: &mut Adam,
    support_images: &Tensor,
    support_labels: &[&Grid<u8>],
    query_images: &Tensor,
    query_labels: &[&Grid<u8>],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let classes = net.spec.classes;
    let support_targets = one_hot(support_labels, classes)?;
    let query_targets = one_hot(query_labels, classes)?;
    let graph = Graph::new();
    let params = net.params.to_graph(&graph);
    let mut mode = Mode::Train {
        rng,
        stats: Some(&mut net.stats),
    };
    let support = forward_embed(&net.spec, &params, graph.constant(support_images.clone()), &mut mode)?;
    let protos = prototypes(support, &support_targets)?;
    let query = forward_embed(&net.spec, &params, graph.constant(query_images.clone()), &mut mode)?;
    let loss = proto_loss(proto_log_probs(query, protos), &query_targets)?;
    let grads = graph.grad_tensors(loss, &params);
    adam.step(&mut net.params, &grads);
    Ok(loss.value().item())
}

/// Episodic training of a fresh embedder on `dist`. Tasks whose support
/// batch lacks a class are skipped with a warning and counted.
pub fn meta_train_proto(
    dist: &TaskDistribution,
    spec: &NetworkSpec,
    config: &ProtoTrainConfig,
    on_epoch: &mut dyn FnMut(usize, &Network) -> Result<()>,
) -> Result<MetaTrainOutcome> {
    config.validate()?;
    if dist.is_empty() {
        return Err(Error::Config("empty task distribution".into()));
    }
    let mut net = Network::new(spec.clone(), config.seed)?;
    let mut adam = Adam::new(config.adam.clone(), &net.params);
    let mut log = Vec::new();
    let batch = config.task_batch.min(dist.len());
    for epoch in 0..config.meta_epochs {
        let mut rng = crate::rng(crate::derive_seed(dist.sampler_seed, &[epoch as u64]));
        for task in sample_task_batch(dist, batch, &mut rng)? {
            let index = dist.tasks.iter().position(|u| std::ptr::eq(u, task)).expect("task of dist");
            log.push(run_episode(&mut net, &mut adam, task, index, config, epoch)?);
        }
        on_epoch(epoch, &net)?;
    }
    let skipped = log.iter().filter(|e| e.skipped.is_some()).count();
    Ok(MetaTrainOutcome {
        network: net,
        log,
        skipped,
    })
}

fn run_episode(
    net: &mut Network,
    adam: &mut Adam,
    task: &SegTask,
    index: usize,
    config: &ProtoTrainConfig,
    epoch: usize,
) -> Result<MetaLogEntry> {
    let mut rng = crate::rng(crate::derive_seed(config.seed, &[epoch as u64, index as u64]));
    let b = episode_batch(task, config.support_batch, config.query_batch, &config.sparsity, &mut rng)?;
    let support: Vec<&Grid<u8>> = b.support_labels.iter().collect();
    let query: Vec<&Grid<u8>> = b.query_labels.iter().collect();
    let mut entry = MetaLogEntry {
        epoch,
        task: task.name.clone(),
        inner_loss: None,
        outer_loss: None,
        skipped: None,
    };
    match episode_step(net, adam, &b.support_images, &support, &b.query_images, &query, &mut rng) {
        Ok(loss) => entry.outer_loss = Some(loss),
        Err(e @ Error::MissingPrototype { .. }) => {
            log::warn!("epoch {epoch}: skipping task {}: {e}", task.name);
            entry.skipped = Some(e.to_string());
        }
        Err(e) => return Err(e),
    }
    Ok(entry)
}

/// Prototypes of the few-shot support, computed in inference mode.
pub fn support_prototypes(net: &Network, few_shot: &FewShotTask) -> Result<PrototypeSet> {
    let images: Vec<&Image> = few_shot.support.iter().map(|s| &s.image).collect();
    let labels: Vec<&Grid<u8>> = few_shot.sparse_masks().into_iter().map(|m| m.labels()).collect();
    let features = net.embed(&stack_images(&images)?)?;
    PrototypeSet::compute(&features, &one_hot(&labels, net.spec.classes)?)
}

/// Labels `1..=K` for `images` by nearest prototype.
pub fn predict_images(net: &Network, protos: &PrototypeSet, images: &[&Image]) -> Result<Vec<Grid<u8>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(4) {
        out.extend(protos.predict(&net.embed(&stack_images(chunk)?)?));
    }
    Ok(out)
}

/// Segments the query images of `few_shot`. Read-only on the network.
pub fn predict(net: &Network, few_shot: &FewShotTask) -> Result<Vec<Grid<u8>>> {
    let protos = support_prototypes(net, few_shot)?;
    let images: Vec<&Image> = few_shot.query.images().iter().collect();
    predict_images(net, &protos, &images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Sample, FOREGROUND};
    use crate::sparsify::{grid_at, Annotation};

    fn stripes(id: &str, offset: usize) -> Sample {
        let mask = Grid::from_fn(16, 16, |_, x| if (x + offset) % 8 < 4 { FOREGROUND } else { 1 });
        let image = Image::new(1, 16, 16, mask.data().iter().map(|&v| if v == FOREGROUND { 1.0 } else { -1.0 }).collect());
        Sample::new(id, image, mask, 2).unwrap()
    }

    fn few_shot(support: Vec<Sample>, query: &[Sample], annotations: Vec<Annotation>) -> FewShotTask {
        let support = support
            .into_iter()
            .zip(&annotations)
            .map(|(mut s, a)| {
                s.sparse_mask = Some(a.mask.clone());
                s
            })
            .collect();
        FewShotTask {
            name: "stripes".into(),
            dataset: "stripes".into(),
            target_class: FOREGROUND,
            support,
            annotations,
            query: crate::data::QuerySet::new(query),
        }
    }

    #[test]
    fn separable_episode_converges() {
        let spec = NetworkSpec::with_widths(1, 2, [4, 4, 4]);
        let mut net = Network::new(spec, 0).unwrap();
        let samples = [stripes("a", 0), stripes("b", 2)];
        let images = stack_images(&samples.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
        let labels: Vec<&Grid<u8>> = samples.iter().map(|s| &s.dense_mask).collect();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            &net.params,
        );
        let mut rng = crate::rng(0);
        let first = episode_step(&mut net, &mut adam, &images, &labels, &images, &labels, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..40 {
            last = episode_step(&mut net, &mut adam, &images, &labels, &images, &labels, &mut rng).unwrap();
        }
        assert!(last < 0.05 * first, "{first} -> {last}");
        let task = few_shot(
            samples.to_vec(),
            &samples,
            samples.iter().map(|s| grid_at(&s.dense_mask, 2, 2, (0, 0))).collect(),
        );
        let before = net.clone();
        let pred = predict(&net, &task).unwrap();
        assert_eq!(net, before);
        for (p, s) in pred.iter().zip(&samples) {
            assert_eq!(p, &s.dense_mask);
        }
    }

    #[test]
    fn missing_class_is_reported() {
        let net = Network::new(NetworkSpec::with_widths(1, 2, [2, 4, 8]), 0).unwrap();
        let s = stripes("a", 0);
        let mut labels = Grid::filled(16, 16, 0);
        labels.set(0, 5, 1);
        let a = Annotation {
            mask: crate::data::SparseMask::new(labels, 2),
            degenerate: true,
            regions_selected: 1,
            warnings: vec![],
        };
        let task = few_shot(vec![s.clone()], &[s], vec![a]);
        assert!(matches!(predict(&net, &task), Err(Error::MissingPrototype { class: 2 })));
    }
}
