//! Bilevel meta-learning of a segmenter from sparsely labeled supports,
//! followed by plain fine-tuning on the few-shot support.
//!
//! Each meta-iteration adapts θ to every sampled task with one gradient step
//! of the selective loss on a sparse support batch, evaluates the dense loss
//! of the adapted weights on a query batch, and moves θ along the sum of the
//! query-loss gradients. With [`Order::Second`] the gradient flows through
//! the inner update, including its Hessian term.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sparseg_tensor::{Graph, Tensor, Var};

use crate::data::{sample_task_batch, FewShotTask, Grid, Image, SegTask, TaskDistribution};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, one_hot, selective_cross_entropy};
use crate::network::{forward_segment, BatchNormStats, Mode, Network, NetworkSpec};
use crate::optim::{Adam, AdamConfig};
use crate::sparsify::{annotate, AnnotationStyle, SparsifyConfig};
use crate::train::{stack_images, train_supervised, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    First,
    #[default]
    Second,
}

impl std::str::FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Self::First),
            "second" => Ok(Self::Second),
            other => Err(Error::Config(format!("unknown gradient order `{other}`"))),
        }
    }
}

/// Losses of one task for a given parameter list.
pub trait BilevelObjective {
    /// Loss minimized by the inner step (sparse support loss).
    fn inner_loss<'g>(&mut self, params: &[Var<'g>]) -> Result<Var<'g>>;
    /// Loss of the adapted parameters (dense query loss).
    fn outer_loss<'g>(&mut self, params: &[Var<'g>]) -> Result<Var<'g>>;
}

/// `θ_i = θ − α ∇L_inner(θ)`. With [`Order::Second`] the result stays
/// differentiable with respect to `params`, through the gradient itself.
pub fn inner_adapt<'g>(params: &[Var<'g>], inner_loss: Var<'g>, alpha: f64, order: Order) -> Vec<Var<'g>> {
    let graph = inner_loss.graph();
    let grads = graph.grad(inner_loss, params, order == Order::Second);
    params
        .iter()
        .zip(grads)
        .map(|(&p, g)| p - g.scale(alpha))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskGradient {
    pub grads: Vec<Tensor>,
    pub inner_loss: f64,
    pub outer_loss: f64,
}

/// Meta-gradient `d L_outer(θ_i) / dθ` of one task.
pub fn task_meta_gradient(
    params: &[Tensor],
    objective: &mut dyn BilevelObjective,
    alpha: f64,
    order: Order,
) -> Result<TaskGradient> {
    let graph = Graph::new();
    let theta: Vec<Var> = params.iter().map(|t| graph.param(t.clone())).collect();
    let inner = objective.inner_loss(&theta)?;
    let adapted = inner_adapt(&theta, inner, alpha, order);
    let outer = objective.outer_loss(&adapted)?;
    Ok(TaskGradient {
        grads: graph.grad_tensors(outer, &theta),
        inner_loss: inner.value().item(),
        outer_loss: outer.value().item(),
    })
}

/// A segmentation task seen by the meta-learner: sparse support batch and
/// dense query batch.
pub struct SegmentationObjective<'a> {
    pub spec: &'a NetworkSpec,
    pub support_images: Tensor,
    pub support_targets: Tensor,
    pub query_images: Tensor,
    pub query_targets: Tensor,
    pub rng: &'a mut ChaCha8Rng,
    pub stats: Option<&'a mut BatchNormStats>,
}

impl SegmentationObjective<'_> {
    fn logits<'g>(&mut self, params: &[Var<'g>], images: &Tensor) -> Result<Var<'g>> {
        let graph = params[0].graph();
        let mut mode = Mode::Train {
            rng: &mut *self.rng,
            stats: self.stats.as_deref_mut(),
        };
        forward_segment(self.spec, params, graph.constant(images.clone()), &mut mode)
    }
}

impl BilevelObjective for SegmentationObjective<'_> {
    fn inner_loss<'g>(&mut self, params: &[Var<'g>]) -> Result<Var<'g>> {
        let images = self.support_images.clone();
        let logits = self.logits(params, &images)?;
        selective_cross_entropy(logits, &self.support_targets)
    }

    fn outer_loss<'g>(&mut self, params: &[Var<'g>]) -> Result<Var<'g>> {
        let images = self.query_images.clone();
        let logits = self.logits(params, &images)?;
        cross_entropy(logits, &self.query_targets)
    }
}

fn default_alpha() -> f64 {
    0.001
}

fn default_beta() -> f64 {
    0.001
}

fn default_weight_decay() -> f64 {
    0.0005
}

fn default_batch() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    /// Inner (plain gradient descent) step size.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Outer Adam learning rate.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub meta_epochs: usize,
    pub task_batch: usize,
    /// Support images per task and meta-iteration.
    #[serde(default = "default_batch")]
    pub inner_batch: usize,
    /// Query images per task and meta-iteration.
    #[serde(default = "default_batch")]
    pub query_batch: usize,
    #[serde(default)]
    pub order: Order,
    #[serde(default)]
    pub seed: u64,
    /// Annotation styles used to sparsify meta-task supports; one is drawn
    /// per (epoch, task).
    #[serde(default)]
    pub sparsity: Vec<AnnotationStyle>,
}

impl MetaTrainConfig {
    pub fn new(meta_epochs: usize, task_batch: usize, sparsity: Vec<AnnotationStyle>, seed: u64) -> Self {
        Self {
            alpha: default_alpha(),
            beta: default_beta(),
            weight_decay: default_weight_decay(),
            meta_epochs,
            task_batch,
            inner_batch: default_batch(),
            query_batch: default_batch(),
            order: Order::Second,
            seed,
            sparsity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta > 0.0) {
            return Err(Error::Config("alpha must be >= 0 and beta > 0".into()));
        }
        if self.task_batch == 0 || self.inner_batch == 0 || self.query_batch == 0 {
            return Err(Error::Config("task, inner and query batches must be >= 1".into()));
        }
        if self.sparsity.is_empty() {
            return Err(Error::Config("meta-training needs at least one annotation style".into()));
        }
        self.sparsity.iter().try_for_each(AnnotationStyle::validate)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.beta,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaLogEntry {
    pub epoch: usize,
    pub task: String,
    pub inner_loss: Option<f64>,
    pub outer_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

/// Sparse annotations of the given samples with a per-call rng. Images
/// whose annotation fails (e.g. the class is absent) are left unlabeled.
pub(crate) fn sparse_labels(
    images: &[&crate::data::Sample],
    styles: &[AnnotationStyle],
    rng: &mut ChaCha8Rng,
) -> Vec<Grid<u8>> {
    let style = styles[rng.gen_range(0..styles.len())].clone();
    let config = SparsifyConfig::new(style, 0);
    images
        .iter()
        .map(|s| match annotate(s, &config, rng) {
            Ok(a) => a.mask.labels().clone(),
            Err(e) => {
                log::warn!("{}: {e}; using an unlabeled mask", s.id);
                Grid::filled(s.dims().0, s.dims().1, 0)
            }
        })
        .collect()
}

/// Support and query batches of one meta-task for one meta-iteration.
pub(crate) struct EpisodeBatch {
    pub support_images: Tensor,
    pub support_labels: Vec<Grid<u8>>,
    pub query_images: Tensor,
    pub query_labels: Vec<Grid<u8>>,
}

pub(crate) fn episode_batch(
    task: &SegTask,
    inner_batch: usize,
    query_batch: usize,
    styles: &[AnnotationStyle],
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeBatch> {
    if task.support.is_empty() || task.query.is_empty() {
        return Err(Error::NotEnoughSamples {
            needed: 1,
            available: 0,
        });
    }
    let pick = |pool: &[crate::data::Sample], n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        index::sample(rng, pool.len(), n.min(pool.len())).into_vec()
    };
    let s_idx = pick(&task.support, inner_batch, rng);
    let q_idx = pick(&task.query, query_batch, rng);
    let support: Vec<&crate::data::Sample> = s_idx.iter().map(|&i| &task.support[i]).collect();
    let query: Vec<&crate::data::Sample> = q_idx.iter().map(|&i| &task.query[i]).collect();
    let support_labels = sparse_labels(&support, styles, rng);
    let images = |v: &[&crate::data::Sample]| -> Result<Tensor> {
        stack_images(&v.iter().map(|s| &s.image).collect::<Vec<&Image>>())
    };
    Ok(EpisodeBatch {
        support_images: images(&support)?,
        support_labels,
        query_images: images(&query)?,
        query_labels: query.iter().map(|s| s.dense_mask.clone()).collect(),
    })
}

/// One meta-iteration over `tasks` (with their indices in the
/// distribution). Tasks whose support batch has no labeled pixel are
/// skipped with a warning. Returns one log entry per task.
pub fn meta_step(
    net: &mut Network,
    adam: &mut Adam,
    tasks: &[(usize, &SegTask)],
    config: &MetaTrainConfig,
    epoch: usize,
) -> Result<Vec<MetaLogEntry>> {
    let classes = net.spec.classes;
    let mut total: Option<Vec<Tensor>> = None;
    let mut log = Vec::with_capacity(tasks.len());
    for &(task_index, task) in tasks {
        let mut rng = crate::rng(crate::derive_seed(config.seed, &[epoch as u64, task_index as u64]));
        let batch = episode_batch(task, config.inner_batch, config.query_batch, &config.sparsity, &mut rng)?;
        let support_refs: Vec<&Grid<u8>> = batch.support_labels.iter().collect();
        let query_refs: Vec<&Grid<u8>> = batch.query_labels.iter().collect();
        let support_targets = one_hot(&support_refs, classes)?;
        if support_targets.sum() == 0.0 {
            log::warn!("epoch {epoch}: skipping task {} with an unlabeled support batch", task.name);
            log.push(MetaLogEntry {
                epoch,
                task: task.name.clone(),
                inner_loss: None,
                outer_loss: None,
                skipped: Some("support batch has no labeled pixel".into()),
            });
            continue;
        }
        let params = net.params.tensors().to_vec();
        let spec = net.spec.clone();
        let mut objective = SegmentationObjective {
            spec: &spec,
            support_images: batch.support_images,
            support_targets,
            query_images: batch.query_images,
            query_targets: one_hot(&query_refs, classes)?,
            rng: &mut rng,
            stats: Some(&mut net.stats),
        };
        let tg = task_meta_gradient(&params, &mut objective, config.alpha, config.order)?;
        total = Some(match total {
            None => tg.grads,
            Some(acc) => acc.iter().zip(&tg.grads).map(|(a, g)| a.add(g)).collect(),
        });
        log.push(MetaLogEntry {
            epoch,
            task: task.name.clone(),
            inner_loss: Some(tg.inner_loss),
            outer_loss: Some(tg.outer_loss),
            skipped: None,
        });
    }
    if let Some(grads) = total {
        adam.step(&mut net.params, &grads);
    }
    Ok(log)
}

pub struct MetaTrainOutcome {
    pub network: Network,
    pub log: Vec<MetaLogEntry>,
    pub skipped: usize,
}

/// Meta-trains a fresh network on `dist`. `on_epoch` runs after every
/// meta-iteration (e.g. for checkpoints).
pub fn meta_train(
    dist: &TaskDistribution,
    spec: &NetworkSpec,
    config: &MetaTrainConfig,
    on_epoch: &mut dyn FnMut(usize, &Network) -> Result<()>,
) -> Result<MetaTrainOutcome> {
    config.validate()?;
    if dist.is_empty() {
        return Err(Error::Config("empty task distribution".into()));
    }
    let mut net = Network::new(spec.clone(), config.seed)?;
    let mut adam = Adam::new(config.adam(), &net.params);
    let mut log = Vec::new();
    let batch = config.task_batch.min(dist.len());
    for epoch in 0..config.meta_epochs {
        let mut rng = crate::rng(crate::derive_seed(dist.sampler_seed, &[epoch as u64]));
        let tasks = sample_task_batch(dist, batch, &mut rng)?;
        let indexed: Vec<(usize, &SegTask)> = tasks
            .into_iter()
            .map(|t| (dist.tasks.iter().position(|u| std::ptr::eq(u, t)).expect("task of dist"), t))
            .collect();
        log.extend(meta_step(&mut net, &mut adam, &indexed, config, epoch)?);
        on_epoch(epoch, &net)?;
    }
    let skipped = log.iter().filter(|e| e.skipped.is_some()).count();
    Ok(MetaTrainOutcome {
        network: net,
        log,
        skipped,
    })
}

/// Supervised selective-loss training on the few-shot support only.
pub fn fine_tune(net: &Network, few_shot: &FewShotTask, config: &TrainConfig) -> Result<Network> {
    let mut tuned = net.clone();
    let images: Vec<&Image> = few_shot.support.iter().map(|s| &s.image).collect();
    let labels: Vec<&Grid<u8>> = few_shot.sparse_masks().into_iter().map(|m| m.labels()).collect();
    train_supervised(&mut tuned, &images, &labels, config)?;
    Ok(tuned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// L_in = (θ−1)⁴/4 + θ², L_out = (θ−3)²
    struct Quartic;

    impl BilevelObjective for Quartic {
        fn inner_loss<'g>(&mut self, p: &[Var<'g>]) -> Result<Var<'g>> {
            let t = p[0].sum();
            Ok(t.add_scalar(-1.0).powf(4.0).scale(0.25) + t * t)
        }

        fn outer_loss<'g>(&mut self, p: &[Var<'g>]) -> Result<Var<'g>> {
            let d = p[0].sum().add_scalar(-3.0);
            Ok(d * d)
        }
    }

    fn analytic(theta: f64, alpha: f64, second: bool) -> f64 {
        let d1 = (theta - 1.0).powi(3) + 2.0 * theta;
        let d2 = 3.0 * (theta - 1.0).powi(2) + 2.0;
        let ti = theta - alpha * d1;
        2.0 * (ti - 3.0) * if second { 1.0 - alpha * d2 } else { 1.0 }
    }

    #[test]
    fn scalar_meta_gradient_matches_closed_form() {
        for &(theta, alpha) in &[(0.3, 0.1), (2.5, 0.05), (-1.0, 0.2)] {
            let p = [Tensor::new(&[1], vec![theta])];
            for (order, second) in [(Order::Second, true), (Order::First, false)] {
                let g = task_meta_gradient(&p, &mut Quartic, alpha, order).unwrap();
                assert_relative_eq!(g.grads[0].data()[0], analytic(theta, alpha, second), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_alpha_is_identity() {
        let g = Graph::new();
        let p = g.param(Tensor::new(&[1], vec![0.7]));
        let loss = Quartic.inner_loss(&[p]).unwrap();
        let adapted = inner_adapt(&[p], loss, 0.0, Order::Second);
        assert_eq!(adapted[0].value(), p.value());
    }

    #[test]
    fn inner_step_matches_hand_formula() {
        let g = Graph::new();
        let theta = 0.4;
        let p = g.param(Tensor::new(&[1], vec![theta]));
        let loss = Quartic.inner_loss(&[p]).unwrap();
        let adapted = inner_adapt(&[p], loss, 0.1, Order::Second);
        let expected = theta - 0.1 * ((theta - 1.0).powi(3) + 2.0 * theta);
        assert_relative_eq!(adapted[0].value().data()[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn order_parses() {
        assert_eq!("first".parse::<Order>().unwrap(), Order::First);
        assert!("third".parse::<Order>().is_err());
    }
}
