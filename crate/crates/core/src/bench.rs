//! Baselines, the Jaccard score and leave-one-task-out experiments.
//!
//! An experiment prepares one model per run (meta-training, or supervised
//! pre-training for the fine-tuning baseline), then for every fold of the
//! target dataset draws a few-shot support from the training partition,
//! adapts, segments the whole validation partition and scores it.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_dataset, make_support, split_folds, FewShotTask, Fold, Grid, Image, Manifest, Sample, SegTask,
    TaskDistribution, FOREGROUND,
};
use crate::error::{Error, Result};
use crate::losses::argmax_labels;
use crate::network::{Network, NetworkSpec};
use crate::optim::AdamConfig;
use crate::protoseg::{self, meta_train_proto, ProtoTrainConfig};
use crate::report::{FoldRecord, MetricReport};
use crate::sparsify::{count_user_inputs, AnnotationStyle, SparsifyConfig};
use crate::synth::{synth_meta_dataset, SynthSpec};
use crate::train::{stack_images, train_supervised, TrainConfig};
use crate::weasel::{fine_tune, meta_train, MetaLogEntry, MetaTrainConfig, Order};

pub use crate::report::Method;

/// |pred ∩ gt| / |pred ∪ gt| for `class`; 1 when both are empty.
pub fn jaccard(pred: &Grid<u8>, gt: &Grid<u8>, class: u8) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} against ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == class, g == class);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Jaccard averaged over images.
pub fn mean_jaccard(preds: &[Grid<u8>], gts: &[Grid<u8>], class: u8) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += jaccard(p, g, class)?;
    }
    Ok(total / preds.len() as f64)
}

/// Argmax segmentation of `images` in inference mode.
pub fn segment(net: &Network, images: &[&Image]) -> Result<Vec<Grid<u8>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(8) {
        out.extend(argmax_labels(&net.logits(&stack_images(chunk)?)?));
    }
    Ok(out)
}

/// Randomly initialized network trained on the few-shot support only.
pub fn train_from_scratch(
    spec: &NetworkSpec,
    few_shot: &FewShotTask,
    init_seed: u64,
    tune: &TrainConfig,
) -> Result<Network> {
    fine_tune(&Network::new(spec.clone(), init_seed)?, few_shot, tune)
}

/// Dense supervised training on the support partition of `source`,
/// starting from a network initialized with `pre.seed`.
pub fn pretrain_on_source(spec: &NetworkSpec, source: &SegTask, pre: &TrainConfig) -> Result<Network> {
    let mut net = Network::new(spec.clone(), pre.seed)?;
    let images: Vec<&Image> = source.support.iter().map(|s| &s.image).collect();
    let labels: Vec<&Grid<u8>> = source.support.iter().map(|s| &s.dense_mask).collect();
    train_supervised(&mut net, &images, &labels, pre)?;
    Ok(net)
}

/// Pre-trains on `source` and tunes on the few-shot support. With zero
/// pre-training epochs this is [`train_from_scratch`] with `pre.seed`.
pub fn finetune_baseline(
    spec: &NetworkSpec,
    source: &SegTask,
    few_shot: &FewShotTask,
    pre: &TrainConfig,
    tune: &TrainConfig,
) -> Result<Network> {
    if source.dataset == few_shot.dataset {
        return Err(Error::Leakage(format!(
            "source task {} comes from the target dataset {}",
            source.name, few_shot.dataset
        )));
    }
    fine_tune(&pretrain_on_source(spec, source, pre)?, few_shot, tune)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Medical,
    RemoteSensing,
    Synthetic,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medical" => Ok(Self::Medical),
            "remote-sensing" => Ok(Self::RemoteSensing),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Self::Medical => "medical",
            Self::RemoteSensing => "remote-sensing",
            Self::Synthetic => "synthetic",
        }
    }

    /// Epoch counts and task batch of the preset as a config fragment.
    pub fn defaults(self, method: Option<Method>) -> toml::Table {
        // (meta epochs, task batch, tune epochs per method, pretrain epochs)
        let (meta, task_batch, pretrain) = match self {
            Self::Medical => (2000, 6, 200),
            Self::RemoteSensing => (200, 4, 100),
            Self::Synthetic => (100, 3, 40),
        };
        let tune = match (self, method) {
            (Self::Medical, _) => 80,
            (Self::RemoteSensing, Some(Method::Finetune)) => 80,
            (Self::RemoteSensing, Some(Method::Scratch)) => 100,
            (Self::RemoteSensing, _) => 40,
            (Self::Synthetic, _) => 40,
        };
        let mut text = format!(
            "[meta]\nepochs = {meta}\ntask_batch = {task_batch}\n\
             [tune]\nepochs = {tune}\npretrain_epochs = {pretrain}\n"
        );
        if self == Self::Synthetic {
            text.push_str("[network]\nwidths = [8, 16, 32]\n");
        }
        toml::from_str(&text).expect("preset fragment parses")
    }
}

fn default_folds() -> usize {
    5
}

fn default_widths() -> [usize; 3] {
    [32, 64, 128]
}

fn default_dropout() -> f64 {
    0.1
}

fn default_rate() -> f64 {
    0.001
}

fn default_batch() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_widths")]
    pub widths: [usize; 3],
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            widths: default_widths(),
            dropout: default_dropout(),
        }
    }
}

/// Meta-training settings shared by both meta-learners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    #[serde(default)]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub task_batch: usize,
    #[serde(default = "default_rate")]
    pub alpha: f64,
    #[serde(default = "default_rate")]
    pub beta: f64,
    #[serde(default)]
    pub order: Order,
    #[serde(default = "default_batch")]
    pub inner_batch: usize,
    #[serde(default = "default_batch")]
    pub query_batch: usize,
    /// Styles for meta-task supports; empty means the experiment's styles.
    #[serde(default)]
    pub sparsity: Vec<AnnotationStyle>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            epochs: 0,
            task_batch: default_batch(),
            alpha: default_rate(),
            beta: default_rate(),
            order: Order::Second,
            inner_batch: default_batch(),
            query_batch: default_batch(),
            sparsity: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    #[serde(default)]
    pub epochs: usize,
    /// Source pre-training epochs of the fine-tuning baseline.
    #[serde(default)]
    pub pretrain_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            epochs: 0,
            pretrain_epochs: 0,
            batch_size: default_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated shapes; the held-out family is the target.
    Synthetic {
        #[serde(default)]
        synth: SynthSpec,
        #[serde(default)]
        seed: u64,
    },
    /// Datasets on disk, each a directory with `manifest.toml`, `images/`
    /// and `masks/`. Every (dataset, class) pair except the target becomes
    /// a meta-task.
    Directory {
        datasets: Vec<PathBuf>,
        target: PathBuf,
        /// Label of the target class (2..=K, 1 is the background).
        target_class: u8,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::Synthetic {
            synth: SynthSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub shots: Vec<usize>,
    pub annotations: Vec<AnnotationStyle>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    /// Seed of support selection and annotation; defaults to `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_seed: Option<u64>,
    /// Meta-task used to pre-train the fine-tuning baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_task: Option<String>,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub tune: TuneConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub data: DataConfig,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML config. Values of the preset (from `preset` or the
    /// file's `preset` key) fill whatever the file leaves out.
    pub fn parse(text: &str, preset: Option<Preset>) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let preset = match preset {
            Some(p) => Some(p),
            None => match file.get("preset") {
                Some(toml::Value::String(s)) => Some(s.parse()?),
                Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
                None => None,
            },
        };
        let method = match file.get("method") {
            Some(toml::Value::String(s)) => Some(s.parse()?),
            _ => None,
        };
        let mut table = preset.map(|p| p.defaults(method)).unwrap_or_default();
        merge(&mut table, file);
        if let Some(p) = preset {
            table.insert("preset".into(), toml::Value::String(p.name().into()));
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text, preset)?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    /// Makes relative dataset paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DataConfig::Directory { datasets, target, .. } = &mut self.data {
            for p in datasets.iter_mut().chain(std::iter::once(target)) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::Config("shots must be a non-empty list of positive counts".into()));
        }
        if self.annotations.is_empty() {
            return Err(Error::Config("at least one annotation style is required".into()));
        }
        self.annotations.iter().try_for_each(AnnotationStyle::validate)?;
        self.meta.sparsity.iter().try_for_each(AnnotationStyle::validate)?;
        if self.folds < 2 {
            return Err(Error::Config("need at least 2 folds".into()));
        }
        if self.network.widths.contains(&0) || !(0.0..1.0).contains(&self.network.dropout) {
            return Err(Error::Config("network widths must be positive and dropout in [0, 1)".into()));
        }
        if self.tune.batch_size == 0 {
            return Err(Error::Config("tune batch_size must be >= 1".into()));
        }
        if self.method == Method::Finetune && self.source_task.is_none() {
            return Err(Error::Config("the finetune method needs a source_task".into()));
        }
        if matches!(self.method, Method::Weasel | Method::Protoseg) && self.meta.epochs == 0 {
            log::warn!("meta.epochs is 0; the meta-learner stays at its initialization");
        }
        if let DataConfig::Synthetic { synth, .. } = &self.data {
            synth.validate()?;
        }
        Ok(())
    }

    pub fn annotation_seed(&self) -> u64 {
        self.annotation_seed.unwrap_or(self.seed)
    }

    pub fn meta_sparsity(&self) -> Vec<AnnotationStyle> {
        if self.meta.sparsity.is_empty() {
            self.annotations.clone()
        } else {
            self.meta.sparsity.clone()
        }
    }

    /// Seed of model initialization and meta-training.
    pub fn model_seed(&self) -> u64 {
        crate::derive_seed(self.seed, &[1])
    }

    pub fn fold_seed(&self) -> u64 {
        crate::derive_seed(self.seed, &[3])
    }

    /// Seed of the tuning run of one fold, shared by every setting.
    pub fn tune_seed(&self, fold: usize) -> u64 {
        crate::derive_seed(self.seed, &[4, fold as u64])
    }

    /// Seed of support selection and annotation of one fold. It does not
    /// depend on the style, so every style annotates the same images.
    pub fn support_seed(&self, fold: usize, shots: usize) -> u64 {
        crate::derive_seed(self.annotation_seed(), &[fold as u64, shots as u64])
    }

    pub fn tune_config(&self, fold: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.tune.epochs,
            batch_size: self.tune.batch_size,
            adam: self.optimizer.clone(),
            seed: self.tune_seed(fold),
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.tune.pretrain_epochs,
            batch_size: self.tune.batch_size,
            adam: self.optimizer.clone(),
            seed: self.model_seed(),
        }
    }

    pub fn weasel_config(&self) -> MetaTrainConfig {
        MetaTrainConfig {
            alpha: self.meta.alpha,
            beta: self.meta.beta,
            weight_decay: self.optimizer.weight_decay,
            meta_epochs: self.meta.epochs,
            task_batch: self.meta.task_batch,
            inner_batch: self.meta.inner_batch,
            query_batch: self.meta.query_batch,
            order: self.meta.order,
            seed: self.model_seed(),
            sparsity: self.meta_sparsity(),
        }
    }

    pub fn protoseg_config(&self) -> ProtoTrainConfig {
        ProtoTrainConfig {
            meta_epochs: self.meta.epochs,
            task_batch: self.meta.task_batch,
            support_batch: self.meta.inner_batch,
            query_batch: self.meta.query_batch,
            adam: AdamConfig {
                lr: self.meta.beta,
                ..self.optimizer.clone()
            },
            seed: self.model_seed(),
            sparsity: self.meta_sparsity(),
        }
    }

    pub fn network_spec(&self, in_channels: usize) -> NetworkSpec {
        let mut spec = NetworkSpec::with_widths(in_channels, 2, self.network.widths);
        spec.dropout = self.network.dropout;
        spec
    }
}

/// Meta-tasks plus the binary samples of the target task.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub distribution: TaskDistribution,
    pub target_name: String,
    pub target_dataset: String,
    pub target_samples: Vec<Sample>,
    pub in_channels: usize,
    /// SLIC settings declared by the target manifest.
    pub slic: (Option<usize>, Option<f64>),
}

impl ExperimentData {
    /// The target style with manifest SLIC settings applied.
    pub fn target_style(&self, style: &AnnotationStyle) -> AnnotationStyle {
        style.with_slic(self.slic.0, self.slic.1)
    }
}

fn meta_split(samples: &[Sample], seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let fold = split_folds(samples.len(), 5, seed)?.swap_remove(0);
    Ok((
        fold.train_samples(samples).into_iter().cloned().collect(),
        fold.validation_samples(samples).into_iter().cloned().collect(),
    ))
}

/// Loads or generates the data of an experiment.
pub fn load_experiment_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    match &config.data {
        DataConfig::Synthetic { synth, seed } => {
            let ds = synth_meta_dataset(synth, *seed)?;
            Ok(ExperimentData {
                distribution: ds.distribution,
                target_dataset: ds.held_out_name.clone(),
                target_name: ds.held_out_name,
                target_samples: ds.held_out_samples,
                in_channels: 1,
                slic: (None, None),
            })
        }
        DataConfig::Directory {
            datasets,
            target,
            target_class,
        } => {
            let mut roots: Vec<&PathBuf> = datasets.iter().collect();
            if !roots.contains(&target) {
                roots.push(target);
            }
            let mut seen = HashSet::new();
            let mut tasks = Vec::new();
            let mut bands = None;
            let mut target_data = None;
            for (d, root) in roots.into_iter().enumerate() {
                let manifest = Manifest::read(&root.join("manifest.toml"))?;
                if !seen.insert(manifest.name.clone()) {
                    return Err(Error::Config(format!("dataset name {} appears twice", manifest.name)));
                }
                if *bands.get_or_insert(manifest.bands) != manifest.bands {
                    return Err(Error::Config(format!(
                        "dataset {} has {} bands where the others have {}",
                        manifest.name,
                        manifest.bands,
                        bands.unwrap_or_default()
                    )));
                }
                let samples = load_dataset(root, &manifest)?;
                let is_target = root == target;
                if is_target && !(2..=manifest.num_classes()).contains(target_class) {
                    return Err(Error::Config(format!(
                        "target_class {target_class} is not a foreground label of {} (2..={})",
                        manifest.name,
                        manifest.num_classes()
                    )));
                }
                for class in 2..=manifest.num_classes() {
                    if is_target && class == *target_class {
                        continue;
                    }
                    let (train, val) = meta_split(&samples, crate::derive_seed(config.seed, &[6, d as u64]))?;
                    let mut task = SegTask::binary(&manifest.name, class, &train, &val)?;
                    if let Some(name) = manifest.class_names.get(class as usize - 1) {
                        task.name = format!("{}/{name}", manifest.name);
                    }
                    tasks.push(task);
                }
                if is_target {
                    let name = manifest
                        .class_names
                        .get(*target_class as usize - 1)
                        .map_or_else(|| format!("{}/{target_class}", manifest.name), |n| format!("{}/{n}", manifest.name));
                    target_data = Some((
                        name,
                        manifest.name.clone(),
                        samples.iter().map(|s| s.binary_for(*target_class)).collect::<Vec<_>>(),
                        (manifest.slic_segments, manifest.slic_compactness),
                    ));
                }
            }
            let (target_name, target_dataset, target_samples, slic) = target_data.expect("target is loaded");
            let distribution = TaskDistribution::new(
                tasks,
                crate::derive_seed(config.seed, &[2]),
                Some((target_dataset.clone(), *target_class)),
            )?;
            Ok(ExperimentData {
                distribution,
                target_name,
                target_dataset,
                target_samples,
                in_channels: bands.unwrap_or(1),
                slic,
            })
        }
    }
}

/// The per-run model: meta-trained weights, or the source-pretrained
/// network of the fine-tuning baseline. From-scratch runs have none.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub network: Option<Network>,
    pub log: Vec<MetaLogEntry>,
}

/// Trains the per-run model. `on_epoch` runs after every meta-iteration.
pub fn prepare(
    config: &ExperimentConfig,
    data: &ExperimentData,
    on_epoch: &mut dyn FnMut(usize, &Network) -> Result<()>,
) -> Result<Prepared> {
    let spec = config.network_spec(data.in_channels);
    match config.method {
        Method::Weasel => {
            let out = meta_train(&data.distribution, &spec, &config.weasel_config(), on_epoch)?;
            Ok(Prepared {
                network: Some(out.network),
                log: out.log,
            })
        }
        Method::Protoseg => {
            let out = meta_train_proto(&data.distribution, &spec, &config.protoseg_config(), on_epoch)?;
            Ok(Prepared {
                network: Some(out.network),
                log: out.log,
            })
        }
        Method::Finetune => {
            let name = config.source_task.as_deref().unwrap_or_default();
            let source = data
                .distribution
                .tasks
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Config(format!("source task `{name}` is not a meta-task")))?;
            if source.dataset == data.target_dataset {
                return Err(Error::Leakage(format!(
                    "source task {name} comes from the target dataset {}",
                    data.target_dataset
                )));
            }
            Ok(Prepared {
                network: Some(pretrain_on_source(&spec, source, &config.pretrain_config())?),
                log: Vec::new(),
            })
        }
        Method::Scratch => Ok(Prepared {
            network: None,
            log: Vec::new(),
        }),
    }
}

pub fn target_folds(config: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<Fold>> {
    split_folds(data.target_samples.len(), config.folds, config.fold_seed())
}

/// The few-shot task of one fold and setting.
pub fn fold_task(
    config: &ExperimentConfig,
    data: &ExperimentData,
    fold: &Fold,
    fold_index: usize,
    shots: usize,
    style: &AnnotationStyle,
) -> Result<FewShotTask> {
    let train: Vec<Sample> = fold.train_samples(&data.target_samples).into_iter().cloned().collect();
    let val: Vec<Sample> = fold.validation_samples(&data.target_samples).into_iter().cloned().collect();
    let task = SegTask::new(data.target_name.clone(), data.target_dataset.clone(), FOREGROUND, train, val)?;
    let sparsify = SparsifyConfig::new(data.target_style(style), config.annotation_seed());
    let mut rng = crate::rng(config.support_seed(fold_index, shots));
    make_support(&task, shots, &sparsify, &mut rng)
}

/// Adapts the prepared model to a few-shot task. ProtoSeg does not change
/// its weights, so this returns the prepared network unchanged.
pub fn adapt(
    config: &ExperimentConfig,
    data: &ExperimentData,
    prepared: &Prepared,
    few_shot: &FewShotTask,
    fold_index: usize,
) -> Result<Network> {
    let tune = config.tune_config(fold_index);
    match (config.method, &prepared.network) {
        (Method::Protoseg, Some(net)) => Ok(net.clone()),
        (Method::Weasel | Method::Finetune, Some(net)) => fine_tune(net, few_shot, &tune),
        (Method::Scratch, _) => train_from_scratch(
            &config.network_spec(data.in_channels),
            few_shot,
            config.model_seed(),
            &tune,
        ),
        (method, None) => Err(Error::Config(format!(
            "method {} needs a prepared network",
            method.name()
        ))),
    }
}

/// Segments the query images with an adapted network.
pub fn predict_query(config: &ExperimentConfig, adapted: &Network, few_shot: &FewShotTask) -> Result<Vec<Grid<u8>>> {
    match config.method {
        Method::Protoseg => protoseg::predict(adapted, few_shot),
        _ => segment(adapted, &few_shot.query.images().iter().collect::<Vec<_>>()),
    }
}

fn evaluate_fold(
    config: &ExperimentConfig,
    data: &ExperimentData,
    prepared: &Prepared,
    fold: &Fold,
    fold_index: usize,
    shots: usize,
    style: &AnnotationStyle,
) -> FoldRecord {
    let mut record = FoldRecord {
        fold: fold_index,
        jaccard: None,
        query_images: fold.validation.len(),
        user_inputs: None,
        labeled_pixels: 0,
        degenerate_support: false,
        error: None,
    };
    let few_shot = match fold_task(config, data, fold, fold_index, shots, style) {
        Ok(t) => t,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    record.user_inputs = count_user_inputs(&few_shot.annotations, &data.target_style(style)).ok();
    record.labeled_pixels = few_shot.annotations.iter().map(|a| a.mask.labeled_count()).sum();
    record.degenerate_support = few_shot.annotations.iter().any(|a| a.degenerate);
    let scored = adapt(config, data, prepared, &few_shot, fold_index)
        .and_then(|net| predict_query(config, &net, &few_shot))
        .and_then(|pred| mean_jaccard(&pred, few_shot.query.ground_truth(), FOREGROUND));
    match scored {
        Ok(j) => record.jaccard = Some(j),
        Err(e @ Error::MissingPrototype { .. }) => {
            log::warn!("fold {fold_index}: {e}; scoring the class as 0");
            record.jaccard = Some(0.0);
            record.error = Some(e.to_string());
        }
        Err(e) => {
            log::error!("fold {fold_index}: {e}");
            record.error = Some(e.to_string());
        }
    }
    record
}

#[derive(Serialize)]
struct Provenance<'a> {
    config: &'a ExperimentConfig,
    seeds: Seeds,
}

#[derive(Serialize)]
struct Seeds {
    experiment: u64,
    annotation: u64,
    model: u64,
    folds: u64,
    task_sampler: u64,
}

/// Scores one (shots, style) setting over every fold.
pub fn evaluate_setting(
    config: &ExperimentConfig,
    data: &ExperimentData,
    prepared: &Prepared,
    shots: usize,
    style: &AnnotationStyle,
) -> Result<MetricReport> {
    let folds = target_folds(config, data)?;
    let records = folds
        .iter()
        .enumerate()
        .map(|(i, fold)| evaluate_fold(config, data, prepared, fold, i, shots, style))
        .collect();
    let provenance = Provenance {
        config,
        seeds: Seeds {
            experiment: config.seed,
            annotation: config.annotation_seed(),
            model: config.model_seed(),
            folds: config.fold_seed(),
            task_sampler: data.distribution.sampler_seed,
        },
    };
    Ok(MetricReport {
        experiment: config.name.clone(),
        method: config.method,
        task: data.target_name.clone(),
        shots,
        annotation: data.target_style(style),
        folds: records,
        mean: 0.0,
        std: 0.0,
        mean_user_inputs: None,
        mean_labeled_pixels: 0.0,
        provenance: serde_json::to_value(provenance).expect("provenance serializes"),
    }
    .summarize())
}

/// One report per (shots, style) setting, in config order.
pub fn evaluate(config: &ExperimentConfig, data: &ExperimentData, prepared: &Prepared) -> Result<Vec<MetricReport>> {
    let mut reports = Vec::new();
    for &shots in &config.shots {
        for style in &config.annotations {
            log::info!("{}: {shots}-shot {}", config.name, style.label());
            reports.push(evaluate_setting(config, data, prepared, shots, style)?);
        }
    }
    Ok(reports)
}

/// Loads the data, prepares the model once and evaluates every setting.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<MetricReport>> {
    config.validate()?;
    let data = load_experiment_data(config)?;
    let prepared = prepare(config, &data, &mut |_, _| Ok(()))?;
    evaluate(config, &data, &prepared)
}
