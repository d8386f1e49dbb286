//! Task and dataset model: samples, segmentation tasks, few-shot tasks,
//! dataset ingestion, fold splitting and meta-task sampling.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use image::imageops::FilterType;
use image::{ImageBuffer, Luma};
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsify::{self, Annotation, SparsifyConfig};

/// Label of the unknown class in sparse masks.
pub const UNKNOWN: u8 = 0;
/// Background label of binary tasks.
pub const BACKGROUND: u8 = 1;
/// Foreground label of binary tasks.
pub const FOREGROUND: u8 = 2;

/// Above this many shots a task is no longer "few-shot".
pub const MAX_RECOMMENDED_SHOTS: usize = 20;

/// Row-major 2-D grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(height * width, data.len(), "grid data does not match {height}×{width}");
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }
}

impl Grid<u8> {
    /// Distinct values present, ascending.
    pub fn classes(&self) -> BTreeSet<u8> {
        self.data.iter().copied().collect()
    }

    pub fn count(&self, value: u8) -> usize {
        self.data.iter().filter(|&&v| v == value).count()
    }

    /// Nearest-neighbour resampling; never introduces a new label.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("grid buffer matches its dimensions");
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Nearest);
        Self::new(height, width, out.into_raw())
    }
}

/// Band-major image with values normalised to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(bands * height * width, data.len(), "image data does not match its shape");
        Self {
            bands,
            height,
            width,
            data,
        }
    }

    pub fn from_gray(gray: &Grid<f64>) -> Self {
        Self::new(1, gray.height(), gray.width(), gray.data().to_vec())
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, band: usize, y: usize, x: usize) -> f64 {
        self.data[(band * self.height + y) * self.width + x]
    }

    /// Bilinear resampling, band by band.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(self.bands * height * width);
        for b in 0..self.bands {
            let src: Vec<f32> = self.data[b * plane..(b + 1) * plane]
                .iter()
                .map(|&v| v as f32)
                .collect();
            let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_raw(self.width as u32, self.height as u32, src)
                    .expect("band buffer matches its dimensions");
            let out =
                image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
            data.extend(out.into_raw().into_iter().map(f64::from));
        }
        Self::new(self.bands, height, width, data)
    }
}

/// Dense labels use `1..=K`; sparse labels additionally use [`UNKNOWN`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseMask {
    labels: Grid<u8>,
    num_classes: u8,
}

impl SparseMask {
    /// Panics if a label exceeds `num_classes`.
    pub fn new(labels: Grid<u8>, num_classes: u8) -> Self {
        assert!(
            labels.data().iter().all(|&v| v <= num_classes),
            "sparse label above class count {num_classes}"
        );
        Self {
            labels,
            num_classes,
        }
    }

    pub fn unknown(height: usize, width: usize, num_classes: u8) -> Self {
        Self::new(Grid::filled(height, width, UNKNOWN), num_classes)
    }

    /// A "sparse" mask that labels every pixel.
    pub fn from_dense(dense: &Grid<u8>, num_classes: u8) -> Self {
        Self::new(dense.clone(), num_classes)
    }

    pub fn labels(&self) -> &Grid<u8> {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut Grid<u8> {
        &mut self.labels
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.data().iter().filter(|&&v| v != UNKNOWN).count()
    }

    pub fn class_count(&self, class: u8) -> usize {
        self.labels.count(class)
    }

    /// True when some class in `1..=K` has no labeled pixel.
    pub fn is_degenerate(&self) -> bool {
        (1..=self.num_classes).any(|k| self.class_count(k) == 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub dense_mask: Grid<u8>,
    pub sparse_mask: Option<SparseMask>,
    pub num_classes: u8,
}

impl Sample {
    /// Validates shared spatial dimensions and the absence of unknown labels.
    pub fn new(id: impl Into<String>, image: Image, dense_mask: Grid<u8>, num_classes: u8) -> Result<Self> {
        let id = id.into();
        if (image.height(), image.width()) != dense_mask.dims() {
            return Err(Error::SizeMismatch {
                id,
                image: (image.height(), image.width()),
                mask: dense_mask.dims(),
            });
        }
        if let Some(&bad) = dense_mask
            .data()
            .iter()
            .find(|&&v| v == UNKNOWN || v > num_classes)
        {
            return Err(Error::UnknownClass {
                id,
                value: bad,
                declared: (1..=num_classes).collect(),
            });
        }
        Ok(Self {
            id,
            image,
            dense_mask,
            sparse_mask: None,
            num_classes,
        })
    }

    /// Binary view for one target class: target → foreground, rest → background.
    pub fn binary_for(&self, target: u8) -> Sample {
        Sample {
            id: self.id.clone(),
            image: self.image.clone(),
            dense_mask: self
                .dense_mask
                .map(|v| if v == target { FOREGROUND } else { BACKGROUND }),
            sparse_mask: None,
            num_classes: 2,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dense_mask.dims()
    }
}

/// A segmentation task: support and query partitions of one dataset, for
/// one target class.
#[derive(Clone, Debug)]
pub struct SegTask {
    pub name: String,
    pub dataset: String,
    pub target_class: u8,
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
}

impl SegTask {
    /// Fails if support and query share a sample id.
    pub fn new(
        name: impl Into<String>,
        dataset: impl Into<String>,
        target_class: u8,
        support: Vec<Sample>,
        query: Vec<Sample>,
    ) -> Result<Self> {
        let ids: HashSet<&str> = support.iter().map(|s| s.id.as_str()).collect();
        if let Some(dup) = query.iter().find(|q| ids.contains(q.id.as_str())) {
            return Err(Error::Leakage(format!(
                "sample {} is in both support and query",
                dup.id
            )));
        }
        Ok(Self {
            name: name.into(),
            dataset: dataset.into(),
            target_class,
            support,
            query,
        })
    }

    /// Binary task for `target` over the given partitions.
    pub fn binary(dataset: &str, target: u8, train: &[Sample], val: &[Sample]) -> Result<Self> {
        Self::new(
            format!("{dataset}/{target}"),
            dataset,
            target,
            train.iter().map(|s| s.binary_for(target)).collect(),
            val.iter().map(|s| s.binary_for(target)).collect(),
        )
    }

    pub fn key(&self) -> (&str, u8) {
        (&self.dataset, self.target_class)
    }
}

/// Query images of a few-shot task. Ground truth is only reachable through
/// [`QuerySet::ground_truth`], which counts every read.
#[derive(Debug)]
pub struct QuerySet {
    ids: Vec<String>,
    images: Vec<Image>,
    truth: Vec<Grid<u8>>,
    reads: AtomicUsize,
}

impl Clone for QuerySet {
    fn clone(&self) -> Self {
        Self {
            ids: self.ids.clone(),
            images: self.images.clone(),
            truth: self.truth.clone(),
            reads: AtomicUsize::new(0),
        }
    }
}

impl QuerySet {
    pub fn new(samples: &[Sample]) -> Self {
        Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: samples.iter().map(|s| s.image.clone()).collect(),
            truth: samples.iter().map(|s| s.dense_mask.clone()).collect(),
            reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    /// Dense labels for scoring. Training code must never call this.
    pub fn ground_truth(&self) -> &[Grid<u8>] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.truth
    }

    /// How many times [`QuerySet::ground_truth`] has been called.
    pub fn ground_truth_reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    /// Replaces the ground truth, e.g. with garbage, to prove it is unused.
    pub fn replace_ground_truth(&mut self, truth: Vec<Grid<u8>>) {
        assert_eq!(truth.len(), self.truth.len());
        self.truth = truth;
    }
}

/// A k-shot task: sparsely annotated support, unlabeled query.
#[derive(Clone, Debug)]
pub struct FewShotTask {
    pub name: String,
    pub dataset: String,
    pub target_class: u8,
    pub support: Vec<Sample>,
    pub annotations: Vec<Annotation>,
    pub query: QuerySet,
}

impl FewShotTask {
    pub fn k(&self) -> usize {
        self.support.len()
    }

    pub fn num_classes(&self) -> u8 {
        self.support.first().map_or(2, |s| s.num_classes)
    }

    /// Support sparse masks, in support order.
    pub fn sparse_masks(&self) -> Vec<&SparseMask> {
        self.support
            .iter()
            .map(|s| s.sparse_mask.as_ref().expect("few-shot support is annotated"))
            .collect()
    }
}

/// Meta-training tasks, excluding the held-out target.
#[derive(Clone, Debug)]
pub struct TaskDistribution {
    pub tasks: Vec<SegTask>,
    pub sampler_seed: u64,
    held_out: Option<(String, u8)>,
}

impl TaskDistribution {
    /// Fails if any task has the held-out `(dataset, class)` key.
    pub fn new(tasks: Vec<SegTask>, sampler_seed: u64, held_out: Option<(String, u8)>) -> Result<Self> {
        if let Some((ds, class)) = &held_out {
            if let Some(t) = tasks
                .iter()
                .find(|t| t.dataset == *ds && t.target_class == *class)
            {
                return Err(Error::Leakage(format!(
                    "held-out task {ds}/{class} appears in the distribution as {}",
                    t.name
                )));
            }
        }
        Ok(Self {
            tasks,
            sampler_seed,
            held_out,
        })
    }

    pub fn held_out(&self) -> Option<(&str, u8)> {
        self.held_out.as_ref().map(|(d, c)| (d.as_str(), *c))
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Per-dataset manifest stored as `manifest.toml` at the dataset root.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    /// Raw mask values; the i-th entry becomes label `i + 1`.
    pub classes: Vec<u8>,
    #[serde(default)]
    pub class_names: Vec<String>,
    pub bands: usize,
    /// Target `[height, width]`.
    pub size: [usize; 2],
    #[serde(default)]
    pub slic_segments: Option<usize>,
    #[serde(default)]
    pub slic_compactness: Option<f64>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        manifest.validate(path)?;
        Ok(manifest)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            message,
        };
        if self.classes.len() < 2 {
            return Err(bad("at least two classes are required".into()));
        }
        let unique: HashSet<u8> = self.classes.iter().copied().collect();
        if unique.len() != self.classes.len() {
            return Err(bad("duplicate class ids".into()));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.classes.len() {
            return Err(bad("class_names and classes differ in length".into()));
        }
        if !matches!(self.bands, 1 | 3 | 4) {
            return Err(bad(format!("unsupported band count {}", self.bands)));
        }
        if self.size.iter().any(|&s| s == 0 || s % 8 != 0) {
            return Err(bad(format!("size {:?} must be positive multiples of 8", self.size)));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> u8 {
        self.classes.len() as u8
    }
}

fn decode_error(path: &Path, e: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_image(path: &Path, bands: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| decode_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let interleaved: Vec<f32> = match bands {
        1 => img.to_luma32f().into_raw(),
        3 => img.to_rgb32f().into_raw(),
        4 => img.to_rgba32f().into_raw(),
        _ => unreachable!("validated by the manifest"),
    };
    let mut data = vec![0.0; bands * h * w];
    for (i, px) in interleaved.chunks(bands).enumerate() {
        for (b, &v) in px.iter().enumerate() {
            data[b * h * w + i] = f64::from(v);
        }
    }
    Ok(Image::new(bands, h, w, data))
}

fn read_mask(path: &Path) -> Result<Grid<u8>> {
    let img = image::open(path).map_err(|e| decode_error(path, e))?;
    let luma = match img {
        image::DynamicImage::ImageLuma8(l) => l,
        other => {
            return Err(decode_error(
                path,
                format!("mask must be 8-bit single channel, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    Ok(Grid::new(h, w, luma.into_raw()))
}

/// Image files under `<root>/images`, sorted. A missing directory counts
/// as empty.
pub fn list_images(root: &Path) -> Result<Vec<PathBuf>> {
    let image_dir = root.join("images");
    if !image_dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&image_dir)
        .map_err(|e| Error::io(&image_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Loads one image with its `<root>/masks/<stem>.png`, remapping mask
/// values to `1..=K` and resizing both to the manifest size.
pub fn load_sample(root: &Path, manifest: &Manifest, file: &Path) -> Result<Sample> {
    let id = file
        .strip_prefix(root)
        .unwrap_or(file)
        .to_string_lossy()
        .replace('\\', "/");
    let stem = file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mask_path = root.join("masks").join(format!("{stem}.png"));
    if !mask_path.is_file() {
        return Err(Error::MissingMask(id));
    }
    let image = read_image(file, manifest.bands)?;
    let raw_mask = read_mask(&mask_path)?;
    if (image.height(), image.width()) != raw_mask.dims() {
        return Err(Error::SizeMismatch {
            id,
            image: (image.height(), image.width()),
            mask: raw_mask.dims(),
        });
    }
    let mut lut = [0u8; 256];
    for (i, &raw) in manifest.classes.iter().enumerate() {
        lut[raw as usize] = i as u8 + 1;
    }
    if let Some(&bad) = raw_mask.data().iter().find(|&&v| lut[v as usize] == 0) {
        return Err(Error::UnknownClass {
            id,
            value: bad,
            declared: manifest.classes.clone(),
        });
    }
    let [th, tw] = manifest.size;
    let mask = raw_mask.map(|v| lut[v as usize]).resize_nearest(th, tw);
    Sample::new(id, image.resize_bilinear(th, tw), mask, manifest.num_classes())
}

/// Loads every image of a dataset directory (see [`load_sample`]).
pub fn load_dataset(root: &Path, manifest: &Manifest) -> Result<Vec<Sample>> {
    list_images(root)?
        .iter()
        .map(|file| load_sample(root, manifest, file))
        .collect()
}

/// Writes a label grid as an 8-bit grayscale PNG.
pub fn save_labels(path: &Path, labels: &Grid<u8>) -> Result<()> {
    let (h, w) = labels.dims();
    let buffer: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, labels.data().to_vec()).expect("buffer size matches");
    buffer.save(path).map_err(|e| decode_error(path, e))
}

/// Indices of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Fold {
    pub fn train_samples<'a>(&self, samples: &'a [Sample]) -> Vec<&'a Sample> {
        self.train.iter().map(|&i| &samples[i]).collect()
    }

    pub fn validation_samples<'a>(&self, samples: &'a [Sample]) -> Vec<&'a Sample> {
        self.validation.iter().map(|&i| &samples[i]).collect()
    }
}

/// Seeded k-fold partition over `len` samples.
pub fn split_folds(len: usize, n_folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    if len < n_folds {
        return Err(Error::NotEnoughSamples {
            needed: n_folds,
            available: len,
        });
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut crate::rng(seed));
    Ok((0..n_folds)
        .map(|f| {
            let (lo, hi) = (f * len / n_folds, (f + 1) * len / n_folds);
            let mut validation = order[lo..hi].to_vec();
            let mut train: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
            validation.sort_unstable();
            train.sort_unstable();
            Fold { train, validation }
        })
        .collect())
}

/// Draws `batch` distinct tasks uniformly.
pub fn sample_task_batch<'a>(
    dist: &'a TaskDistribution,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Vec<&'a SegTask>> {
    if batch > dist.len() {
        return Err(Error::NotEnoughSamples {
            needed: batch,
            available: dist.len(),
        });
    }
    Ok(index::sample(rng, dist.len(), batch)
        .into_iter()
        .map(|i| &dist.tasks[i])
        .collect())
}

/// Draws `k` support samples from the task's training partition, annotates
/// them with `sparsify`, and takes the whole validation partition as query.
pub fn make_support(
    task: &SegTask,
    k: usize,
    sparsify: &SparsifyConfig,
    rng: &mut impl Rng,
) -> Result<FewShotTask> {
    if k == 0 || k > task.support.len() {
        return Err(Error::NotEnoughSamples {
            needed: k.max(1),
            available: task.support.len(),
        });
    }
    if k > MAX_RECOMMENDED_SHOTS {
        log::warn!("{k}-shot task exceeds the usual few-shot regime ({MAX_RECOMMENDED_SHOTS})");
    }
    let picked = index::sample(rng, task.support.len(), k).into_vec();
    let mut support = Vec::with_capacity(k);
    let mut annotations = Vec::with_capacity(k);
    for i in picked {
        let mut sample = task.support[i].clone();
        let annotation = sparsify::annotate(&sample, sparsify, rng)?;
        for w in &annotation.warnings {
            log::warn!("{}: {w}", sample.id);
        }
        sample.sparse_mask = Some(annotation.mask.clone());
        support.push(sample);
        annotations.push(annotation);
    }
    Ok(FewShotTask {
        name: task.name.clone(),
        dataset: task.dataset.clone(),
        target_class: task.target_class,
        support,
        annotations,
        query: QuerySet::new(&task.query),
    })
}
