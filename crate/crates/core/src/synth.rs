//! Synthetic shapes meta-dataset for desk-scale experiments.
//!
//! Every family is a binary dataset of noisy single-channel images holding
//! one or two objects of one shape kind. Source families become meta-tasks;
//! the held-out family is generated with an extra domain shift and never
//! enters the task distribution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_folds, Grid, Image, Sample, SegTask, TaskDistribution, BACKGROUND, FOREGROUND};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Ring,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeFamily {
    pub name: String,
    pub kind: ShapeKind,
    /// Mean background and object intensities.
    pub background: f64,
    pub foreground: f64,
    /// Standard deviation of the pixel noise.
    pub noise: f64,
    /// Amplitude of a sinusoidal texture laid over the whole image.
    #[serde(default)]
    pub texture: f64,
}

impl ShapeFamily {
    pub fn new(name: &str, kind: ShapeKind, background: f64, foreground: f64, noise: f64, texture: f64) -> Self {
        Self {
            name: name.into(),
            kind,
            background,
            foreground,
            noise,
            texture,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub size: usize,
    pub images_per_family: usize,
    pub sources: Vec<ShapeFamily>,
    pub held_out: ShapeFamily,
    /// 0 keeps the held-out family as specified; 1 halves its contrast,
    /// brightens it by 0.2 and doubles its noise.
    #[serde(default)]
    pub domain_shift: f64,
}

impl Default for SynthSpec {
    /// 64×64 images, 40 per family, disks/rectangles/rings as sources and
    /// triangles held out.
    fn default() -> Self {
        Self {
            size: 64,
            images_per_family: 40,
            sources: vec![
                ShapeFamily::new("disks", ShapeKind::Disk, 0.25, 0.75, 0.08, 0.05),
                ShapeFamily::new("rectangles", ShapeKind::Rectangle, 0.3, 0.7, 0.1, 0.08),
                ShapeFamily::new("rings", ShapeKind::Ring, 0.2, 0.8, 0.06, 0.04),
            ],
            held_out: ShapeFamily::new("triangles", ShapeKind::Triangle, 0.25, 0.75, 0.08, 0.05),
            domain_shift: 0.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.size % 8 != 0 {
            return Err(Error::Config(format!(
                "synthetic image size {} must be a multiple of 8 and at least 16",
                self.size
            )));
        }
        if self.images_per_family < 5 {
            return Err(Error::Config("need at least 5 images per family".into()));
        }
        if self.sources.is_empty() {
            return Err(Error::Config("need at least one source family".into()));
        }
        if !(0.0..=1.0).contains(&self.domain_shift) {
            return Err(Error::Config("domain_shift must be in [0, 1]".into()));
        }
        let mut names: Vec<&str> = self.sources.iter().map(|f| f.name.as_str()).collect();
        names.push(&self.held_out.name);
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("family names must be unique".into()));
        }
        for f in self.sources.iter().chain([&self.held_out]) {
            if f.noise < 0.0 || f.texture < 0.0 {
                return Err(Error::Config(format!("family {} has negative noise", f.name)));
            }
        }
        Ok(())
    }

    fn shifted_held_out(&self) -> ShapeFamily {
        let f = &self.held_out;
        let s = self.domain_shift;
        let mid = (f.background + f.foreground) / 2.0;
        let half = (f.foreground - f.background) / 2.0 * (1.0 - 0.5 * s);
        ShapeFamily {
            background: mid - half + 0.2 * s,
            foreground: mid + half + 0.2 * s,
            noise: f.noise * (1.0 + s),
            ..f.clone()
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn inside(kind: ShapeKind, cy: f64, cx: f64, r: f64, angle: f64, y: f64, x: f64) -> bool {
    let (dy, dx) = (y - cy, x - cx);
    match kind {
        ShapeKind::Disk => dy * dy + dx * dx <= r * r,
        ShapeKind::Ring => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        ShapeKind::Rectangle => {
            let (s, c) = angle.sin_cos();
            let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
            u.abs() <= r && v.abs() <= 0.6 * r
        }
        ShapeKind::Triangle => {
            let verts: Vec<(f64, f64)> = (0..3)
                .map(|i| {
                    let a = angle + i as f64 * std::f64::consts::TAU / 3.0;
                    (r * a.sin(), r * a.cos())
                })
                .collect();
            let sign = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
            let s0 = sign(verts[0], verts[1]);
            let s1 = sign(verts[1], verts[2]);
            let s2 = sign(verts[2], verts[0]);
            (s0 >= 0.0 && s1 >= 0.0 && s2 >= 0.0) || (s0 <= 0.0 && s1 <= 0.0 && s2 <= 0.0)
        }
    }
}

/// One image with its dense binary mask.
pub fn render(family: &ShapeFamily, size: usize, rng: &mut ChaCha8Rng) -> (Image, Grid<u8>) {
    let n_objects = rng.gen_range(1..=2);
    let objects: Vec<(f64, f64, f64, f64)> = (0..n_objects)
        .map(|_| {
            let r = rng.gen_range(0.12..0.24) * size as f64;
            let cy = rng.gen_range(r..size as f64 - r);
            let cx = rng.gen_range(r..size as f64 - r);
            (cy, cx, r, rng.gen_range(0.0..std::f64::consts::PI))
        })
        .collect();
    let mask = Grid::from_fn(size, size, |y, x| {
        let hit = objects
            .iter()
            .any(|&(cy, cx, r, a)| inside(family.kind, cy, cx, r, a, y as f64 + 0.5, x as f64 + 0.5));
        if hit {
            FOREGROUND
        } else {
            BACKGROUND
        }
    });
    let (fy, fx, phase) = (
        rng.gen_range(0.1..0.4),
        rng.gen_range(0.1..0.4),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let base = if mask.get(y, x) == FOREGROUND {
                family.foreground
            } else {
                family.background
            };
            let texture = family.texture * (fy * y as f64 + fx * x as f64 + phase).sin();
            data.push(base + texture + family.noise * normal(rng));
        }
    }
    (Image::new(1, size, size, data), mask)
}

/// All images of one family, with ids `<family>/<index>`.
pub fn family_samples(family: &ShapeFamily, size: usize, count: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = crate::rng(seed);
    (0..count)
        .map(|i| {
            let (image, mask) = render(family, size, &mut rng);
            Sample::new(format!("{}/{i:03}", family.name), image, mask, 2)
        })
        .collect()
}

/// Source tasks plus the held-out family's samples.
#[derive(Clone, Debug)]
pub struct SynthMetaDataset {
    pub distribution: TaskDistribution,
    pub held_out_name: String,
    pub held_out_samples: Vec<Sample>,
}

impl SynthMetaDataset {
    /// Held-out task over one cross-validation fold.
    pub fn held_out_task(&self, fold: &crate::data::Fold) -> Result<SegTask> {
        let train: Vec<Sample> = fold.train_samples(&self.held_out_samples).into_iter().cloned().collect();
        let val: Vec<Sample> = fold.validation_samples(&self.held_out_samples).into_iter().cloned().collect();
        SegTask::new(self.held_out_name.clone(), self.held_out_name.clone(), FOREGROUND, train, val)
    }
}

/// Generates every family deterministically from `seed`. Each source
/// family becomes one task whose support and query are a seeded 80/20
/// split of its images.
pub fn synth_meta_dataset(spec: &SynthSpec, seed: u64) -> Result<SynthMetaDataset> {
    spec.validate()?;
    let mut tasks = Vec::with_capacity(spec.sources.len());
    for (i, family) in spec.sources.iter().enumerate() {
        let samples = family_samples(family, spec.size, spec.images_per_family, crate::derive_seed(seed, &[i as u64]))?;
        let fold = &split_folds(samples.len(), 5, crate::derive_seed(seed, &[i as u64, 1]))?[0];
        let support = fold.train_samples(&samples).into_iter().cloned().collect();
        let query = fold.validation_samples(&samples).into_iter().cloned().collect();
        tasks.push(SegTask::new(family.name.clone(), family.name.clone(), FOREGROUND, support, query)?);
    }
    let held = spec.shifted_held_out();
    let held_out_samples = family_samples(&held, spec.size, spec.images_per_family, crate::derive_seed(seed, &[u64::MAX]))?;
    Ok(SynthMetaDataset {
        distribution: TaskDistribution::new(tasks, crate::derive_seed(seed, &[2]), Some((held.name.clone(), FOREGROUND)))?,
        held_out_name: held.name,
        held_out_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            size: 32,
            images_per_family: 10,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn three_sources_give_three_tasks() {
        let ds = synth_meta_dataset(&small(), 1).unwrap();
        assert_eq!(ds.distribution.len(), 3);
        for t in &ds.distribution.tasks {
            assert_eq!(t.support.len() + t.query.len(), 10);
        }
        assert_eq!(ds.held_out_samples.len(), 10);
    }

    #[test]
    fn held_out_family_is_absent() {
        let ds = synth_meta_dataset(&small(), 1).unwrap();
        assert!(ds.distribution.tasks.iter().all(|t| t.dataset != "triangles"));
        assert!(ds
            .distribution
            .tasks
            .iter()
            .flat_map(|t| t.support.iter().chain(&t.query))
            .all(|s| !s.id.starts_with("triangles/")));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_meta_dataset(&small(), 5).unwrap();
        let b = synth_meta_dataset(&small(), 5).unwrap();
        assert_eq!(a.held_out_samples, b.held_out_samples);
        assert_eq!(a.distribution.tasks[1].support, b.distribution.tasks[1].support);
        let c = synth_meta_dataset(&small(), 6).unwrap();
        assert_ne!(a.held_out_samples, c.held_out_samples);
    }

    #[test]
    fn every_image_has_both_classes() {
        let ds = synth_meta_dataset(&SynthSpec::default(), 3).unwrap();
        for s in ds.distribution.tasks.iter().flat_map(|t| &t.support).chain(&ds.held_out_samples) {
            assert!(s.dense_mask.count(FOREGROUND) > 0 && s.dense_mask.count(BACKGROUND) > 0);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small();
        spec.size = 30;
        assert!(synth_meta_dataset(&spec, 0).is_err());
        let mut spec = small();
        spec.held_out.name = "disks".into();
        assert!(synth_meta_dataset(&spec, 0).is_err());
    }
}
