//! Simulated sparse annotations derived from dense masks.
//!
//! Five styles are supported: random points, a regular grid, object
//! contours, skeletons, and pure superpixel regions. All of them are
//! deterministic given the rng state, and for fixed state the labeled sets
//! are nested in the density parameter.

pub mod blobs;
pub mod contours;
pub mod morphology;
pub mod skeleton;
pub mod slic;

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Grid, Image, Sample, SparseMask, BACKGROUND, FOREGROUND, UNKNOWN};
use crate::error::{Error, Result};

fn default_radius() -> usize {
    2
}

fn default_blob_size() -> f64 {
    0.1
}

fn default_segments() -> usize {
    100
}

fn default_compactness() -> f64 {
    10.0
}

/// Annotation style and the parameters it uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "lowercase")]
pub enum AnnotationStyle {
    /// `n` random pixels per class.
    Points { n: usize },
    /// Every `spacing`-th pixel in both directions from a random origin.
    Grid { spacing: usize },
    /// Inner contour of the eroded object and outer contour of the dilated
    /// object, subsampled to `density`.
    Contours {
        density: f64,
        #[serde(default = "default_radius")]
        erosion_radius: usize,
        #[serde(default = "default_radius")]
        dilation_radius: usize,
    },
    /// Skeletons of object and background, masked by random blobs that
    /// cover `density` of the image.
    Skeletons {
        density: f64,
        #[serde(default)]
        thickness: usize,
        #[serde(default = "default_blob_size")]
        blob_size_fraction: f64,
    },
    /// A `density` fraction of the pure superpixels of each class.
    Regions {
        density: f64,
        #[serde(default = "default_segments")]
        segments: usize,
        #[serde(default = "default_compactness")]
        compactness: f64,
    },
    /// Every pixel labeled; the reference point for sparsity sweeps.
    Dense,
}

impl AnnotationStyle {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Points { .. } => "points",
            Self::Grid { .. } => "grid",
            Self::Contours { .. } => "contours",
            Self::Skeletons { .. } => "skeletons",
            Self::Regions { .. } => "regions",
            Self::Dense => "dense",
        }
    }

    /// Short human-readable setting, e.g. `points n=20`.
    pub fn label(&self) -> String {
        match self {
            Self::Points { n } => format!("points n={n}"),
            Self::Grid { spacing } => format!("grid s={spacing}"),
            Self::Contours { density, .. } => format!("contours d={density}"),
            Self::Skeletons { density, .. } => format!("skeletons d={density}"),
            Self::Regions { density, .. } => format!("regions d={density}"),
            Self::Dense => "dense".to_string(),
        }
    }

    /// Replaces the SLIC settings of a regions style where given.
    pub fn with_slic(&self, segments: Option<usize>, compactness: Option<f64>) -> Self {
        match *self {
            Self::Regions {
                density,
                segments: s,
                compactness: c,
            } => Self::Regions {
                density,
                segments: segments.unwrap_or(s),
                compactness: compactness.unwrap_or(c),
            },
            ref other => other.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let density = |d: f64| {
            if (0.0..=1.0).contains(&d) {
                Ok(())
            } else {
                Err(Error::Config(format!("density {d} outside [0, 1]")))
            }
        };
        match *self {
            Self::Points { n } if n == 0 => Err(Error::Config("points needs n >= 1".into())),
            Self::Grid { spacing } if spacing < 2 => {
                Err(Error::Config("grid spacing must be at least 2".into()))
            }
            Self::Contours {
                density: d,
                dilation_radius,
                ..
            } => {
                density(d)?;
                if dilation_radius == 0 {
                    return Err(Error::Config("contour dilation radius must be at least 1".into()));
                }
                Ok(())
            }
            Self::Skeletons {
                density: d,
                blob_size_fraction,
                ..
            } => {
                density(d)?;
                if !(blob_size_fraction > 0.0 && blob_size_fraction <= 1.0) {
                    return Err(Error::Config("blob_size_fraction must be in (0, 1]".into()));
                }
                Ok(())
            }
            Self::Regions {
                density: d,
                segments,
                compactness,
            } => {
                density(d)?;
                if segments == 0 || compactness <= 0.0 {
                    return Err(Error::Config("SLIC needs segments >= 1 and compactness > 0".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// A style plus the seed used when annotating whole datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsifyConfig {
    #[serde(flatten)]
    pub style: AnnotationStyle,
    #[serde(default)]
    pub seed: u64,
}

impl SparsifyConfig {
    pub fn new(style: AnnotationStyle, seed: u64) -> Self {
        Self { style, seed }
    }

    pub fn points(n: usize, seed: u64) -> Self {
        Self::new(AnnotationStyle::Points { n }, seed)
    }

    pub fn dense() -> Self {
        Self::new(AnnotationStyle::Dense, 0)
    }

    /// Parses and validates a TOML config such as `style = "points"`,
    /// `n = 20`, `seed = 7`.
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.style.validate()?;
        Ok(config)
    }
}

/// A simulated annotation and what it took to make it.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub mask: SparseMask,
    /// Some class in `1..=K` ended up with no labeled pixel.
    pub degenerate: bool,
    /// Superpixels labeled (regions style only).
    pub regions_selected: usize,
    pub warnings: Vec<String>,
}

impl Annotation {
    fn finish(mask: SparseMask, regions_selected: usize, warnings: Vec<String>) -> Self {
        Self {
            degenerate: mask.is_degenerate(),
            mask,
            regions_selected,
            warnings,
        }
    }
}

/// Annotates one sample in the configured style.
pub fn annotate(sample: &Sample, config: &SparsifyConfig, rng: &mut impl Rng) -> Result<Annotation> {
    config.style.validate()?;
    let dense = &sample.dense_mask;
    let k = sample.num_classes;
    match config.style {
        AnnotationStyle::Points { n } => sparsify_points(dense, k, n, rng),
        AnnotationStyle::Grid { spacing } => sparsify_grid(dense, k, spacing, rng),
        AnnotationStyle::Contours {
            density,
            erosion_radius,
            dilation_radius,
        } => sparsify_contours(dense, density, erosion_radius, dilation_radius, rng),
        AnnotationStyle::Skeletons {
            density,
            thickness,
            blob_size_fraction,
        } => sparsify_skeletons(dense, density, thickness, blob_size_fraction, rng),
        AnnotationStyle::Regions {
            density,
            segments,
            compactness,
        } => sparsify_regions(dense, k, &sample.image, density, segments, compactness, rng),
        AnnotationStyle::Dense => Ok(Annotation::finish(
            SparseMask::from_dense(dense, k),
            0,
            Vec::new(),
        )),
    }
}

fn pixels_of(dense: &Grid<u8>, class: u8) -> Vec<usize> {
    dense
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == class)
        .map(|(i, _)| i)
        .collect()
}

fn require_binary(dense: &Grid<u8>) -> Result<()> {
    if dense.data().iter().any(|&v| v != BACKGROUND && v != FOREGROUND) {
        return Err(Error::Config("this annotation style needs a binary mask".into()));
    }
    Ok(())
}

fn require_both_classes(dense: &Grid<u8>) -> Result<()> {
    for (class, name) in [(BACKGROUND, "background"), (FOREGROUND, "foreground")] {
        if dense.count(class) == 0 {
            return Err(Error::Degenerate(format!("dense mask has no {name} pixel")));
        }
    }
    Ok(())
}

/// Up to `n` random pixels of every class; classes with fewer pixels are
/// labeled entirely.
pub fn sparsify_points(dense: &Grid<u8>, num_classes: u8, n: usize, rng: &mut impl Rng) -> Result<Annotation> {
    let (h, w) = dense.dims();
    let mut labels = Grid::filled(h, w, UNKNOWN);
    for class in 1..=num_classes {
        let pool = pixels_of(dense, class);
        if pool.is_empty() {
            return Err(Error::Degenerate(format!("class {class} is absent from the dense mask")));
        }
        for i in index::sample(rng, pool.len(), n.min(pool.len())) {
            labels.data_mut()[pool[i]] = class;
        }
    }
    Ok(Annotation::finish(SparseMask::new(labels, num_classes), 0, Vec::new()))
}

/// Grid with spacing `s` and a random origin in `[0, s)²`.
pub fn sparsify_grid(dense: &Grid<u8>, num_classes: u8, spacing: usize, rng: &mut impl Rng) -> Result<Annotation> {
    let (h, w) = dense.dims();
    if spacing < 2 || spacing >= h.min(w) {
        return Err(Error::Config(format!(
            "grid spacing {spacing} must be in [2, {})",
            h.min(w)
        )));
    }
    let origin = (rng.gen_range(0..spacing), rng.gen_range(0..spacing));
    Ok(grid_at(dense, num_classes, spacing, origin))
}

/// Grid annotation with an explicit `(row, col)` origin. Grid pixels carry
/// their dense label.
pub fn grid_at(dense: &Grid<u8>, num_classes: u8, spacing: usize, origin: (usize, usize)) -> Annotation {
    let (h, w) = dense.dims();
    let mut labels = Grid::filled(h, w, UNKNOWN);
    for y in (origin.0..h).step_by(spacing) {
        for x in (origin.1..w).step_by(spacing) {
            labels.set(y, x, dense.get(y, x));
        }
    }
    Annotation::finish(SparseMask::new(labels, num_classes), 0, Vec::new())
}

/// Keeps `round(density · len)` items of a seeded permutation. For a fixed
/// rng state the kept sets grow with `density`.
fn subsample<T: Copy>(items: &[T], density: f64, rng: &mut impl Rng) -> Vec<T> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let keep = (density * items.len() as f64).round() as usize;
    order[..keep.min(items.len())].iter().map(|&i| items[i]).collect()
}

fn as_set(dense: &Grid<u8>, class: u8) -> Grid<bool> {
    dense.map(|v| v == class)
}

/// Inner contour of the eroded foreground (labeled foreground) and outer
/// contour of the dilated foreground (labeled background).
pub fn sparsify_contours(
    dense: &Grid<u8>,
    density: f64,
    erosion_radius: usize,
    dilation_radius: usize,
    rng: &mut impl Rng,
) -> Result<Annotation> {
    require_binary(dense)?;
    let (h, w) = dense.dims();
    let fg = as_set(dense, FOREGROUND);
    let mut warnings = Vec::new();

    let eroded = morphology::erode(&fg, erosion_radius);
    let inner = contours::boundary_pixels(&eroded);
    if !eroded.data().contains(&true) {
        warnings.push(format!(
            "erosion with radius {erosion_radius} removed the whole foreground; inner contour omitted"
        ));
    }
    let dilated = morphology::dilate(&fg, dilation_radius);
    let outer = contours::boundary_pixels(&dilated);
    if outer.is_empty() {
        warnings.push("dilated foreground has no outer contour inside the image".into());
    }

    let mut labels = Grid::filled(h, w, UNKNOWN);
    for (y, x) in subsample(&inner, density, rng) {
        labels.set(y, x, FOREGROUND);
    }
    for (y, x) in subsample(&outer, density, rng) {
        labels.set(y, x, BACKGROUND);
    }
    Ok(Annotation::finish(SparseMask::new(labels, 2), 0, warnings))
}

/// Skeletons of both classes, thickened by `thickness` (clipped to the
/// class) and masked by random blobs covering `density` of the image.
pub fn sparsify_skeletons(
    dense: &Grid<u8>,
    density: f64,
    thickness: usize,
    blob_size_fraction: f64,
    rng: &mut impl Rng,
) -> Result<Annotation> {
    require_binary(dense)?;
    require_both_classes(dense)?;
    let (h, w) = dense.dims();
    let blobs = blobs::binary_blobs(h, w, blob_size_fraction, density, rng);
    let mut labels = Grid::filled(h, w, UNKNOWN);
    for class in [BACKGROUND, FOREGROUND] {
        let region = as_set(dense, class);
        let skel = morphology::dilate(&skeleton::skeletonize(&region), thickness);
        for i in 0..h * w {
            if skel.data()[i] && region.data()[i] && blobs.data()[i] {
                labels.data_mut()[i] = class;
            }
        }
    }
    let mut warnings = Vec::new();
    if labels.data().iter().all(|&v| v == UNKNOWN) {
        warnings.push("no skeleton pixel survived the blob mask".into());
    }
    Ok(Annotation::finish(SparseMask::new(labels, 2), 0, warnings))
}

/// Runs SLIC on `image` and labels a `density` fraction of the pure
/// superpixels of each class.
pub fn sparsify_regions(
    dense: &Grid<u8>,
    num_classes: u8,
    image: &Image,
    density: f64,
    segments: usize,
    compactness: f64,
    rng: &mut impl Rng,
) -> Result<Annotation> {
    let superpixels = slic::slic(image, segments, compactness);
    Ok(regions_from_superpixels(dense, num_classes, &superpixels, density, rng))
}

/// Region annotation over a given superpixel map. Superpixels mixing
/// classes are never labeled.
pub fn regions_from_superpixels(
    dense: &Grid<u8>,
    num_classes: u8,
    superpixels: &Grid<u32>,
    density: f64,
    rng: &mut impl Rng,
) -> Annotation {
    assert_eq!(dense.dims(), superpixels.dims(), "superpixel map does not match the mask");
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &sp) in superpixels.data().iter().enumerate() {
        members.entry(sp).or_default().push(i);
    }
    let mut pure: BTreeMap<u8, Vec<u32>> = BTreeMap::new();
    for (&sp, pixels) in &members {
        let class = dense.data()[pixels[0]];
        if pixels.iter().all(|&i| dense.data()[i] == class) {
            pure.entry(class).or_default().push(sp);
        }
    }

    let (h, w) = dense.dims();
    let mut labels = Grid::filled(h, w, UNKNOWN);
    let mut selected = 0;
    let mut warnings = Vec::new();
    for class in 1..=num_classes {
        let candidates = pure.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        if candidates.is_empty() {
            if dense.count(class) > 0 {
                warnings.push(format!("no pure superpixel for class {class}"));
            }
            continue;
        }
        let mut chosen = subsample(candidates, density, rng);
        if chosen.is_empty() && density > 0.0 {
            chosen = subsample(candidates, 1.0, rng)[..1].to_vec();
        }
        selected += chosen.len();
        for sp in chosen {
            for &i in &members[&sp] {
                labels.data_mut()[i] = class;
            }
        }
    }
    Annotation::finish(SparseMask::new(labels, num_classes), selected, warnings)
}

/// Annotator interactions needed for a support set.
///
/// Points cost one click per labeled point (`n` per class), grids cost one
/// click per foreground grid pixel (all others are presumed background),
/// and regions cost one click per selected superpixel.
pub fn count_user_inputs(annotations: &[Annotation], style: &AnnotationStyle) -> Result<usize> {
    match style {
        AnnotationStyle::Points { n } => Ok(annotations
            .iter()
            .map(|a| n * a.mask.num_classes() as usize)
            .sum()),
        AnnotationStyle::Grid { .. } => Ok(annotations
            .iter()
            .map(|a| a.mask.class_count(FOREGROUND))
            .sum()),
        AnnotationStyle::Regions { .. } => Ok(annotations.iter().map(|a| a.regions_selected).sum()),
        other => Err(Error::UnsupportedStyle(other.name().to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_mask(n: usize, lo: usize, hi: usize) -> Grid<u8> {
        Grid::from_fn(n, n, |y, x| {
            if (lo..hi).contains(&y) && (lo..hi).contains(&x) {
                FOREGROUND
            } else {
                BACKGROUND
            }
        })
    }

    fn labeled(a: &Annotation, class: u8) -> Vec<(usize, usize)> {
        let (h, w) = a.mask.labels().dims();
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| a.mask.labels().get(y, x) == class)
            .collect()
    }

    #[test]
    fn points_label_n_per_class() {
        let dense = square_mask(32, 8, 24);
        let a = sparsify_points(&dense, 2, 20, &mut crate::rng(1)).unwrap();
        assert_eq!(a.mask.labeled_count(), 40);
        assert_eq!(a.mask.class_count(FOREGROUND), 20);
        assert_eq!(a.mask.class_count(BACKGROUND), 20);
        assert!(!a.degenerate);
    }

    #[test]
    fn points_clamp_to_small_objects() {
        let mut dense = Grid::filled(16, 16, BACKGROUND);
        for x in 0..3 {
            dense.set(5, x, FOREGROUND);
        }
        let a = sparsify_points(&dense, 2, 5, &mut crate::rng(1)).unwrap();
        assert_eq!(a.mask.class_count(FOREGROUND), 3);
        assert_eq!(a.mask.class_count(BACKGROUND), 5);
    }

    #[test]
    fn points_need_both_classes() {
        let dense = Grid::filled(8, 8, BACKGROUND);
        assert!(matches!(
            sparsify_points(&dense, 2, 3, &mut crate::rng(0)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn grid_positions_match_enumeration() {
        let dense = Grid::from_fn(8, 8, |y, x| if (y + x) % 3 == 0 { FOREGROUND } else { BACKGROUND });
        let a = grid_at(&dense, 2, 4, (1, 2));
        let mut expected = Vec::new();
        for y in 0..8 {
            for x in 0..8 {
                if y % 4 == 1 && x % 4 == 2 {
                    expected.push((y, x));
                }
            }
        }
        let got: Vec<(usize, usize)> = (0..8)
            .flat_map(|y| (0..8).map(move |x| (y, x)))
            .filter(|&(y, x)| a.mask.labels().get(y, x) != UNKNOWN)
            .collect();
        assert_eq!(got, expected);
        assert_eq!(got, vec![(1, 2), (1, 6), (5, 2), (5, 6)]);
        for (y, x) in got {
            assert_eq!(a.mask.labels().get(y, x), dense.get(y, x));
        }
    }

    #[test]
    fn grid_spacing_must_fit() {
        let dense = square_mask(8, 2, 6);
        assert!(sparsify_grid(&dense, 2, 8, &mut crate::rng(0)).is_err());
        assert!(sparsify_grid(&dense, 2, 1, &mut crate::rng(0)).is_err());
    }

    #[test]
    fn contours_of_a_square() {
        // 10×10 square at rows/cols 11..21 of a 32×32 image
        let dense = square_mask(32, 11, 21);
        let a = sparsify_contours(&dense, 1.0, 1, 1, &mut crate::rng(2)).unwrap();
        // independent construction: ring of the 8×8 eroded square
        let ring = |lo: usize, hi: usize| -> Vec<(usize, usize)> {
            (lo..hi)
                .flat_map(|y| (lo..hi).map(move |x| (y, x)))
                .filter(|&(y, x)| y == lo || y == hi - 1 || x == lo || x == hi - 1)
                .collect()
        };
        assert_eq!(labeled(&a, FOREGROUND), ring(12, 20));
        // the radius-1 disk is a plus sign: 12×12 ring without its corners
        let corners = [(10, 10), (10, 21), (21, 10), (21, 21)];
        let outer: Vec<_> = ring(10, 22).into_iter().filter(|p| !corners.contains(p)).collect();
        assert_eq!(labeled(&a, BACKGROUND), outer);
        assert!(a.warnings.is_empty());
    }

    #[test]
    fn contours_at_zero_density_are_degenerate() {
        let dense = square_mask(32, 11, 21);
        let a = sparsify_contours(&dense, 0.0, 1, 1, &mut crate::rng(2)).unwrap();
        assert_eq!(a.mask.labeled_count(), 0);
        assert!(a.degenerate);
    }

    #[test]
    fn contours_warn_when_erosion_empties_foreground() {
        let mut dense = Grid::filled(16, 16, BACKGROUND);
        dense.set(7, 7, FOREGROUND);
        let a = sparsify_contours(&dense, 1.0, 1, 1, &mut crate::rng(0)).unwrap();
        assert_eq!(a.mask.class_count(FOREGROUND), 0);
        assert!(a.degenerate);
        assert_eq!(a.warnings.len(), 1);
    }

    #[test]
    fn skeleton_of_a_line_is_the_line() {
        let dense = Grid::from_fn(16, 24, |y, x| if y == 8 && (3..21).contains(&x) { FOREGROUND } else { BACKGROUND });
        let a = sparsify_skeletons(&dense, 1.0, 0, 0.1, &mut crate::rng(4)).unwrap();
        assert_eq!(a.mask.labels().map(|v| v == FOREGROUND), dense.map(|v| v == FOREGROUND));
    }

    #[test]
    fn skeleton_density_is_monotone() {
        let dense = square_mask(48, 10, 38);
        let full = sparsify_skeletons(&dense, 1.0, 1, 0.1, &mut crate::rng(9)).unwrap();
        let half = sparsify_skeletons(&dense, 0.5, 1, 0.1, &mut crate::rng(9)).unwrap();
        assert!(full.mask.labeled_count() > half.mask.labeled_count());
        for (f, h) in full.mask.labels().data().iter().zip(half.mask.labels().data()) {
            assert!(*h == UNKNOWN || h == f);
        }
    }

    fn quadrants() -> Grid<u32> {
        Grid::from_fn(8, 8, |y, x| (y / 4 * 2 + x / 4) as u32)
    }

    #[test]
    fn quadrant_regions() {
        // foreground is the left half: quadrants 0 and 2
        let dense = Grid::from_fn(8, 8, |_, x| if x < 4 { FOREGROUND } else { BACKGROUND });
        let a = regions_from_superpixels(&dense, 2, &quadrants(), 1.0, &mut crate::rng(0));
        assert_eq!(a.regions_selected, 4);
        assert_eq!(a.mask.labels(), &dense);
        assert!(!a.degenerate);
    }

    #[test]
    fn region_density_halves_the_selection() {
        let superpixels = Grid::from_fn(8, 16, |y, x| (y / 4 * 4 + x / 4) as u32);
        let dense = Grid::from_fn(8, 16, |_, x| if x < 8 { FOREGROUND } else { BACKGROUND });
        let a = regions_from_superpixels(&dense, 2, &superpixels, 0.5, &mut crate::rng(3));
        assert_eq!(a.regions_selected, 4);
        assert_eq!(a.mask.class_count(FOREGROUND), 2 * 16);
        assert_eq!(a.mask.class_count(BACKGROUND), 2 * 16);
    }

    #[test]
    fn straddling_superpixels_give_degenerate_mask() {
        // every quadrant mixes both classes
        let dense = Grid::from_fn(8, 8, |y, x| if (y + x) % 2 == 0 { FOREGROUND } else { BACKGROUND });
        let a = regions_from_superpixels(&dense, 2, &quadrants(), 1.0, &mut crate::rng(0));
        assert!(a.degenerate);
        assert_eq!(a.regions_selected, 0);
        assert_eq!(a.warnings.len(), 2);
    }

    #[test]
    fn regions_on_real_slic_are_sound() {
        let dense = square_mask(32, 8, 24);
        let image = Image::new(
            1,
            32,
            32,
            dense.data().iter().map(|&v| if v == FOREGROUND { 0.8 } else { 0.2 }).collect(),
        );
        let a = sparsify_regions(&dense, 2, &image, 0.5, 16, 10.0, &mut crate::rng(1)).unwrap();
        assert!(a.regions_selected > 0);
        for (l, d) in a.mask.labels().data().iter().zip(dense.data()) {
            assert!(*l == UNKNOWN || l == d);
        }
    }

    #[test]
    fn input_counts() {
        let dense = square_mask(32, 8, 24);
        let pts: Vec<_> = (0..3)
            .map(|s| sparsify_points(&dense, 2, 10, &mut crate::rng(s)).unwrap())
            .collect();
        assert_eq!(count_user_inputs(&pts, &AnnotationStyle::Points { n: 10 }).unwrap(), 60);

        let g = grid_at(&dense, 2, 4, (0, 0));
        let positives = (0..32)
            .flat_map(|y| (0..32).map(move |x| (y, x)))
            .filter(|&(y, x)| y % 4 == 0 && x % 4 == 0 && dense.get(y, x) == FOREGROUND)
            .count();
        assert_eq!(count_user_inputs(&[g], &AnnotationStyle::Grid { spacing: 4 }).unwrap(), positives);

        let c = sparsify_contours(&dense, 1.0, 1, 1, &mut crate::rng(0)).unwrap();
        assert!(matches!(
            count_user_inputs(&[c], &AnnotationStyle::Contours { density: 1.0, erosion_radius: 1, dilation_radius: 1 }),
            Err(Error::UnsupportedStyle(_))
        ));
    }

    #[test]
    fn config_parses_from_toml() {
        let cfg: SparsifyConfig = toml::from_str("style = \"points\"\nn = 20\nseed = 4").unwrap();
        assert_eq!(cfg, SparsifyConfig::points(20, 4));
        let cfg: SparsifyConfig = toml::from_str("style = \"contours\"\ndensity = 0.5").unwrap();
        assert_eq!(
            cfg.style,
            AnnotationStyle::Contours { density: 0.5, erosion_radius: 2, dilation_radius: 2 }
        );
        assert!(toml::from_str::<SparsifyConfig>("style = \"scribbles\"").is_err());
    }
}
