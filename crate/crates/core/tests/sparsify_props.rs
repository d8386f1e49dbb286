//! Invariants every simulated annotation must satisfy.

use proptest::prelude::*;
use sparseg::data::{Grid, Image, Sample, BACKGROUND, FOREGROUND};
use sparseg::sparsify::{annotate, AnnotationStyle, SparsifyConfig};
use sparseg::rng;

/// Binary sample with a rectangle of foreground, never touching every pixel.
fn rect_sample(size: usize, y0: usize, x0: usize, h: usize, w: usize) -> Sample {
    let mask = Grid::from_fn(size, size, |y, x| {
        if (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x) {
            FOREGROUND
        } else {
            BACKGROUND
        }
    });
    let gray = Grid::from_fn(size, size, |y, x| {
        let base = if mask.get(y, x) == FOREGROUND { 0.8 } else { 0.2 };
        base + 0.02 * (((y * 7 + x * 3) % 5) as f64 - 2.0)
    });
    Sample::new("rect", Image::from_gray(&gray), mask, 2).unwrap()
}

fn sample_strategy() -> impl Strategy<Value = Sample> {
    (16usize..=24).prop_flat_map(|size| {
        (2usize..size / 2, 2usize..size / 2)
            .prop_flat_map(move |(h, w)| (0..=size - h, 0..=size - w, Just(h), Just(w)))
            .prop_map(move |(y0, x0, h, w)| rect_sample(size, y0, x0, h, w))
    })
}

fn style_strategy() -> impl Strategy<Value = AnnotationStyle> {
    prop_oneof![
        (1usize..12).prop_map(|n| AnnotationStyle::Points { n }),
        (2usize..9).prop_map(|spacing| AnnotationStyle::Grid { spacing }),
        (0.1f64..=1.0).prop_map(|density| AnnotationStyle::Contours {
            density,
            erosion_radius: 1,
            dilation_radius: 1,
        }),
        (0.1f64..=1.0, 0usize..2).prop_map(|(density, thickness)| AnnotationStyle::Skeletons {
            density,
            thickness,
            blob_size_fraction: 0.1,
        }),
        (0.1f64..=1.0).prop_map(|density| AnnotationStyle::Regions {
            density,
            segments: 12,
            compactness: 10.0,
        }),
        Just(AnnotationStyle::Dense),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_agree_with_ground_truth(sample in sample_strategy(), style in style_strategy(), seed in any::<u64>()) {
        let config = SparsifyConfig::new(style, seed);
        let a = annotate(&sample, &config, &mut rng(seed)).unwrap();
        let labels = a.mask.labels();
        prop_assert_eq!(labels.dims(), sample.dense_mask.dims());
        for (&l, &d) in labels.data().iter().zip(sample.dense_mask.data()) {
            prop_assert!(l == 0 || l == d, "label {} on a pixel of class {}", l, d);
        }
        let again = annotate(&sample, &config, &mut rng(seed)).unwrap();
        prop_assert_eq!(a, again);
    }

    #[test]
    fn points_label_min_of_n_and_class_size(sample in sample_strategy(), n in 1usize..40, seed in any::<u64>()) {
        let a = annotate(&sample, &SparsifyConfig::points(n, seed), &mut rng(seed)).unwrap();
        for class in [BACKGROUND, FOREGROUND] {
            prop_assert_eq!(a.mask.class_count(class), n.min(sample.dense_mask.count(class)));
        }
        prop_assert!(!a.degenerate);
    }

    #[test]
    fn grid_labels_sit_on_one_lattice(sample in sample_strategy(), spacing in 2usize..9, seed in any::<u64>()) {
        let config = SparsifyConfig::new(AnnotationStyle::Grid { spacing }, seed);
        let a = annotate(&sample, &config, &mut rng(seed)).unwrap();
        let (h, w) = a.mask.labels().dims();
        let labeled: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| a.mask.labels().get(y, x) != 0)
            .collect();
        prop_assert!(!labeled.is_empty());
        let (oy, ox) = (labeled[0].0 % spacing, labeled[0].1 % spacing);
        prop_assert!(labeled.iter().all(|&(y, x)| y % spacing == oy && x % spacing == ox));
        let expected = (oy..h).step_by(spacing).count() * (ox..w).step_by(spacing).count();
        prop_assert_eq!(labeled.len(), expected);
    }

    #[test]
    fn dense_style_labels_everything(sample in sample_strategy()) {
        let a = annotate(&sample, &SparsifyConfig::dense(), &mut rng(0)).unwrap();
        prop_assert_eq!(a.mask.labels(), &sample.dense_mask);
    }
}
