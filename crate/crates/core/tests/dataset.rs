//! Loading PNG datasets from disk.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use sparseg::data::{load_dataset, save_labels, Grid, Manifest};
use sparseg::Error;

const MANIFEST: &str = r#"
name = "toy"
classes = [0, 128, 255]
bands = 1
size = [8, 8]
"#;

fn write_manifest(root: &Path, text: &str) -> Manifest {
    let path = root.join("manifest.toml");
    fs::write(&path, text).unwrap();
    Manifest::read(&path).unwrap()
}

fn write_pair(root: &Path, stem: &str, size: (u32, u32), mask_size: (u32, u32), mask_value: impl Fn(u32, u32) -> u8) {
    fs::create_dir_all(root.join("images")).unwrap();
    fs::create_dir_all(root.join("masks")).unwrap();
    GrayImage::from_fn(size.0, size.1, |x, y| Luma([((x + y) * 8) as u8]))
        .save(root.join("images").join(format!("{stem}.png")))
        .unwrap();
    GrayImage::from_fn(mask_size.0, mask_size.1, |x, y| Luma([mask_value(x, y)]))
        .save(root.join("masks").join(format!("{stem}.png")))
        .unwrap();
}

#[test]
fn masks_are_remapped_and_resized() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), MANIFEST);
    write_pair(dir.path(), "a", (16, 16), (16, 16), |x, _| match x / 6 {
        0 => 0,
        1 => 128,
        _ => 255,
    });
    let samples = load_dataset(dir.path(), &manifest).unwrap();
    assert_eq!(samples.len(), 1);
    let s = &samples[0];
    assert_eq!(s.id, "images/a.png");
    assert_eq!(s.dims(), (8, 8));
    assert_eq!(s.dense_mask.classes().into_iter().collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(s.dense_mask.get(0, 0), 1);
    assert_eq!(s.dense_mask.get(0, 7), 3);
    assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn missing_images_dir_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), MANIFEST);
    assert!(load_dataset(dir.path(), &manifest).unwrap().is_empty());
}

#[test]
fn missing_mask_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), MANIFEST);
    write_pair(dir.path(), "a", (8, 8), (8, 8), |_, _| 0);
    fs::remove_file(dir.path().join("masks/a.png")).unwrap();
    match load_dataset(dir.path(), &manifest) {
        Err(Error::MissingMask(id)) => assert_eq!(id, "images/a.png"),
        other => panic!("expected MissingMask, got {other:?}"),
    }
}

#[test]
fn undeclared_mask_value_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), MANIFEST);
    write_pair(dir.path(), "a", (8, 8), (8, 8), |x, y| if (x, y) == (3, 4) { 77 } else { 0 });
    match load_dataset(dir.path(), &manifest) {
        Err(Error::UnknownClass { value, .. }) => assert_eq!(value, 77),
        other => panic!("expected UnknownClass, got {other:?}"),
    }
}

#[test]
fn image_and_mask_sizes_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), MANIFEST);
    write_pair(dir.path(), "a", (16, 16), (8, 8), |_, _| 0);
    match load_dataset(dir.path(), &manifest) {
        Err(Error::SizeMismatch { image, mask, .. }) => {
            assert_eq!(image, (16, 16));
            assert_eq!(mask, (8, 8));
        }
        other => panic!("expected SizeMismatch, got {other:?}"),
    }
}

#[test]
fn bad_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.toml");
    for text in [
        "name = \"x\"\nclasses = [0]\nbands = 1\nsize = [8, 8]",
        "name = \"x\"\nclasses = [0, 0]\nbands = 1\nsize = [8, 8]",
        "name = \"x\"\nclasses = [0, 1]\nbands = 2\nsize = [8, 8]",
        "name = \"x\"\nclasses = [0, 1]\nbands = 1\nsize = [8, 12]",
        "name = \"x\"\nclasses = [0, 1]\nbands = 1\nsize = [8, 8]\nextra = 1",
    ] {
        fs::write(&path, text).unwrap();
        assert!(matches!(Manifest::read(&path), Err(Error::Manifest { .. })), "{text}");
    }
}

#[test]
fn saved_labels_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.png");
    let labels = Grid::from_fn(5, 7, |y, x| ((y * 7 + x) % 3) as u8);
    save_labels(&path, &labels).unwrap();
    let back = image::open(&path).unwrap().into_luma8();
    assert_eq!((back.width(), back.height()), (7, 5));
    assert_eq!(back.into_raw(), labels.data());
}
