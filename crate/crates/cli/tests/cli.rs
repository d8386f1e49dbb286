use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use image::{GrayImage, Luma};
use sparseg::report::{EfficiencyRow, label_efficiency_curve, read_reports};

fn sparseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparseg"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset of `n` 16×16 images whose mask has background 0, a square of
/// value 128 and a stripe of value 255.
fn write_dataset(root: &Path, name: &str, n: usize) {
    fs::create_dir_all(root.join("images")).unwrap();
    fs::create_dir_all(root.join("masks")).unwrap();
    fs::write(
        root.join("manifest.toml"),
        format!("name = \"{name}\"\nclasses = [0, 128, 255]\nbands = 1\nsize = [16, 16]\n"),
    )
    .unwrap();
    for i in 0..n {
        let mask = GrayImage::from_fn(16, 16, |x, y| {
            let (x, y) = (x as usize, y as usize);
            if (2 + i % 3..9 + i % 3).contains(&x) && (3..10).contains(&y) {
                Luma([128])
            } else if y >= 12 {
                Luma([255])
            } else {
                Luma([0])
            }
        });
        let img = GrayImage::from_fn(16, 16, |x, y| {
            let v = mask.get_pixel(x, y)[0] as u32;
            Luma([(v / 2 + 40 + (x * 7 + y * 3) % 11) as u8])
        });
        img.save(root.join(format!("images/img{i:02}.png"))).unwrap();
        mask.save(root.join(format!("masks/img{i:02}.png"))).unwrap();
    }
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn sparsify_of_an_empty_directory_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("empty");
    fs::create_dir(&data).unwrap();
    let cfg = tmp.path().join("points.toml");
    fs::write(&cfg, "style = \"points\"\nn = 3\n").unwrap();
    let out = tmp.path().join("out");
    let r = sparseg(&["sparsify", "--dataset", path(&data), "--config", path(&cfg), "--out", path(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!out.exists());
}

#[test]
fn sparsify_rejects_an_unknown_style() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    write_dataset(&data, "d", 2);
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "style = \"scribbles\"\n").unwrap();
    let r = sparseg(&["sparsify", "--dataset", path(&data), "--config", path(&cfg), "--out", path(tmp.path())]);
    assert_eq!(code(&r), 2);
    fs::write(&cfg, "style = \"grid\"\nspacing = 1\n").unwrap();
    let r = sparseg(&["sparsify", "--dataset", path(&data), "--config", path(&cfg), "--out", path(tmp.path())]);
    assert_eq!(code(&r), 2);
}

#[test]
fn sparsify_is_sound_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    write_dataset(&data, "d", 3);
    let cfg = tmp.path().join("points.toml");
    fs::write(&cfg, "style = \"points\"\nn = 4\nseed = 9\n").unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let r = sparseg(&["sparsify", "--dataset", path(&data), "--config", path(&cfg), "--out", path(out)]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    }
    let files = read_dir_sorted(&a.join("masks"));
    assert_eq!(files.len(), 6);
    assert_eq!(files, read_dir_sorted(&b.join("masks")));

    let sparse = image::open(a.join("masks/img00.png")).unwrap().to_luma8();
    let dense = image::open(data.join("masks/img00.png")).unwrap().to_luma8();
    let mut labeled = 0;
    for (s, d) in sparse.pixels().zip(dense.pixels()) {
        if s[0] != 0 {
            labeled += 1;
            let expected = match d[0] {
                0 => 1,
                128 => 2,
                _ => 3,
            };
            assert_eq!(s[0], expected);
        }
    }
    assert_eq!(labeled, 12);
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("masks/img00.json")).unwrap()).unwrap();
    assert_eq!(sidecar["labeled_pixels"], 12);
    assert_eq!(sidecar["user_inputs"], 12);
    assert_eq!(sidecar["annotation"]["style"], "points");

    let other = tmp.path().join("c");
    let r = sparseg(&[
        "sparsify", "--dataset", path(&data), "--config", path(&cfg), "--out", path(&other), "--seed", "10",
    ]);
    assert_eq!(code(&r), 0);
    assert_ne!(read_dir_sorted(&other.join("masks")), files);
}

const SYNTH: &str = r#"
name = "cli"
method = "weasel"
preset = "synthetic"
shots = [1]
annotations = [{ style = "points", n = 3 }, { style = "points", n = 10 }]

[network]
widths = [2, 4, 8]

[meta]
epochs = 2
task_batch = 2
inner_batch = 2
query_batch = 2

[tune]
epochs = 2

[data]
kind = "synthetic"
[data.synth]
size = 16
images_per_family = 10
sources = [
  { name = "disks", kind = "disk", background = 0.25, foreground = 0.75, noise = 0.08, texture = 0.05 },
  { name = "rings", kind = "ring", background = 0.2, foreground = 0.8, noise = 0.06, texture = 0.04 },
]
held_out = { name = "triangles", kind = "triangle", background = 0.25, foreground = 0.75, noise = 0.08, texture = 0.05 }
"#;

#[test]
fn eval_without_a_checkpoint_fails_at_runtime() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, SYNTH).unwrap();
    let r = sparseg(&["eval", "--config", path(&cfg), "--out", path(&tmp.path().join("run"))]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stderr).contains("missing checkpoint"));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, SYNTH).unwrap();
    let run = tmp.path().join("run");
    let r = sparseg(&["eval", "--config", path(&cfg), "--out", path(&run), "--device", "cuda"]);
    assert_eq!(code(&r), 2);
    let r = sparseg(&["eval", "--config", path(&cfg), "--out", path(&run), "--order", "third"]);
    assert_eq!(code(&r), 2);
    let r = sparseg(&["eval", "--config", path(&tmp.path().join("missing.toml")), "--out", path(&run)]);
    assert_eq!(code(&r), 2);
    fs::write(&cfg, SYNTH.replace("shots = [1]", "shots = []")).unwrap();
    let r = sparseg(&["metatrain", "--config", path(&cfg), "--out", path(&run)]);
    assert_eq!(code(&r), 2);
    fs::write(&cfg, SYNTH.replace("\"weasel\"", "\"scratch\"")).unwrap();
    let r = sparseg(&["metatrain", "--config", path(&cfg), "--out", path(&run)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn metatrain_eval_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, SYNTH).unwrap();
    let run = tmp.path().join("run");
    let run_s = path(&run);

    let r = sparseg(&["metatrain", "--config", path(&cfg), "--out", run_s, "--order", "first"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["config.toml", "model.safetensors", "train_log.jsonl"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(fs::read_to_string(run.join("config.toml")).unwrap().contains("order = \"first\""));

    let r = sparseg(&["tune", "--config", path(&cfg), "--out", run_s, "--order", "first"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read_dir(run.join("tuned")).unwrap().count(), 2 * 5);

    let r = sparseg(&["eval", "--config", path(&cfg), "--out", run_s, "--order", "first"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let first = fs::read(run.join("reports.jsonl")).unwrap();
    let reports = read_reports(&run.join("reports.jsonl")).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.folds.len() == 5));

    // Idempotent: the same inputs give byte-identical reports.
    let r = sparseg(&["eval", "--config", path(&cfg), "--out", run_s, "--order", "first"]);
    assert_eq!(code(&r), 0);
    assert_eq!(fs::read(run.join("reports.jsonl")).unwrap(), first);

    let r = sparseg(&["report", "--out", run_s]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let dir = run.join("report");
    assert!(dir.join("scores-triangles.svg").is_file());
    let svg = fs::read_to_string(dir.join("efficiency-weasel-triangles.svg")).unwrap();
    assert!(svg.contains("<svg"));
    let mut csv = csv::Reader::from_path(dir.join("efficiency-weasel-triangles.csv")).unwrap();
    assert_eq!(csv.headers().unwrap(), vec!["setting", "style", "shots", "inputs", "mean", "std"]);
    let written: Vec<EfficiencyRow> = csv.deserialize().map(Result::unwrap).collect();
    assert_eq!(written, label_efficiency_curve(&reports).unwrap());
}

#[test]
fn directory_datasets_drive_an_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&tmp.path().join("alpha"), "alpha", 10);
    write_dataset(&tmp.path().join("beta"), "beta", 10);
    let cfg = tmp.path().join("exp.toml");
    fs::write(
        &cfg,
        r#"
name = "dirs"
method = "protoseg"
shots = [2]
annotations = [{ style = "grid", spacing = 4 }]
folds = 2

[network]
widths = [2, 4, 8]

[meta]
epochs = 2
task_batch = 2
inner_batch = 2
query_batch = 2

[data]
kind = "directory"
datasets = ["alpha"]
target = "beta"
target_class = 3
"#,
    )
    .unwrap();
    let run = tmp.path().join("run");
    let r = sparseg(&["metatrain", "--config", path(&cfg), "--out", path(&run)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert!(log.contains("alpha/"));
    assert!(!log.contains("beta/3"));
    let r = sparseg(&["eval", "--config", path(&cfg), "--out", path(&run)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let reports = read_reports(&run.join("reports.jsonl")).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].task, "beta/3");
    assert_eq!(reports[0].folds.len(), 2);
}
