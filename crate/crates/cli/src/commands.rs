use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;
use sparseg::bench::{
    adapt, evaluate, fold_task, load_experiment_data, prepare, target_folds, ExperimentConfig, ExperimentData,
    Method, Prepared,
};
use sparseg::data::{list_images, load_sample, save_labels, Manifest};
use sparseg::network::Network;
use sparseg::report::{group_by_method_and_task, label_efficiency_curve, read_reports, write_reports, MetricReport};
use sparseg::sparsify::{annotate, count_user_inputs, SparsifyConfig};
use sparseg::Error;

use crate::plots;
use crate::GlobalArgs;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.safetensors";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const REPORTS_FILE: &str = "reports.jsonl";

#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration; exit status 2.
    Usage(String),
    /// Anything that went wrong while running; exit status 1.
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Manifest { .. } | Error::UnsupportedStyle(_) => Self::Usage(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn require_out(g: &GlobalArgs) -> Result<&Path, Failure> {
    g.out
        .as_deref()
        .ok_or_else(|| Failure::Usage("--out is required".into()))
}

fn require_config(g: &GlobalArgs) -> Result<&Path, Failure> {
    g.config
        .as_deref()
        .ok_or_else(|| Failure::Usage("--config is required".into()))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// The experiment config with flag overrides applied.
pub fn load_config(g: &GlobalArgs) -> Result<ExperimentConfig, Failure> {
    let path = require_config(g)?;
    let preset = g.preset.as_deref().map(str::parse).transpose()?;
    let mut config = ExperimentConfig::load(path, preset).map_err(|e| match e {
        Error::Io { .. } => Failure::Usage(e.to_string()),
        other => other.into(),
    })?;
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if let Some(order) = &g.order {
        config.meta.order = order.parse()?;
    }
    config.validate()?;
    Ok(config)
}

pub fn sparsify(g: &GlobalArgs, dataset: &Path) -> Outcome {
    let out = require_out(g)?;
    let path = require_config(g)?;
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut config = SparsifyConfig::parse(&text)?;
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    let files = list_images(dataset)?;
    if files.is_empty() {
        log::info!("no images under {}", dataset.display());
        return Ok(());
    }
    let manifest = Manifest::read(&dataset.join("manifest.toml"))?;
    config.style = config.style.with_slic(manifest.slic_segments, manifest.slic_compactness);
    let masks = out.join("masks");
    create_dir(&masks)?;
    let mut failures = Vec::new();
    for (i, file) in files.iter().enumerate() {
        if let Err(e) = sparsify_one(dataset, &manifest, file, &config, i, &masks) {
            eprintln!("{}: {e}", file.display());
            failures.push(file.display().to_string());
        }
    }
    println!(
        "annotated {} of {} images with {}",
        files.len() - failures.len(),
        files.len(),
        config.style.label()
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} images failed", failures.len())))
    }
}

fn sparsify_one(
    root: &Path,
    manifest: &Manifest,
    file: &Path,
    config: &SparsifyConfig,
    index: usize,
    masks: &Path,
) -> sparseg::Result<()> {
    let sample = load_sample(root, manifest, file)?;
    let seed = sparseg::derive_seed(config.seed, &[index as u64]);
    let annotation = annotate(&sample, config, &mut sparseg::rng(seed))?;
    for w in &annotation.warnings {
        log::warn!("{}: {w}", sample.id);
    }
    let stem = file.file_stem().unwrap_or_default().to_string_lossy();
    save_labels(&masks.join(format!("{stem}.png")), annotation.mask.labels())?;
    let class_counts: Vec<usize> = (1..=sample.num_classes)
        .map(|k| annotation.mask.class_count(k))
        .collect();
    let sidecar = json!({
        "id": sample.id,
        "annotation": config.style,
        "seed": config.seed,
        "image_seed": seed,
        "labeled_pixels": annotation.mask.labeled_count(),
        "class_counts": class_counts,
        "degenerate": annotation.degenerate,
        "regions_selected": annotation.regions_selected,
        "user_inputs": count_user_inputs(std::slice::from_ref(&annotation), &config.style).ok(),
        "warnings": annotation.warnings,
    });
    let path = masks.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

pub fn metatrain(g: &GlobalArgs) -> Outcome {
    let config = load_config(g)?;
    let out = require_out(g)?;
    if config.method == Method::Scratch {
        return Err(Failure::Usage("the scratch baseline has no per-run model to train".into()));
    }
    let data = load_experiment_data(&config)?;
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), &config.to_toml())?;
    let epochs = config.meta.epochs;
    let prepared = prepare(&config, &data, &mut |epoch, _| {
        if (epoch + 1) % 10 == 0 || epoch + 1 == epochs {
            log::info!("meta-epoch {}/{epochs}", epoch + 1);
        }
        Ok(())
    })?;
    let net = prepared.network.as_ref().expect("non-scratch methods prepare a network");
    net.save(&out.join(CHECKPOINT_FILE))?;
    let mut log_text = String::new();
    for entry in &prepared.log {
        log_text.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        log_text.push('\n');
    }
    write_file(&out.join(TRAIN_LOG_FILE), &log_text)?;
    let skipped = prepared.log.iter().filter(|e| e.skipped.is_some()).count();
    println!(
        "{}: trained {} model ({} tasks, {skipped} skipped episodes) -> {}",
        config.name,
        config.method.name(),
        data.distribution.len(),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn load_prepared(config: &ExperimentConfig, data: &ExperimentData, out: &Path) -> Result<Prepared, Failure> {
    if config.method == Method::Scratch {
        return Ok(Prepared {
            network: None,
            log: Vec::new(),
        });
    }
    let path = out.join(CHECKPOINT_FILE);
    if !path.is_file() {
        return Err(Failure::Runtime(format!(
            "missing checkpoint {}; run `sparseg metatrain` first",
            path.display()
        )));
    }
    let net = Network::load(&path)?;
    let expected = config.network_spec(data.in_channels);
    if net.spec != expected {
        return Err(Failure::Runtime(format!(
            "checkpoint {} holds a {:?} network, the config asks for {:?}",
            path.display(),
            net.spec,
            expected
        )));
    }
    Ok(Prepared {
        network: Some(net),
        log: Vec::new(),
    })
}

fn slug(text: &str) -> String {
    let mut s: String = text
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c.to_ascii_lowercase() } else { '-' })
        .collect();
    while s.contains("--") {
        s = s.replace("--", "-");
    }
    s.trim_matches('-').to_string()
}

pub fn tune(g: &GlobalArgs) -> Outcome {
    let config = load_config(g)?;
    let out = require_out(g)?;
    let data = load_experiment_data(&config)?;
    let prepared = load_prepared(&config, &data, out)?;
    if config.method == Method::Protoseg {
        println!("protoseg adapts through support prototypes at evaluation time; nothing to tune");
        return Ok(());
    }
    let dir = out.join("tuned");
    create_dir(&dir)?;
    let folds = target_folds(&config, &data)?;
    let mut failures = Vec::new();
    for &shots in &config.shots {
        for style in &config.annotations {
            for (i, fold) in folds.iter().enumerate() {
                let name = format!("fold{i}-{shots}shot-{}.safetensors", slug(&style.label()));
                let tuned = fold_task(&config, &data, fold, i, shots, style)
                    .and_then(|task| adapt(&config, &data, &prepared, &task, i))
                    .and_then(|net| net.save(&dir.join(&name)));
                if let Err(e) = tuned {
                    eprintln!("fold {i}, {shots}-shot {}: {e}", style.label());
                    failures.push(name);
                }
            }
        }
    }
    if failures.is_empty() {
        println!("tuned checkpoints in {}", dir.display());
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} tuning runs failed", failures.len())))
    }
}

fn print_summary(reports: &[MetricReport]) {
    println!("{:<10} {:<24} {:<28} {:>8} {:>8} {:>9}", "method", "task", "setting", "mean", "std", "inputs");
    for r in reports {
        let inputs = r.mean_user_inputs.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
        println!(
            "{:<10} {:<24} {:<28} {:>8.4} {:>8.4} {:>9}",
            r.method.name(),
            r.task,
            r.setting(),
            r.mean,
            r.std,
            inputs
        );
    }
}

pub fn eval(g: &GlobalArgs) -> Outcome {
    let config = load_config(g)?;
    let out = require_out(g)?;
    let data = load_experiment_data(&config)?;
    let prepared = load_prepared(&config, &data, out)?;
    let reports = evaluate(&config, &data, &prepared)?;
    let path = out.join(REPORTS_FILE);
    write_reports(&path, &reports)?;
    print_summary(&reports);
    println!("wrote {}", path.display());
    let failed: Vec<String> = reports
        .iter()
        .flat_map(|r| {
            r.folds
                .iter()
                .filter(|f| f.jaccard.is_none())
                .map(move |f| format!("{}, fold {}: {}", r.setting(), f.fold, f.error.as_deref().unwrap_or("failed")))
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} folds failed:\n  {}", failed.len(), failed.join("\n  "))))
    }
}

pub fn report(g: &GlobalArgs, inputs: &[PathBuf]) -> Outcome {
    let out = require_out(g)?;
    let paths: Vec<PathBuf> = if inputs.is_empty() {
        vec![out.join(REPORTS_FILE)]
    } else {
        inputs.to_vec()
    };
    let mut reports = Vec::new();
    for p in &paths {
        if !p.is_file() {
            return Err(Failure::Runtime(format!("missing report file {}", p.display())));
        }
        reports.extend(read_reports(p)?);
    }
    let dir = out.join("report");
    create_dir(&dir)?;
    print_summary(&reports);

    let mut tasks: Vec<&str> = reports.iter().map(|r| r.task.as_str()).collect();
    tasks.sort_unstable();
    tasks.dedup();
    for task in tasks {
        let of_task: Vec<&MetricReport> = reports.iter().filter(|r| r.task == task).collect();
        let path = dir.join(format!("scores-{}.svg", slug(task)));
        plots::scores_chart(&path, task, &of_task).map_err(Failure::Runtime)?;
    }

    for ((method, task), group) in group_by_method_and_task(&reports) {
        let rows = label_efficiency_curve(&group)?;
        if rows.is_empty() {
            continue;
        }
        let stem = format!("efficiency-{}-{}", method.name(), slug(&task));
        let csv_path = dir.join(format!("{stem}.csv"));
        let csv_err = |e: csv::Error| Failure::Runtime(format!("{}: {e}", csv_path.display()));
        let mut writer = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
        for r in &rows {
            writer.serialize(r).map_err(csv_err)?;
        }
        writer.flush().map_err(|e| Failure::Runtime(format!("{}: {e}", csv_path.display())))?;
        let title = format!("{} on {task}", method.name());
        plots::efficiency_chart(&dir.join(format!("{stem}.svg")), &title, &rows).map_err(Failure::Runtime)?;
    }
    let mut summary = fs::File::create(dir.join("summary.jsonl"))
        .map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    for r in &reports {
        let line = json!({
            "method": r.method.name(),
            "task": r.task,
            "setting": r.setting(),
            "mean": r.mean,
            "std": r.std,
            "mean_user_inputs": r.mean_user_inputs,
            "failed_folds": r.failed_folds(),
        });
        writeln!(summary, "{line}").map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    println!("wrote charts and tables to {}", dir.display());
    Ok(())
}
