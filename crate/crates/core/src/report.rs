//! Metric reports and the label-efficiency table.
//!
//! Reports persist as JSON lines: one `fold` record per fold followed by a
//! `summary` record carrying the whole report. Nothing time-dependent is
//! written, so identical runs give identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsify::AnnotationStyle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Weasel,
    Protoseg,
    Finetune,
    Scratch,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Weasel => "weasel",
            Self::Protoseg => "protoseg",
            Self::Finetune => "finetune",
            Self::Scratch => "scratch",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weasel" => Ok(Self::Weasel),
            "protoseg" => Ok(Self::Protoseg),
            "finetune" => Ok(Self::Finetune),
            "scratch" => Ok(Self::Scratch),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    /// Mean Jaccard over the fold's query images; `None` if the fold failed.
    pub jaccard: Option<f64>,
    pub query_images: usize,
    pub user_inputs: Option<usize>,
    pub labeled_pixels: usize,
    pub degenerate_support: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub experiment: String,
    pub method: Method,
    pub task: String,
    pub shots: usize,
    pub annotation: AnnotationStyle,
    pub folds: Vec<FoldRecord>,
    /// Mean and population standard deviation of the per-fold Jaccard over
    /// folds that produced a score.
    pub mean: f64,
    pub std: f64,
    /// User inputs averaged over folds, for countable styles.
    pub mean_user_inputs: Option<f64>,
    pub mean_labeled_pixels: f64,
    /// The resolved experiment configuration and seeds.
    pub provenance: serde_json::Value,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricReport {
    /// Fills the summary fields from `folds`.
    pub fn summarize(mut self) -> Self {
        let scores: Vec<f64> = self.folds.iter().filter_map(|f| f.jaccard).collect();
        (self.mean, self.std) = mean_std(&scores);
        let inputs: Option<Vec<f64>> = self.folds.iter().map(|f| f.user_inputs.map(|u| u as f64)).collect();
        self.mean_user_inputs = inputs.filter(|v| !v.is_empty()).map(|v| mean_std(&v).0);
        let pixels: Vec<f64> = self.folds.iter().map(|f| f.labeled_pixels as f64).collect();
        self.mean_labeled_pixels = mean_std(&pixels).0;
        self
    }

    pub fn setting(&self) -> String {
        format!("{}, {}-shot", self.annotation.label(), self.shots)
    }

    pub fn failed_folds(&self) -> usize {
        self.folds.iter().filter(|f| f.jaccard.is_none()).count()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Line {
    Fold {
        experiment: String,
        setting: String,
        #[serde(flatten)]
        fold: FoldRecord,
    },
    Summary(Box<MetricReport>),
}

/// Serializes reports to JSON lines.
pub fn to_jsonl(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    for r in reports {
        for f in &r.folds {
            let line = Line::Fold {
                experiment: r.experiment.clone(),
                setting: r.setting(),
                fold: f.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("report serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&Line::Summary(Box::new(r.clone()))).expect("report serializes"));
        out.push('\n');
    }
    out
}

/// Parses the summary records of a JSON-lines report.
pub fn from_jsonl(text: &str) -> Result<Vec<MetricReport>> {
    let mut reports = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        match serde_json::from_str::<Line>(line) {
            Ok(Line::Summary(r)) => reports.push(*r),
            Ok(Line::Fold { .. }) => {}
            Err(e) => return Err(Error::Config(format!("report line {}: {e}", i + 1))),
        }
    }
    Ok(reports)
}

pub fn write_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(to_jsonl(reports).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_reports(path: &Path) -> Result<Vec<MetricReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_jsonl(&text)
}

/// One point of a label-efficiency curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub setting: String,
    pub style: String,
    pub shots: usize,
    pub inputs: f64,
    pub mean: f64,
    pub std: f64,
}

/// User inputs versus Jaccard, sorted by inputs. Reports of styles without
/// a countable input are left out. All reports must share method and task.
pub fn label_efficiency_curve(reports: &[MetricReport]) -> Result<Vec<EfficiencyRow>> {
    if let Some(first) = reports.first() {
        if let Some(other) = reports
            .iter()
            .find(|r| r.method != first.method || r.task != first.task)
        {
            return Err(Error::Config(format!(
                "label-efficiency curve mixes {}/{} with {}/{}",
                first.method.name(),
                first.task,
                other.method.name(),
                other.task
            )));
        }
    }
    let mut rows: Vec<EfficiencyRow> = reports
        .iter()
        .filter_map(|r| {
            r.mean_user_inputs.map(|inputs| EfficiencyRow {
                setting: r.setting(),
                style: r.annotation.name().to_string(),
                shots: r.shots,
                inputs,
                mean: r.mean,
                std: r.std,
            })
        })
        .collect();
    rows.sort_by(|a, b| a.inputs.total_cmp(&b.inputs).then_with(|| a.setting.cmp(&b.setting)));
    Ok(rows)
}

/// Reports grouped by `(method, task)`, in a stable order.
pub fn group_by_method_and_task(reports: &[MetricReport]) -> BTreeMap<(Method, String), Vec<MetricReport>> {
    let mut groups: BTreeMap<(Method, String), Vec<MetricReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.method, r.task.clone())).or_default().push(r.clone());
    }
    groups
}
