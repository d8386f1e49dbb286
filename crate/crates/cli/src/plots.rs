//! SVG charts of reports.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;
use sparseg::report::{EfficiencyRow, MetricReport};
use sparseg::sparsify::AnnotationStyle;

const SIZE: (u32, u32) = (800, 520);

fn err(e: impl std::fmt::Display) -> String {
    format!("chart: {e}")
}

/// Mean Jaccard per shot count, one line per (method, setting). Dense
/// settings are dashed so they read as the reference.
pub fn scores_chart(path: &Path, task: &str, reports: &[&MetricReport]) -> Result<(), String> {
    let mut shots: Vec<usize> = reports.iter().map(|r| r.shots).collect();
    shots.sort_unstable();
    shots.dedup();
    let mut series: BTreeMap<(String, String), (bool, Vec<(f64, f64)>)> = BTreeMap::new();
    for r in reports {
        let x = shots.iter().position(|&s| s == r.shots).unwrap_or(0) as f64;
        let entry = series
            .entry((r.method.name().to_string(), r.annotation.label()))
            .or_insert((r.annotation == AnnotationStyle::Dense, Vec::new()));
        entry.1.push((x, r.mean));
    }

    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let x_max = (shots.len().max(2) - 1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Jaccard on {task}"), ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(-0.25..x_max + 0.25, 0.0..1.0)
        .map_err(err)?;
    let labels = shots.clone();
    chart
        .configure_mesh()
        .x_desc("shots")
        .y_desc("mean Jaccard")
        .x_labels(shots.len().max(2))
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                labels.get(i as usize).map_or_else(String::new, |s| s.to_string())
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(err)?;
    for (i, ((method, setting), (dense, mut points))) in series.into_iter().enumerate() {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = Palette99::pick(i).to_rgba();
        let style = color.stroke_width(2);
        let name = format!("{method}, {setting}");
        if dense {
            chart
                .draw_series(DashedLineSeries::new(points.clone(), 8, 5, style))
                .map_err(err)?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        } else {
            chart
                .draw_series(LineSeries::new(points.clone(), style))
                .map_err(err)?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
        chart
            .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)
}

/// User inputs against mean Jaccard, one line per annotation style.
pub fn efficiency_chart(path: &Path, title: &str, rows: &[EfficiencyRow]) -> Result<(), String> {
    let mut by_style: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        by_style.entry(&r.style).or_default().push((r.inputs, r.mean));
    }
    let x_max = rows.iter().map(|r| r.inputs).fold(1.0, f64::max) * 1.05;

    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Label efficiency, {title}"), ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..x_max, 0.0..1.0)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("user inputs")
        .y_desc("mean Jaccard")
        .draw()
        .map_err(err)?;
    for (i, (style, points)) in by_style.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
            .map_err(err)?
            .label(style)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        chart
            .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)
}
