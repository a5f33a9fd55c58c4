//! SVG figures drawn from the summary CSV files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plotters::prelude::*;

/// `(ablation, points)` in file order.
pub type Series = Vec<(String, Vec<(f64, f64)>)>;

fn read_series(path: &Path, x_col: &str, y_col: &str) -> Result<Series> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{} has no `{name}` column", path.display()))
    };
    let (a, x, y) = (col("ablation")?, col(x_col)?, col(y_col)?);
    let mut series: Series = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec[y].is_empty() {
            continue;
        }
        let point = (rec[x].parse::<f64>()?, rec[y].parse::<f64>()?);
        match series.iter_mut().find(|(name, _)| name == &rec[a]) {
            Some((_, pts)) => pts.push(point),
            None => series.push((rec[a].to_string(), vec![point])),
        }
    }
    if series.is_empty() {
        bail!("{} holds no values", path.display());
    }
    Ok(series)
}

pub fn evolution_series(metrics_dir: &Path) -> Result<Series> {
    read_series(&metrics_dir.join("evolution.csv"), "step", "miou_all")
}

pub fn per_class_series(metrics_dir: &Path) -> Result<Series> {
    read_series(&metrics_dir.join("per_class.csv"), "class", "iou")
}

fn draw_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow::anyhow!("drawing failed: {e:?}")
}

/// mIoU after each step, one line per ablation.
pub fn plot_evolution(series: &Series, out: &Path) -> Result<()> {
    let max_step = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.0))
        .fold(1.0, f64::max);
    let root = SVGBackend::new(out, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("mIoU evolution", ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.8..max_step + 0.2, 0.0..1.0)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("mIoU (all classes)")
        .x_labels(max_step as usize)
        .x_label_formatter(&|v| format!("{v:.0}"))
        .draw()
        .map_err(draw_err)?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(draw_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerLeft)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

/// Final per-class IoU of one ablation as a bar chart.
pub fn plot_per_class(name: &str, points: &[(f64, f64)], out: &Path) -> Result<()> {
    let k = points.iter().map(|p| p.0).fold(0.0, f64::max) as i32 + 1;
    let root = SVGBackend::new(out, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("per-class IoU: {name}"), ("sans-serif", 20))
        .margin(16)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((0..k - 1).into_segmented(), 0.0..1.0)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("class")
        .y_desc("IoU")
        .draw()
        .map_err(draw_err)?;
    chart
        .draw_series(points.iter().map(|&(c, v)| {
            let c = c as i32;
            Rectangle::new(
                [(SegmentValue::Exact(c), 0.0), (SegmentValue::Exact(c + 1), v)],
                BLUE.mix(0.6).filled(),
            )
        }))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

/// Draws every figure; returns the written paths.
pub fn plot_all(metrics_dir: &Path, figures_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(figures_dir)?;
    let mut written = Vec::new();
    let evo = evolution_series(metrics_dir)?;
    let path = figures_dir.join("miou_evolution.svg");
    plot_evolution(&evo, &path)?;
    written.push(path);
    let per_class: BTreeMap<String, Vec<(f64, f64)>> = per_class_series(metrics_dir)?.into_iter().collect();
    for (name, points) in &per_class {
        let path = figures_dir.join(format!("per_class_{name}.svg"));
        plot_per_class(name, points, &path)?;
        written.push(path);
    }
    Ok(written)
}
