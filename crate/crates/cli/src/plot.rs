//! SVG renderings of the training and sweep CSVs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use plotters::prelude::*;

/// Header and numeric rows of a CSV written by the trainer.
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| anyhow!("{} is empty", path.display()))?
        .split(',')
        .map(str::to_owned)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| format!("{}: bad row {l:?}", path.display()))
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| anyhow!("{} has no column {name}", path.display()))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn line_chart(out: &Path, caption: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let root = SVGBackend::new(out, (800, 500)).into_drawing_area();
    let draw = || -> Result<(), Box<dyn std::error::Error + '_>> {
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(caption, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, y0..y1)?;
        chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| anyhow!("rendering {}: {e}", out.display()))
}

/// Running mean over a trailing window, for readable per-step loss traces.
fn smooth(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    let mut sum = 0.0;
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            sum += y;
            if i >= window {
                sum -= points[i - window].1;
            }
            (x, sum / (i + 1).min(window) as f64)
        })
        .collect()
}

/// `loss.svg` and `val.svg` from a training directory.
pub fn training_curves(dir: &Path) -> Result<()> {
    let path = dir.join("loss.csv");
    let (header, rows) = read_table(&path)?;
    let step = column(&header, "step", &path)?;
    let series: Vec<_> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != step)
        .map(|(i, name)| {
            let pts: Vec<_> = rows.iter().map(|r| (r[step], r[i])).collect();
            (name.clone(), smooth(&pts, 50))
        })
        .collect();
    line_chart(&dir.join("loss.svg"), "Training loss (50-step mean)", "step", "loss", &series)?;

    let path = dir.join("val.csv");
    let (header, rows) = read_table(&path)?;
    let (step, psnr) = (column(&header, "step", &path)?, column(&header, "psnr", &path)?);
    let pts = rows.iter().map(|r| (r[step], r[psnr])).collect();
    line_chart(
        &dir.join("val.svg"),
        "Validation self-reconstruction",
        "step",
        "PSNR (dB)",
        &[("psnr".into(), pts)],
    )
}

/// `sweep.svg`: 1 → N PSNR against log2 codebook size, one line per latent
/// dimension.
pub fn sweep(dir: &Path) -> Result<()> {
    let path = dir.join("sweep.csv");
    let (header, rows) = read_table(&path)?;
    let d = column(&header, "latent_dim", &path)?;
    let k = column(&header, "num_codes", &path)?;
    let p = column(&header, "psnr_1to4", &path)?;
    let mut by_dim: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rows {
        by_dim.entry(r[d] as u64).or_default().push((r[k].log2(), r[p]));
    }
    let series: Vec<_> = by_dim
        .into_iter()
        .map(|(dim, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (format!("D={dim}"), pts)
        })
        .collect();
    line_chart(&dir.join("sweep.svg"), "Codebook sweep", "log2 K", "1->N PSNR (dB)", &series)
}
