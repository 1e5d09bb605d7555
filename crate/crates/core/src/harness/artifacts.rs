//! CSV and raster artifacts of a run.
//!
//! Plots are drawn directly into an RGB buffer: light grid, one polyline
//! per series, no text. Series colours are fixed so figures from different
//! runs compare at a glance.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use super::eval::Evaluation;
use super::metrics::{read_diversity_csv, read_metrics_csv, write_diversity_csv, MetricsRecord};
use crate::diversity::{pca_2d, DiversityReport};
use crate::error::{CssError, Result};

pub const DIVERSITY_PLOT: &str = "diversity.png";
pub const ACCURACY_PLOT: &str = "accuracy.png";
pub const FEATURE_PLOT: &str = "features.png";

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 30;

/// Maps data coordinates into a plotting area with a margin.
struct Canvas {
    img: RgbImage,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

impl Canvas {
    fn new(x_range: (f64, f64), y_range: (f64, f64)) -> Canvas {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        let grid = Rgb([225, 225, 225]);
        for i in 0..=4 {
            let y = MARGIN + i * (HEIGHT - 2 * MARGIN) / 4;
            let x = MARGIN + i * (WIDTH - 2 * MARGIN) / 4;
            for px in MARGIN..=WIDTH - MARGIN {
                img.put_pixel(px, y, grid);
            }
            for py in MARGIN..=HEIGHT - MARGIN {
                img.put_pixel(x, py, grid);
            }
        }
        Canvas {
            img,
            x_range: padded(x_range.0, x_range.1),
            y_range: padded(y_range.0, y_range.1),
        }
    }

    fn to_pixel(&self, x: f64, y: f64) -> (i64, i64) {
        let w = (WIDTH - 2 * MARGIN) as f64;
        let h = (HEIGHT - 2 * MARGIN) as f64;
        let fx = (x - self.x_range.0) / (self.x_range.1 - self.x_range.0);
        let fy = (y - self.y_range.0) / (self.y_range.1 - self.y_range.0);
        (
            (MARGIN as f64 + fx * w).round() as i64,
            (MARGIN as f64 + (1.0 - fy) * h).round() as i64,
        )
    }

    fn dot(&mut self, px: i64, py: i64, radius: i64, color: [u8; 3]) {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (x, y) = (px + dx, py + dy);
                if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
                    self.img.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
    }

    /// Bresenham segment, two pixels thick.
    fn segment(&mut self, a: (i64, i64), b: (i64, i64), color: [u8; 3]) {
        let (mut x, mut y) = a;
        let dx = (b.0 - a.0).abs();
        let dy = -(b.1 - a.1).abs();
        let sx = if a.0 < b.0 { 1 } else { -1 };
        let sy = if a.1 < b.1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.dot(x, y, 1, color);
            if (x, y) == b {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn polyline(&mut self, points: &[(f64, f64)], color: [u8; 3]) {
        let pixels: Vec<_> = points.iter().map(|&(x, y)| self.to_pixel(x, y)).collect();
        if pixels.len() == 1 {
            self.dot(pixels[0].0, pixels[0].1, 3, color);
        }
        for w in pixels.windows(2) {
            self.segment(w[0], w[1], color);
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path)?;
        Ok(())
    }
}

fn bounds<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Line plot of several `(x, y)` series. Empty series are skipped.
pub fn line_plot(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let xs = bounds(series.iter().flatten().map(|(x, _)| x));
    let ys = bounds(series.iter().flatten().map(|(_, y)| y));
    let mut canvas = Canvas::new(xs, ys);
    for (i, s) in series.iter().enumerate().filter(|(_, s)| !s.is_empty()) {
        canvas.polyline(s, PALETTE[i % PALETTE.len()]);
    }
    canvas.save(path)
}

/// 2-D scatter, one colour per label.
pub fn scatter_plot(path: &Path, points: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if points.ncols() != 2 || points.nrows() != labels.len() {
        return Err(CssError::ShapeMismatch(format!(
            "scatter needs [n x 2] points and n labels, got {:?} and {}",
            points.dim(),
            labels.len()
        )));
    }
    let mut canvas = Canvas::new(
        bounds(points.column(0).iter()),
        bounds(points.column(1).iter()),
    );
    for (row, &l) in points.rows().into_iter().zip(labels) {
        let (px, py) = canvas.to_pixel(row[0], row[1]);
        canvas.dot(px, py, 1, PALETTE[l % PALETTE.len()]);
    }
    canvas.save(path)
}

fn diversity_series(
    epochs: &[usize],
    intra: &[Option<f64>],
    inter: &[Option<f64>],
) -> Vec<Vec<(f64, f64)>> {
    let pick = |vals: &[Option<f64>]| -> Vec<(f64, f64)> {
        epochs
            .iter()
            .zip(vals)
            .filter_map(|(&e, v)| v.map(|v| (e as f64, v)))
            .collect()
    };
    vec![pick(intra), pick(inter)]
}

fn accuracy_series(rows: &[super::metrics::MetricsRow]) -> Vec<Vec<(f64, f64)>> {
    let pick = |f: &dyn Fn(&super::metrics::MetricsRow) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter()
            .filter_map(|r| f(r).map(|v| (r.epoch as f64, v)))
            .collect()
    };
    vec![
        pick(&|r| Some(r.net1_agg)),
        pick(&|r| r.net2_agg),
        pick(&|r| r.dual_ensemble),
        pick(&|r| Some(r.net1_branch_mean)),
        pick(&|r| r.net2_branch_mean),
    ]
}

/// Penultimate features of every branch, stacked and projected to 2-D,
/// labelled by transform (branch) id.
pub fn feature_scatter(path: &Path, features: &[Array2<f64>], cap: usize) -> Result<()> {
    let per = features.first().map_or(0, |f| f.nrows());
    let keep = (cap / features.len().max(1)).clamp(1, per.max(1));
    let stride = per.div_ceil(keep).max(1);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (j, f) in features.iter().enumerate() {
        for i in (0..per).step_by(stride) {
            rows.push(f.row(i).to_owned());
            labels.push(j);
        }
    }
    let d = features.first().map_or(0, |f| f.ncols());
    let mut stacked = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        stacked.row_mut(i).assign(r);
    }
    scatter_plot(path, &pca_2d(stacked.view()), &labels)
}

/// `diversity.csv`, its curve plot, and (given features) the transform scatter.
pub fn emit_diversity_artifacts(
    reports: &[DiversityReport],
    out_dir: &Path,
    features: Option<&[Array2<f64>]>,
) -> Result<()> {
    if reports.is_empty() {
        return Err(CssError::InvalidArgument(
            "no diversity reports to emit".into(),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CssError::io(out_dir, e))?;
    write_diversity_csv(&out_dir.join("diversity.csv"), reports)?;
    let epochs: Vec<usize> = reports.iter().map(|r| r.epoch).collect();
    let intra: Vec<Option<f64>> = reports.iter().map(|r| r.intra_net).collect();
    let inter: Vec<Option<f64>> = reports.iter().map(|r| r.inter_net).collect();
    line_plot(
        &out_dir.join(DIVERSITY_PLOT),
        &diversity_series(&epochs, &intra, &inter),
    )?;
    if let Some(f) = features {
        feature_scatter(&out_dir.join(FEATURE_PLOT), f, 2000)?;
    }
    Ok(())
}

/// All end-of-run artifacts.
pub fn emit_run_artifacts(
    run_dir: &Path,
    records: &[MetricsRecord],
    reports: &[DiversityReport],
    final_eval: &Evaluation,
) -> Result<()> {
    emit_diversity_artifacts(reports, run_dir, Some(&final_eval.net1.features))?;
    let rows: Vec<_> = records.iter().map(MetricsRecord::row).collect();
    line_plot(&run_dir.join(ACCURACY_PLOT), &accuracy_series(&rows))
}

/// Plain comma-separated matrix without a header.
pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut text = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CssError::io(path, e))
}

/// Re-renders the curve plots of a run directory from its CSV files.
pub fn plot_run(run_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let metrics = read_metrics_csv(&run_dir.join("metrics.csv"))?;
    let diversity = read_diversity_csv(&run_dir.join("diversity.csv"))?;
    let acc = run_dir.join(ACCURACY_PLOT);
    line_plot(&acc, &accuracy_series(&metrics))?;
    let div = run_dir.join(DIVERSITY_PLOT);
    let epochs: Vec<usize> = diversity.iter().map(|r| r.epoch).collect();
    let intra: Vec<Option<f64>> = diversity.iter().map(|r| r.intra_net).collect();
    let inter: Vec<Option<f64>> = diversity.iter().map(|r| r.inter_net).collect();
    line_plot(&div, &diversity_series(&epochs, &intra, &inter))?;
    Ok(vec![acc, div])
}
