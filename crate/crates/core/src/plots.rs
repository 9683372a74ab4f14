//! Raster plots of metric curves (error as a function of the annotation
//! ratio), plus a tidied copy of the input CSV. Pure functions of the
//! input rows.

use crate::dataset::write_pgm_bytes;
use crate::error::{FlowError, Result};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const METRICS_HEADER: &str = "iteration,annotation_ratio,mae,rmse";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub iteration: f64,
    pub annotation_ratio: f64,
    pub mae: f64,
    pub rmse: f64,
}

pub fn parse_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let file_name = path.display().to_string();
    let parse = |detail: String| FlowError::Parse {
        file: file_name.clone(),
        detail,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse("empty file".into()))??;
    if header.trim() != METRICS_HEADER {
        return Err(parse(format!(
            "expected header {METRICS_HEADER:?}, got {:?}",
            header.trim()
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse(format!("row {}: expected 4 columns", i + 2)));
        }
        let mut values = [0.0f64; 4];
        for (v, f) in values.iter_mut().zip(&fields) {
            *v = f
                .trim()
                .parse()
                .map_err(|e| parse(format!("row {}: {e}", i + 2)))?;
        }
        rows.push(MetricRow {
            iteration: values[0],
            annotation_ratio: values[1],
            mae: values[2],
            rmse: values[3],
        });
    }
    Ok(rows)
}

const PLOT_W: usize = 320;
const PLOT_H: usize = 240;
const MARGIN_LEFT: usize = 40;
const MARGIN_RIGHT: usize = 12;
const MARGIN_TOP: usize = 12;
const MARGIN_BOTTOM: usize = 28;

/// Renders the MAE curve against the annotation ratio as a grayscale
/// raster: white background, black axes and polyline.
pub fn render_metric_plot(rows: &[MetricRow]) -> (usize, usize, Vec<u8>) {
    let mut img = vec![255u8; PLOT_W * PLOT_H];
    let x_axis_y = PLOT_H - MARGIN_BOTTOM;
    for x in MARGIN_LEFT..PLOT_W - MARGIN_RIGHT {
        img[x_axis_y * PLOT_W + x] = 0;
    }
    for y in MARGIN_TOP..=x_axis_y {
        img[y * PLOT_W + MARGIN_LEFT] = 0;
    }
    if rows.is_empty() {
        return (PLOT_W, PLOT_H, img);
    }
    let max_x = rows
        .iter()
        .map(|r| r.annotation_ratio)
        .fold(f64::MIN, f64::max)
        .max(1e-12);
    let max_y = rows.iter().map(|r| r.mae).fold(f64::MIN, f64::max).max(1e-12) * 1.05;
    let span_x = (PLOT_W - MARGIN_LEFT - MARGIN_RIGHT - 1) as f64;
    let span_y = (x_axis_y - MARGIN_TOP) as f64;
    let to_px = |r: &MetricRow| {
        let x = MARGIN_LEFT as f64 + (r.annotation_ratio / max_x) * span_x;
        let y = x_axis_y as f64 - (r.mae / max_y) * span_y;
        (x.round() as i64, y.round() as i64)
    };
    let mut sorted: Vec<&MetricRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.annotation_ratio.partial_cmp(&b.annotation_ratio).unwrap());
    let points: Vec<(i64, i64)> = sorted.iter().map(|r| to_px(r)).collect();
    for pair in points.windows(2) {
        draw_line(&mut img, pair[0], pair[1]);
    }
    for &(x, y) in &points {
        draw_line(&mut img, (x, y), (x, y));
    }
    (PLOT_W, PLOT_H, img)
}

fn draw_line(img: &mut [u8], from: (i64, i64), to: (i64, i64)) {
    let (mut x0, mut y0) = from;
    let (x1, y1) = to;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if (0..PLOT_W as i64).contains(&x0) && (0..PLOT_H as i64).contains(&y0) {
            img[y0 as usize * PLOT_W + x0 as usize] = 0;
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn write_tidy_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.iteration.partial_cmp(&b.iteration).unwrap());
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for r in &sorted {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6}",
            r.iteration, r.annotation_ratio, r.mae, r.rmse
        )?;
    }
    w.flush()?;
    Ok(())
}

/// For each input CSV, writes `<stem>_plot.pgm` and `<stem>_tidy.csv` into
/// `out_dir`. Returns the written paths.
pub fn export_plots(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for input in inputs {
        let rows = parse_metrics_csv(input)?;
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| FlowError::Config(format!("bad input path {}", input.display())))?;
        let (w, h, img) = render_metric_plot(&rows);
        let plot_path = out_dir.join(format!("{stem}_plot.pgm"));
        write_pgm_bytes(&plot_path, w, h, &img)?;
        let tidy_path = out_dir.join(format!("{stem}_tidy.csv"));
        write_tidy_csv(&tidy_path, &rows)?;
        written.push(plot_path);
        written.push(tidy_path);
    }
    Ok(written)
}
