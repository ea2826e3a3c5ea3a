//! Markdown tables and line plots rendered from an experiment directory.
//!
//! Only files below the given directory are read.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::config::Family;
use crate::error::{HarnessError, Result};
use crate::experiment::{read_log, ResultsTable, Summary};

pub fn recovery_markdown(summary: &Summary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| preset sigma | inferred sigma | final sigma | abs error |");
    let _ = writeln!(s, "|---|---|---|---|");
    for r in &summary.recovery.rows {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} |",
            r.preset, r.inferred_sigma, r.final_sigma, r.abs_error
        );
    }
    s
}

pub fn grid_markdown(table: &ResultsTable) -> String {
    let mut s = String::new();
    let _ = write!(s, "| model | train sigma |");
    for c in &table.columns {
        let _ = write!(s, " test {c} |");
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "|---|---|{}", "---|".repeat(table.columns.len()));
    for r in &table.rows {
        let _ = write!(s, "| {} | {} |", r.family.label(), r.train_preset);
        for d in &r.dice {
            let _ = write!(s, " {d:.3} |");
        }
        let _ = writeln!(s);
    }
    s
}

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN: u32 = 24;
const COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
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

/// Line plot of several series against their index, sharing one y range.
pub fn plot_series(path: &Path, series: &[Vec<f64>]) -> Result<()> {
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return Err(HarnessError::Report(format!("nothing to plot for {}", path.display())));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (l, r, t, b) = (MARGIN as i64, (WIDTH - MARGIN) as i64, MARGIN as i64, (HEIGHT - MARGIN) as i64);
    draw_line(&mut img, (l, b), (r, b), axis);
    draw_line(&mut img, (l, t), (l, b), axis);
    for (k, s) in series.iter().enumerate() {
        let c = Rgb(COLORS[k % COLORS.len()]);
        let n = s.len().max(2) - 1;
        let pt = |i: usize, v: f64| {
            let x = l + ((r - l) as f64 * i as f64 / n as f64) as i64;
            let y = b - ((b - t) as f64 * (v - lo) / span) as i64;
            (x, y)
        };
        let mut prev: Option<(i64, i64)> = None;
        for (i, &v) in s.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = pt(i, v);
            if let Some(q) = prev {
                draw_line(&mut img, q, p, c);
            }
            prev = Some(p);
        }
    }
    img.save(path).map_err(|e| HarnessError::Report(format!("{}: {e}", path.display())))
}

/// Reads `summary.json` and run logs under `dir`, writes `report.md` and
/// sigma/loss plots into `dir/plots`, and returns the markdown.
pub fn render_report(dir: &Path) -> Result<String> {
    let path = dir.join("summary.json");
    let bytes = fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
    let summary: Summary = serde_json::from_slice(&bytes)?;
    let mut md = String::new();
    let _ = writeln!(md, "# Results ({:?}, seed {})\n", summary.mode, summary.seed);
    let _ = writeln!(md, "## Inferred noise level\n");
    md.push_str(&recovery_markdown(&summary));
    if let Some(v) = summary.recovery.identity_verified {
        let _ = writeln!(md, "\nzero-residual identity verified before training: {v}");
    }
    if let Some(grid) = &summary.grid {
        let _ = writeln!(md, "\n## Dice grid\n");
        md.push_str(&grid_markdown(grid));
        let _ = writeln!(md, "\n## Diagonal dominance (learned)\n");
        for d in &summary.dominance {
            let _ = writeln!(
                md,
                "- test {}: matched {:.3}, train {} {:.3}, margin {:+.3}",
                d.column, d.matched, d.mismatched_row, d.mismatched, d.margin
            );
        }
    }

    let runs = dir.join("runs");
    let plots = dir.join("plots");
    let mut sigma_series = Vec::new();
    let mut names = Vec::new();
    if runs.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(&runs)
            .map_err(|e| HarnessError::io(&runs, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("log.csv").is_file())
            .collect();
        entries.sort();
        fs::create_dir_all(&plots).map_err(|e| HarnessError::io(&plots, e))?;
        for run in entries {
            let name = run.file_name().and_then(|n| n.to_str()).unwrap_or("run").to_string();
            let log = read_log(&run.join("log.csv"))?;
            let loss: Vec<f64> = log.iter().map(|r| r.l_synth).collect();
            let real: Vec<f64> = log.iter().map(|r| r.l_real.unwrap_or(f64::NAN)).collect();
            plot_series(&plots.join(format!("loss_{name}.png")), &[loss, real])?;
            if name.starts_with(Family::Learned.label()) {
                sigma_series.push(log.iter().map(|r| r.sigma).collect::<Vec<_>>());
                names.push(name);
            }
        }
    }
    if !sigma_series.is_empty() {
        plot_series(&plots.join("sigma.png"), &sigma_series)?;
        let _ = writeln!(md, "\nsigma trajectories in plots/sigma.png: {}", names.join(", "));
    }
    let out = dir.join("report.md");
    fs::write(&out, &md).map_err(|e| HarnessError::io(&out, e))?;
    Ok(md)
}
