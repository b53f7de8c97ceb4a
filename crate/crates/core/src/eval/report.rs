//! Report files: `report.json`, a plain-text AUROC table and one ROC plot per
//! cell.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::experiment::{ExperimentReport, REPORT_SCHEMA_VERSION};
use crate::detector::Method;
use crate::error::{Error, IoContext, Result};

const PLOT_SIZE: u32 = 256;
const MARGIN: u32 = 16;

pub fn method_label(m: Method) -> &'static str {
    match m {
        Method::Spade => "SPADE",
        Method::NaiveSpade => "Naive SPADE",
        Method::Vae => "VAE-based",
        Method::Cnn => "CNN-based",
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "--".to_string(), |v| format!("{v:.3}"))
}

/// Methods as rows, known digits as columns, then the row average.
pub fn render_table(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "AUROC, noisy MNIST (normal digit {}; columns: known anomaly digit){}",
        report.normal_digit,
        if report.complete { "" } else { " [INCOMPLETE]" }
    );
    let _ = write!(out, "{:<14}", "Method");
    for d in &report.known_digits {
        let _ = write!(out, "{d:>8}");
    }
    let _ = writeln!(out, "{:>9}", "Average");
    for row in &report.matrix {
        let _ = write!(out, "{:<14}", method_label(row.method));
        for v in &row.per_digit {
            let _ = write!(out, "{:>8}", fmt_cell(*v));
        }
        let _ = writeln!(out, "{:>9}", fmt_cell(row.average));
    }
    if report.seeds.len() > 1 {
        let _ = writeln!(out, "entries are means over seeds {:?}", report.seeds);
    }
    out
}

fn plot_point(x: f64, y: f64) -> (i64, i64) {
    let span = f64::from(PLOT_SIZE - 2 * MARGIN);
    let px = f64::from(MARGIN) + x.clamp(0.0, 1.0) * span;
    let py = f64::from(PLOT_SIZE - MARGIN) - y.clamp(0.0, 1.0) * span;
    (px.round() as i64, py.round() as i64)
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), colour: Rgb<u8>) {
    let (dx, dy) = ((b.0 - a.0).abs(), -(b.1 - a.1).abs());
    let (sx, sy) = (if a.0 < b.0 { 1 } else { -1 }, if a.1 < b.1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (a.0, a.1, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, colour);
        }
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

/// ROC curve on a unit square with the chance diagonal.
pub fn render_roc(curve: &[[f64; 2]]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_SIZE, PLOT_SIZE, Rgb([255, 255, 255]));
    let axis = Rgb([96, 96, 96]);
    for (a, b) in [
        ((0.0, 0.0), (1.0, 0.0)),
        ((0.0, 0.0), (0.0, 1.0)),
        ((1.0, 0.0), (1.0, 1.0)),
        ((0.0, 1.0), (1.0, 1.0)),
    ] {
        draw_line(&mut img, plot_point(a.0, a.1), plot_point(b.0, b.1), axis);
    }
    draw_line(
        &mut img,
        plot_point(0.0, 0.0),
        plot_point(1.0, 1.0),
        Rgb([200, 200, 200]),
    );
    for w in curve.windows(2) {
        draw_line(
            &mut img,
            plot_point(w[0][0], w[0][1]),
            plot_point(w[1][0], w[1][1]),
            Rgb([20, 60, 200]),
        );
    }
    img
}

/// Writes report.json, report.txt and `roc_<digit>_<method>.png` (seed
/// suffixed when several seeds ran) into `dir`; returns the written paths.
pub fn export_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).at(dir)?;
    let mut written = Vec::new();
    let json = dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(report)?).at(&json)?;
    written.push(json);
    let txt = dir.join("report.txt");
    fs::write(&txt, render_table(report)).at(&txt)?;
    written.push(txt);
    for cell in report.cells.iter().filter(|c| !c.curve.is_empty()) {
        let name = if report.seeds.len() > 1 {
            format!("roc_{}_{}_seed{}.png", cell.known_digit, cell.method, cell.seed)
        } else {
            format!("roc_{}_{}.png", cell.known_digit, cell.method)
        };
        let path = dir.join(name);
        render_roc(&cell.curve).save_with_format(&path, image::ImageFormat::Png)?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path).at(path)?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    match raw.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(REPORT_SCHEMA_VERSION) => Ok(serde_json::from_value(raw)?),
        Some(found) => Err(Error::SchemaVersion {
            found,
            expected: REPORT_SCHEMA_VERSION,
        }),
        None => Err(Error::Corpus("report lacks schema_version".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::super::experiment::{CellResult, Timings};
    use super::super::roc::roc_auc;
    use super::*;

    fn sample_report() -> ExperimentReport {
        let roc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        let mut cells = Vec::new();
        for d in [1, 3, 5, 7, 9] {
            for m in Method::ALL {
                cells.push(CellResult::from_roc(0, d, m, &roc, 2, 2));
            }
        }
        ExperimentReport::assemble(
            serde_json::json!({"note": "test"}),
            0,
            vec![1, 3, 5, 7, 9],
            Method::ALL.to_vec(),
            vec![0],
            cells,
            Vec::new(),
            Timings::default(),
        )
    }

    #[test]
    fn json_round_trips_and_files_are_deterministic() {
        let report = sample_report();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let files = export_report(&report, a.path()).unwrap();
        export_report(&report, b.path()).unwrap();
        assert_eq!(files.len(), 2 + 20);
        assert_eq!(read_report(&a.path().join("report.json")).unwrap(), report);
        for f in &files {
            let name = f.file_name().unwrap();
            assert_eq!(fs::read(f).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        assert!(a.path().join("roc_3_naive_spade.png").exists());
    }

    #[test]
    fn table_has_digit_columns_and_method_rows() {
        let text = render_table(&sample_report());
        let lines: Vec<&str> = text.lines().collect();
        let header: Vec<&str> = lines[1].split_whitespace().collect();
        assert_eq!(header, ["Method", "1", "3", "5", "7", "9", "Average"]);
        assert!(lines[2].starts_with("SPADE"));
        assert!(lines[3].starts_with("Naive SPADE"));
        assert!(lines[4].starts_with("VAE-based"));
        assert!(lines[5].starts_with("CNN-based"));
        assert!(lines[2].ends_with("0.750"));
    }

    #[test]
    fn missing_cell_marks_report_incomplete() {
        let mut report = sample_report();
        report.cells[0] = CellResult::failed(0, 1, Method::Spade, &Error::Checkpoint("x".into()));
        let rebuilt = ExperimentReport::assemble(
            report.config.clone(),
            0,
            report.known_digits.clone(),
            report.methods.clone(),
            report.seeds.clone(),
            report.cells.clone(),
            Vec::new(),
            Timings::default(),
        );
        assert!(!rebuilt.complete);
        assert_eq!(rebuilt.average(Method::Spade), None);
        assert_eq!(rebuilt.average(Method::Vae), Some(0.75));
        assert!(render_table(&rebuilt).contains("--"));
    }
}
