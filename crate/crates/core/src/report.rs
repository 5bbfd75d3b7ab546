//! Renderings of examination artifacts and the machine-readable summary.
//!
//! Colormap: a single-hue blue ramp linear in RGB from (247, 251, 255) at
//! score 0 to (8, 48, 107) at score 1. Wheel orientation: hue 0 points east
//! and hue increases counterclockwise; saturation grows outward.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{write_atomic, Domain, FieldError, ScoreMap, SensitivityField, WheelGrid, FIELD_SCHEMA, SCOREMAP_SCHEMA};
use crate::exams::{CellAccuracy, ReadinessReport, READINESS_SCHEMA};
use crate::metrics::{half_score_points, sac, sas, HalfScore};

pub const REPORT_SCHEMA: &str = "lens-report/1";
pub const COLORMAP: &str = "blues: linear RGB ramp (247,251,255) at 0 to (8,48,107) at 1";
pub const WHEEL_ORIENTATION: &str = "hue 0 east, counterclockwise; saturation radial";
pub const POLYGON_SCAN: &str = "polygon half-score scanned with increasing vertex count";

const RAMP_LO: [f64; 3] = [247.0, 251.0, 255.0];
const RAMP_HI: [f64; 3] = [8.0, 48.0, 107.0];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("score map is {map_w}x{map_h} but the image is {img_w}x{img_h}")]
    DimensionMismatch { map_w: u32, map_h: u32, img_w: u32, img_h: u32 },
    #[error("score map has {scores} scores for a {rows}x{cols} grid")]
    BadScoreMap { rows: usize, cols: usize, scores: usize },
    #[error("no examination artifacts found")]
    NoArtifacts,
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Colormap value for a score; inputs are clamped to `[0, 1]`.
pub fn colormap(t: f64) -> Rgb<u8> {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let ch = |k: usize| (RAMP_LO[k] + (RAMP_HI[k] - RAMP_LO[k]) * t).round() as u8;
    Rgb([ch(0), ch(1), ch(2)])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WheelStyle {
    /// Side of the square raster; the disc spans it exactly.
    pub size: u32,
    pub annotate: bool,
    pub background: Rgb<u8>,
}

impl Default for WheelStyle {
    fn default() -> Self {
        WheelStyle { size: 512, annotate: true, background: Rgb([0, 0, 0]) }
    }
}

/// Paints every pixel whose center lies within the unit disc with the
/// colormapped score of the wheel cell under it. The reference color's
/// position is marked with a small cross when `annotate` is set.
pub fn render_wheel(field: &SensitivityField, style: &WheelStyle) -> Result<RgbImage, ReportError> {
    let Domain::Wheel { grid, reference } = field.domain else {
        return Err(FieldError::WrongDomain { expected: "wheel", found: field.domain.name().into() }.into());
    };
    let size = style.size.max(1);
    let radius = f64::from(size) / 2.0;
    let mut img = RgbImage::from_pixel(size, size, style.background);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let dx = (f64::from(x) + 0.5 - radius) / radius;
        let dy = (radius - f64::from(y) - 0.5) / radius;
        let r = dx.hypot(dy);
        if r <= 1.0 {
            let phi = dy.atan2(dx).rem_euclid(TAU);
            *px = colormap(field.values[grid.index_of(r, phi)]);
        }
    }
    if style.annotate {
        let (r, phi) = WheelGrid::locate(reference);
        let cx = radius + r * phi.cos() * (radius - 1.0);
        let cy = radius - r * phi.sin() * (radius - 1.0);
        let arm = (f64::from(size) / 64.0).max(3.0) as i64;
        for d in -arm..=arm {
            for (ox, oy, color) in [(d, 0, [255, 64, 64]), (0, d, [255, 64, 64])] {
                put(&mut img, cx as i64 + ox, cy as i64 + oy, Rgb(color));
            }
        }
    }
    Ok(img)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, dash: Option<i64>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut step = 0i64;
    loop {
        if dash.is_none_or(|d| (step / d) % 2 == 0) {
            put(img, x0, y0, c);
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
        step += 1;
    }
}

/// Plot abscissa range for a sweep domain.
pub fn axis_range(domain: &Domain) -> (f64, f64) {
    match domain {
        Domain::Eccentricity | Domain::NumericReal => (0.0, 0.9),
        Domain::Polygon | Domain::NumericInteger => (3.0, 30.0),
        Domain::Size => (1.0, 200.0),
        Domain::Wheel { .. } => (0.0, 1.0),
    }
}

#[derive(Debug, Clone)]
pub struct CurvePlot {
    pub image: RgbImage,
    /// `x,f` rows with a header line.
    pub csv: String,
    pub x_range: (f64, f64),
    /// Abscissae of the half-score markers drawn.
    pub markers: Vec<f64>,
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 400;
const PLOT_MARGIN: u32 = 40;

/// Score curve with the 0.5 guide line and a vertical marker at each
/// half-score point, plus the data as CSV.
pub fn render_curve(field: &SensitivityField, half_points: &[HalfScore]) -> Result<CurvePlot, ReportError> {
    let xs = field.xs()?;
    let x_range = axis_range(&field.domain);
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let (l, r) = (PLOT_MARGIN as f64, f64::from(PLOT_W - PLOT_MARGIN));
    let (t, b) = (PLOT_MARGIN as f64, f64::from(PLOT_H - PLOT_MARGIN));
    let px = |x: f64| (l + (x - x_range.0) / (x_range.1 - x_range.0) * (r - l)).round() as i64;
    let py = |f: f64| (b - f.clamp(0.0, 1.0) * (b - t)).round() as i64;
    let black = Rgb([0, 0, 0]);
    line(&mut img, (l as i64, b as i64), (r as i64, b as i64), black, None);
    line(&mut img, (l as i64, b as i64), (l as i64, t as i64), black, None);
    line(&mut img, (l as i64, py(0.5)), (r as i64, py(0.5)), Rgb([150, 150, 150]), Some(4));
    let ink = colormap(1.0);
    let pts: Vec<(i64, i64)> = xs.iter().zip(&field.values).map(|(&x, &f)| (px(x), py(f))).collect();
    for w in pts.windows(2) {
        line(&mut img, w[0], w[1], ink, None);
    }
    if let [only] = pts.as_slice() {
        put(&mut img, only.0, only.1, ink);
    }
    let markers: Vec<f64> = half_points.iter().filter_map(|h| h.point).collect();
    for &m in &markers {
        line(&mut img, (px(m), t as i64), (px(m), b as i64), Rgb([220, 30, 30]), None);
    }
    let scale = 1;
    crate::font::draw_text(&mut img, PLOT_MARGIN as i64 - 4, i64::from(PLOT_H - PLOT_MARGIN) + 8, &fmt_axis(x_range.0), scale, black);
    let hi = fmt_axis(x_range.1);
    let (tw, _) = crate::font::text_size(&hi, scale);
    crate::font::draw_text(&mut img, i64::from(PLOT_W - PLOT_MARGIN - tw), i64::from(PLOT_H - PLOT_MARGIN) + 8, &hi, scale, black);
    let mut csv = String::from("x,f\n");
    for (x, f) in xs.iter().zip(&field.values) {
        let _ = writeln!(csv, "{x},{f}");
    }
    Ok(CurvePlot { image: img, csv, x_range, markers })
}

fn fmt_axis(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone)]
pub struct ScoreOverlay {
    pub image: RgbImage,
    /// Per-pixel mean score of the windows covering it, row-major; `None`
    /// where no window reaches.
    pub heat: Vec<Option<f64>>,
}

/// Averages window scores per pixel and blends the colormapped heat over the
/// target image with the given opacity.
pub fn render_scoremap(map: &ScoreMap, target: &RgbImage, opacity: f64) -> Result<ScoreOverlay, ReportError> {
    let (w, h) = target.dimensions();
    if (w, h) != (map.image_width, map.image_height) {
        return Err(ReportError::DimensionMismatch { map_w: map.image_width, map_h: map.image_height, img_w: w, img_h: h });
    }
    if map.scores.len() != map.rows * map.cols {
        return Err(ReportError::BadScoreMap { rows: map.rows, cols: map.cols, scores: map.scores.len() });
    }
    let mut sum = vec![0.0f64; (w * h) as usize];
    let mut count = vec![0u32; (w * h) as usize];
    for row in 0..map.rows {
        for col in 0..map.cols {
            let s = map.get(row, col);
            let (x0, y0) = (col as u32 * map.stride, row as u32 * map.stride);
            for y in y0..(y0 + map.patch_size).min(h) {
                for x in x0..(x0 + map.patch_size).min(w) {
                    let i = (y * w + x) as usize;
                    sum[i] += s;
                    count[i] += 1;
                }
            }
        }
    }
    let heat: Vec<Option<f64>> = sum.iter().zip(&count).map(|(&s, &n)| (n > 0).then(|| s / f64::from(n))).collect();
    let a = opacity.clamp(0.0, 1.0);
    let mut image = target.clone();
    for (i, px) in image.pixels_mut().enumerate() {
        if let Some(v) = heat[i] {
            let c = colormap(v);
            for k in 0..3 {
                px[k] = ((1.0 - a) * f64::from(px[k]) + a * f64::from(c[k])).round() as u8;
            }
        }
    }
    Ok(ScoreOverlay { image, heat })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacEntry {
    pub value: f64,
    pub artifact: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SasEntry {
    pub value: f64,
    pub ds: f64,
    pub half_points: Vec<HalfScore>,
    pub artifact: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadinessEntry {
    pub cells: BTreeMap<String, CellAccuracy>,
    pub artifact: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    /// Keyed by reference color, e.g. `"(255, 0, 0)"`.
    pub sac: BTreeMap<String, SacEntry>,
    /// Keyed by sweep domain name.
    pub sas: BTreeMap<String, SasEntry>,
    pub readiness: Option<ReadinessEntry>,
    pub scoremaps: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExamReport {
    pub schema: String,
    pub colormap: String,
    pub wheel_orientation: String,
    pub polygon_scan: String,
    pub models: BTreeMap<String, ModelReport>,
    /// Inputs that were missing or unreadable.
    pub missing: Vec<String>,
}

impl ExamReport {
    /// One line per (model, metric): `model<TAB>metric<TAB>value[<TAB>extra]`.
    pub fn digest(&self) -> String {
        let mut out = String::new();
        for (model, m) in &self.models {
            for (reference, e) in &m.sac {
                let _ = writeln!(out, "{model}\tsac {reference}\t{}", e.value);
            }
            for (sweep, e) in &m.sas {
                let halves: Vec<String> = e
                    .half_points
                    .iter()
                    .map(|h| format!("{}={}", h.label, h.point.map_or("none".to_string(), |p| p.to_string())))
                    .collect();
                let _ = writeln!(out, "{model}\tsas {sweep}\t{}\thalf-score {}", e.value, halves.join(" "));
            }
            if let Some(r) = &m.readiness {
                for (cell, acc) in &r.cells {
                    let _ = writeln!(out, "{model}\treadiness {cell}\t{:.2}\t{}/{} failed {}", acc.accuracy, acc.correct, acc.scored, acc.failed);
                }
            }
            for map in &m.scoremaps {
                let _ = writeln!(out, "{model}\tscoremap\t{map}");
            }
        }
        for missing in &self.missing {
            let _ = writeln!(out, "missing\t{missing}");
        }
        out
    }
}

#[derive(Deserialize)]
struct SchemaProbe {
    #[serde(default)]
    schema: String,
}

fn json_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "json") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Builds the report from artifact files (directories are searched
/// recursively for `.json` artifacts). Unreadable or missing inputs are
/// listed rather than fatal; at least one artifact must load.
pub fn build_report(inputs: &[PathBuf]) -> Result<ExamReport, ReportError> {
    let mut report = ExamReport {
        schema: REPORT_SCHEMA.into(),
        colormap: COLORMAP.into(),
        wheel_orientation: WHEEL_ORIENTATION.into(),
        polygon_scan: POLYGON_SCAN.into(),
        ..Default::default()
    };
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            files.extend(json_files(input)?);
        } else if input.is_file() {
            files.push(input.clone());
        } else {
            report.missing.push(input.display().to_string());
        }
    }
    let mut loaded = 0;
    for path in files {
        let name = path.display().to_string();
        let Ok(text) = std::fs::read_to_string(&path) else {
            report.missing.push(name);
            continue;
        };
        let schema = serde_json::from_str::<SchemaProbe>(&text).map(|p| p.schema).unwrap_or_default();
        match schema.as_str() {
            FIELD_SCHEMA => {
                let Ok(field) = SensitivityField::from_json(&text) else {
                    report.missing.push(name);
                    continue;
                };
                let model = report.models.entry(field.model_id.clone()).or_default();
                match field.domain {
                    Domain::Wheel { reference, .. } => {
                        model.sac.insert(reference.to_string(), SacEntry { value: sac(&field)?.value, artifact: name });
                    }
                    domain => {
                        let s = sas(&field)?;
                        model.sas.insert(
                            domain.name().to_string(),
                            SasEntry { value: s.value, ds: s.ds, half_points: half_score_points(&field)?, artifact: name },
                        );
                    }
                }
            }
            SCOREMAP_SCHEMA => match serde_json::from_str::<ScoreMap>(&text) {
                Ok(map) => report.models.entry(map.model_id).or_default().scoremaps.push(name),
                Err(_) => {
                    report.missing.push(name);
                    continue;
                }
            },
            READINESS_SCHEMA => match serde_json::from_str::<ReadinessReport>(&text) {
                Ok(r) => {
                    report.models.entry(r.model_id).or_default().readiness = Some(ReadinessEntry { cells: r.cells, artifact: name });
                }
                Err(_) => {
                    report.missing.push(name);
                    continue;
                }
            },
            _ => continue,
        }
        loaded += 1;
    }
    if loaded == 0 {
        return Err(ReportError::NoArtifacts);
    }
    Ok(report)
}

/// Writes `summary.json` and `digest.txt` into `out`.
pub fn emit_report(inputs: &[PathBuf], out: &Path) -> Result<ExamReport, ReportError> {
    let report = build_report(inputs)?;
    write_atomic(&out.join("summary.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_atomic(&out.join("digest.txt"), report.digest().as_bytes())?;
    Ok(report)
}
