//! The examinations: color-wheel and shape sweeps, the text-only numeric
//! probe, patch score maps and the readiness check.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::ColorSpec;
use crate::datasetgen::{record_seed, Cell, ManifestRecord};
use crate::field::{Domain, FieldError, SamplePoint, ScoreMap, SensitivityField, WheelGrid, SCOREMAP_SCHEMA};
use crate::modelclient::{yes_score, Annotation, ClientError, ScoreMode, ScoreRequest, Scorer};
use crate::par;
use crate::questionbank::{format_prompt, Category, Format, QuestionBank, QuestionError};
use crate::runner::{run_cells, RunError, RunOptions};
use crate::stimuli::shapes::SIZE_LEVELS;
use crate::stimuli::{
    crop, render_pair, render_shape, PairLayout, Rect, ShapeCanvas, ShapeSpec, StimulusError,
    StimulusImage,
};

/// Segments of the eccentricity sweep over `[0, 0.9]`.
pub const ECCENTRICITY_SEGMENTS: usize = 900;
pub const ECCENTRICITY_MAX: f64 = 0.9;
pub const POLYGON_VERTICES: std::ops::RangeInclusive<u32> = 3..=30;
pub const READINESS_SCHEMA: &str = "lens-readiness/1";
const YES_NO: [&str; 2] = ["yes", "no"];

#[derive(Debug, Error)]
pub enum ExamError {
    #[error(transparent)]
    Question(#[from] QuestionError),
    #[error(transparent)]
    Stimulus(#[from] StimulusError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("window {patch}px with stride {stride}px does not fit a {width}x{height} image")]
    Window { width: u32, height: u32, patch: u32, stride: u32 },
    #[error("record {id}: {detail}")]
    Record { id: String, detail: String },
}

impl ExamError {
    /// True when the run stopped on a model failure and can be resumed.
    pub fn is_partial(&self) -> bool {
        matches!(self, ExamError::Run(RunError::Cell { .. }))
    }
}

/// Shared knobs for every examination.
#[derive(Debug, Clone)]
pub struct ExamSettings {
    pub run: RunOptions,
    pub layout: PairLayout,
    pub canvas: ShapeCanvas,
    pub color_box: u32,
    pub seed: u64,
}

impl Default for ExamSettings {
    fn default() -> Self {
        ExamSettings {
            run: RunOptions::default(),
            layout: PairLayout::default(),
            canvas: ShapeCanvas::default(),
            color_box: crate::stimuli::DEFAULT_COLOR_BOX,
            seed: 0,
        }
    }
}

/// The question used for every cell of a sweep: the first template of the cell.
pub fn exam_question(bank: &QuestionBank, category: Category) -> Result<String, ExamError> {
    Ok(bank.canonical(category, Format::YesNo)?.text.clone())
}

fn exam_prompt(bank: &QuestionBank, category: Category) -> Result<String, ExamError> {
    let options: Vec<String> = YES_NO.iter().map(|s| s.to_string()).collect();
    Ok(format_prompt(&exam_question(bank, category)?, &options))
}

fn score_yes(scorer: &(impl Scorer + ?Sized), request: &ScoreRequest) -> Result<f64, ClientError> {
    yes_score(&scorer.score(request)?)
}

/// Scores every wheel cell with the reference color on the left and the
/// cell's color on the right.
pub fn run_color_exam<S: Scorer + ?Sized>(
    scorer: &S,
    bank: &QuestionBank,
    reference: ColorSpec,
    grid: WheelGrid,
    settings: &ExamSettings,
) -> Result<SensitivityField, ExamError> {
    let prompt = exam_prompt(bank, Category::Color)?;
    let model_id = scorer.model_id();
    let key = format!("color|{model_id}|{reference}|{}x{}@{}|{prompt}", grid.radial, grid.angular, grid.value);
    let values = run_cells(grid.len(), &key, &settings.run, |i| {
        let target = grid.color(i);
        let stim = crate::stimuli::render_color_pair_with(reference, target, settings.color_box, &settings.layout, settings.seed);
        let req = ScoreRequest::new(format!("color-{}-{}-{}-{i}", reference.r, reference.g, reference.b), prompt.as_str(), &YES_NO)
            .with_image(stim)
            .with_annotation(Annotation::ColorPair { reference, target });
        score_yes(scorer, &req)
    })?;
    Ok(SensitivityField::new(
        Domain::Wheel { grid, reference },
        model_id,
        exam_question(bank, Category::Color)?,
        grid.points(),
        values,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeSweep {
    Eccentricity,
    Polygon,
    Size,
}

impl ShapeSweep {
    pub const ALL: [ShapeSweep; 3] = [ShapeSweep::Eccentricity, ShapeSweep::Polygon, ShapeSweep::Size];

    pub fn domain(self) -> Domain {
        match self {
            ShapeSweep::Eccentricity => Domain::Eccentricity,
            ShapeSweep::Polygon => Domain::Polygon,
            ShapeSweep::Size => Domain::Size,
        }
    }

    pub fn parse(s: &str) -> Option<ShapeSweep> {
        match s {
            "eccentricity" | "ecc" => Some(ShapeSweep::Eccentricity),
            "polygon" => Some(ShapeSweep::Polygon),
            "size" => Some(ShapeSweep::Size),
            _ => None,
        }
    }

    /// Eccentricity: midpoints of the 900 segments of `[0, 0.9]`; polygon:
    /// vertex counts 3..=30; size: levels 1..=200.
    pub fn points(self) -> Vec<f64> {
        match self {
            ShapeSweep::Eccentricity => eccentricity_points(),
            ShapeSweep::Polygon => POLYGON_VERTICES.map(f64::from).collect(),
            ShapeSweep::Size => (1..=SIZE_LEVELS).map(f64::from).collect(),
        }
    }

    pub fn target(self, x: f64) -> ShapeSpec {
        match self {
            ShapeSweep::Eccentricity => ShapeSpec::Ellipse { eccentricity: x },
            ShapeSweep::Polygon => ShapeSpec::RegularPolygon { vertices: x as u32 },
            ShapeSweep::Size => ShapeSpec::ScaledCircle { level: x as u32 },
        }
    }
}

pub fn eccentricity_points() -> Vec<f64> {
    let ds = ECCENTRICITY_MAX / ECCENTRICITY_SEGMENTS as f64;
    (0..ECCENTRICITY_SEGMENTS).map(|k| (k as f64 + 0.5) * ds).collect()
}

/// Scores the reference circle (left) against each target of the sweep (right).
pub fn run_shape_exam<S: Scorer + ?Sized>(
    scorer: &S,
    bank: &QuestionBank,
    sweep: ShapeSweep,
    settings: &ExamSettings,
) -> Result<SensitivityField, ExamError> {
    let prompt = exam_prompt(bank, Category::Shape)?;
    let xs = sweep.points();
    let model_id = scorer.model_id();
    let key = format!("shape|{model_id}|{sweep:?}|{:?}|{prompt}", settings.canvas);
    let reference = render_shape(&ShapeSpec::Circle, &settings.canvas, settings.seed)?;
    let values = run_cells(xs.len(), &key, &settings.run, |i| {
        let target = sweep.target(xs[i]);
        let right = render_shape(&target, &settings.canvas, settings.seed)
            .map_err(|e| ClientError::InvalidRequest { request_id: format!("shape-{i}"), detail: e.to_string() })?;
        let stim = render_pair(&reference.image, &right.image, &settings.layout, settings.seed);
        let req = ScoreRequest::new(format!("shape-{sweep:?}-{i}"), prompt.as_str(), &YES_NO)
            .with_image(stim)
            .with_annotation(Annotation::ShapePair { reference: ShapeSpec::Circle, target });
        score_yes(scorer, &req)
    })?;
    let points = xs.iter().map(|&x| SamplePoint::Scalar(x)).collect();
    Ok(SensitivityField::new(sweep.domain(), model_id, exam_question(bank, Category::Shape)?, points, values)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericMode {
    Real,
    Integer,
}

impl NumericMode {
    pub fn domain(self) -> Domain {
        match self {
            NumericMode::Real => Domain::NumericReal,
            NumericMode::Integer => Domain::NumericInteger,
        }
    }

    /// `(x, lhs, rhs, prompt)` for every probe point.
    pub fn probes(self) -> Vec<(f64, f64, f64, String)> {
        match self {
            NumericMode::Real => eccentricity_points()
                .into_iter()
                .map(|x| {
                    let rhs = format!("{x:.2}");
                    (x, 0.0, rhs.parse().expect("formatted float"), numeric_prompt("0", &rhs))
                })
                .collect(),
            NumericMode::Integer => POLYGON_VERTICES
                .map(|n| (f64::from(n), f64::from(n), 3.0, numeric_prompt(&n.to_string(), "3")))
                .collect(),
        }
    }
}

pub fn numeric_prompt(lhs: &str, rhs: &str) -> String {
    format!("Is {lhs} greater than or equal to {rhs}? Answer with yes or no.")
}

/// Text-only comparison probe: real mode asks `0 ≥ r` over the eccentricity
/// grid (printed with two decimals), integer mode asks `n ≥ 3` for n in 3..=30.
pub fn run_numeric_probe<S: Scorer + ?Sized>(
    scorer: &S,
    mode: NumericMode,
    settings: &ExamSettings,
) -> Result<SensitivityField, ExamError> {
    let probes = mode.probes();
    let model_id = scorer.model_id();
    let key = format!("numeric|{model_id}|{mode:?}");
    let values = run_cells(probes.len(), &key, &settings.run, |i| {
        let (_, lhs, rhs, prompt) = &probes[i];
        let req = ScoreRequest::new(format!("numeric-{mode:?}-{i}"), prompt.as_str(), &YES_NO)
            .with_annotation(Annotation::Numeric { lhs: *lhs, rhs: *rhs });
        score_yes(scorer, &req)
    })?;
    let points = probes.iter().map(|p| SamplePoint::Scalar(p.0)).collect();
    Ok(SensitivityField::new(mode.domain(), model_id, probes[0].3.clone(), points, values)?)
}

#[derive(Debug, Clone)]
pub struct PatchMapSpec {
    pub patch: u32,
    pub stride: u32,
    /// Side length both the reference and each crop are resized to.
    pub box_size: u32,
    pub reference_name: String,
    pub target_name: String,
}

/// Top-left corners of the sliding windows, row-major.
pub fn window_origins(width: u32, height: u32, patch: u32, stride: u32) -> Option<(usize, usize, Vec<(u32, u32)>)> {
    let rows = ScoreMap::windows(height, patch, stride)?;
    let cols = ScoreMap::windows(width, patch, stride)?;
    let origins = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (c as u32 * stride, r as u32 * stride)))
        .collect();
    Some((rows, cols, origins))
}

/// Slides a `patch`-sized window over `target` and asks, for each crop,
/// whether it shares the reference image's semantics.
pub fn run_patch_map<S: Scorer + ?Sized>(
    scorer: &S,
    bank: &QuestionBank,
    reference: &RgbImage,
    target: &RgbImage,
    spec: &PatchMapSpec,
    settings: &ExamSettings,
) -> Result<ScoreMap, ExamError> {
    let (w, h) = target.dimensions();
    let window_err = || ExamError::Window { width: w, height: h, patch: spec.patch, stride: spec.stride };
    let (rows, cols, origins) = window_origins(w, h, spec.patch, spec.stride).ok_or_else(window_err)?;
    if spec.box_size == 0 {
        return Err(window_err());
    }
    let prompt = exam_prompt(bank, Category::Semantic)?;
    let reference_box = imageops::resize(reference, spec.box_size, spec.box_size, imageops::FilterType::Triangle);
    let model_id = scorer.model_id();
    let key = format!(
        "patchmap|{model_id}|{}|{}|{}|{}|{}|{prompt}",
        spec.reference_name, spec.target_name, spec.patch, spec.stride, spec.box_size
    );
    let scores = run_cells(origins.len(), &key, &settings.run, |i| {
        let (x, y) = origins[i];
        let window = crop(target, Rect::new(x, y, spec.patch, spec.patch));
        let patch = imageops::resize(&window, spec.box_size, spec.box_size, imageops::FilterType::Triangle);
        let stim = render_pair(&reference_box, &patch, &settings.layout, settings.seed);
        let req = ScoreRequest::new(format!("patch-{}-{i}", spec.target_name), prompt.as_str(), &YES_NO)
            .with_image(stim)
            .with_annotation(Annotation::Patch { row: i / cols, col: i % cols });
        score_yes(scorer, &req)
    })?;
    Ok(ScoreMap {
        schema: SCOREMAP_SCHEMA.into(),
        model_id,
        reference_image: spec.reference_name.clone(),
        target_image: spec.target_name.clone(),
        image_width: w,
        image_height: h,
        patch_size: spec.patch,
        stride: spec.stride,
        rows,
        cols,
        scores,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellAccuracy {
    pub correct: usize,
    pub scored: usize,
    /// Records whose scoring failed; excluded from `scored`.
    pub failed: usize,
    /// Percentage of scored records answered correctly.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReadinessReport {
    pub schema: String,
    pub model_id: String,
    /// Keyed by `"category.format"`.
    pub cells: BTreeMap<String, CellAccuracy>,
    /// First few failure messages, for diagnosis.
    pub errors: Vec<String>,
}

impl ReadinessReport {
    pub fn total_failed(&self) -> usize {
        self.cells.values().map(|c| c.failed).sum()
    }
}

const REPORTED_ERRORS: usize = 16;

/// Index of the highest sequence log-probability; exact ties are broken
/// uniformly at random with a generator seeded from `tie_seed`.
pub fn argmax_with_ties(scores: &[f64], tie_seed: u64) -> Option<usize> {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] == best).collect();
    match tied.len() {
        0 => None,
        1 => Some(tied[0]),
        n => Some(tied[ChaCha8Rng::seed_from_u64(tie_seed).gen_range(0..n)]),
    }
}

fn load_record_images(root: &Path, record: &ManifestRecord) -> Result<Vec<StimulusImage>, String> {
    record
        .images
        .iter()
        .map(|rel| {
            let path: PathBuf = root.join(rel);
            let img = image::open(&path).map_err(|e| format!("{}: {e}", path.display()))?.to_rgb8();
            StimulusImage::new(img, record.layout.clone(), record.seed).map_err(|e| e.to_string())
        })
        .collect()
}

/// Asks every record's question with its options as candidates and scores
/// the prediction (highest sequence log-probability) per cell. Images are
/// resolved relative to `root`, the split directory.
pub fn run_readiness<S: Scorer + ?Sized>(
    scorer: &S,
    records: &[ManifestRecord],
    root: &Path,
    settings: &ExamSettings,
) -> ReadinessReport {
    let outcomes = par::map(records, settings.run.parallelism, |record| -> Result<bool, String> {
        let images = load_record_images(root, record)?;
        let options: Vec<&str> = record.options.iter().map(String::as_str).collect();
        let mut req = ScoreRequest::new(record.id.as_str(), record.prompt(), &options).with_mode(ScoreMode::Sequence);
        req.images = images;
        let resp = scorer.score(&req).map_err(|e| e.to_string())?;
        let scores: Vec<f64> = resp.candidates.iter().map(|c| c.sequence_logprob).collect();
        let tie_seed = record_seed(settings.seed, &record.split, record.cell(), usize::MAX - 1) ^ record.seed;
        let pick = argmax_with_ties(&scores, tie_seed).ok_or_else(|| format!("{}: no candidates scored", record.id))?;
        Ok(pick == record.answer_index)
    });
    let mut report = ReadinessReport { schema: READINESS_SCHEMA.into(), model_id: scorer.model_id(), ..Default::default() };
    for (record, outcome) in records.iter().zip(outcomes) {
        let cell = report.cells.entry(record.cell().key()).or_default();
        match outcome {
            Ok(ok) => {
                cell.scored += 1;
                cell.correct += usize::from(ok);
            }
            Err(e) => {
                cell.failed += 1;
                if report.errors.len() < REPORTED_ERRORS {
                    report.errors.push(e);
                }
            }
        }
    }
    for cell in report.cells.values_mut() {
        cell.accuracy = if cell.scored == 0 { 0.0 } else { 100.0 * cell.correct as f64 / cell.scored as f64 };
    }
    report
}

/// Accuracy a uniformly guessing model is expected to reach on a cell.
pub fn chance_accuracy(cell: Cell) -> f64 {
    100.0 / cell.format.option_count() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelclient::{FnScorer, MockOracle, MockOracleSpec};

    fn settings() -> ExamSettings {
        ExamSettings::default()
    }

    #[test]
    fn sweep_lengths() {
        assert_eq!(ShapeSweep::Eccentricity.points().len(), 900);
        assert_eq!(ShapeSweep::Polygon.points().len(), 28);
        assert_eq!(ShapeSweep::Size.points().len(), 200);
        assert_eq!(NumericMode::Integer.probes().len(), 28);
        assert_eq!(NumericMode::Real.probes().len(), 900);
    }

    #[test]
    fn numeric_prompt_text() {
        assert_eq!(numeric_prompt("0", "0.45"), "Is 0 greater than or equal to 0.45? Answer with yes or no.");
        let p = NumericMode::Real.probes();
        let at = p.iter().find(|(x, ..)| (x - 0.4505).abs() < 1e-9).unwrap();
        assert_eq!(at.3, "Is 0 greater than or equal to 0.45? Answer with yes or no.");
    }

    #[test]
    fn exact_numeric_oracle() {
        let m = MockOracle::new(MockOracleSpec::Perfect, 0);
        let f = run_numeric_probe(&m, NumericMode::Integer, &settings()).unwrap();
        assert!(f.values.iter().all(|&v| v > 1.0 - 1e-8));
        let f = run_numeric_probe(&m, NumericMode::Real, &settings()).unwrap();
        for ((_, lhs, rhs, _), v) in NumericMode::Real.probes().iter().zip(&f.values) {
            assert_eq!(*v > 0.5, lhs >= rhs);
        }
    }

    #[test]
    fn shape_exam_reference_point_and_monotone_mock() {
        let m = MockOracle::new(MockOracleSpec::ShapeDistance { tau: 0.1 }, 0);
        let f = run_shape_exam(&m, QuestionBank::builtin(), ShapeSweep::Polygon, &settings()).unwrap();
        assert_eq!(f.len(), 28);
        let e = run_shape_exam(&m, QuestionBank::builtin(), ShapeSweep::Eccentricity, &settings()).unwrap();
        assert_eq!(e.len(), 900);
        let monotone = FnScorer::new("decreasing", |req: &ScoreRequest| match &req.annotation {
            Some(Annotation::ShapePair { target: ShapeSpec::Ellipse { eccentricity }, .. }) => {
                vec![0.0, 10.0 * (eccentricity - 0.4)]
            }
            _ => vec![0.0, 0.0],
        });
        let f = run_shape_exam(&monotone, QuestionBank::builtin(), ShapeSweep::Eccentricity, &settings()).unwrap();
        assert!(f.values.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn circle_is_identical_at_zero_eccentricity() {
        let m = MockOracle::new(MockOracleSpec::ShapeDistance { tau: 0.05 }, 0);
        let s = ExamSettings::default();
        let stim = crate::stimuli::render_shape_pair(&ShapeSpec::Circle, &ShapeSweep::Eccentricity.target(0.0), &s.canvas, &s.layout, 0).unwrap();
        let req = ScoreRequest::new("z", "q", &YES_NO).with_image(stim);
        assert_eq!(score_yes(&m, &req).unwrap(), 1.0);
    }

    #[test]
    fn patch_map_dimensions_and_bias() {
        let img = RgbImage::from_fn(64, 48, |x, y| image::Rgb([(x * 4) as u8, (y * 5) as u8, 90]));
        let m = MockOracle::new(MockOracleSpec::BackgroundBias { beta: 1.0 }, 0);
        let spec = PatchMapSpec { patch: 16, stride: 8, box_size: 16, reference_name: "r".into(), target_name: "t".into() };
        let map = run_patch_map(&m, QuestionBank::builtin(), &img, &img, &spec, &settings()).unwrap();
        assert_eq!((map.rows, map.cols), (5, 7));
        assert!(map.scores.iter().all(|&s| s == 0.5));
        let whole = PatchMapSpec { patch: 48, stride: 1000, ..spec.clone() };
        let map = run_patch_map(&m, QuestionBank::builtin(), &img, &img, &whole, &settings()).unwrap();
        assert_eq!((map.rows, map.cols), (1, 1));
        let too_big = PatchMapSpec { patch: 65, ..spec };
        assert!(matches!(
            run_patch_map(&m, QuestionBank::builtin(), &img, &img, &too_big, &settings()),
            Err(ExamError::Window { .. })
        ));
    }

    #[test]
    fn failures_report_cell_index() {
        let flaky = FnScorer::new("flaky", |_req: &ScoreRequest| vec![0.0]);
        let err = run_shape_exam(&flaky, QuestionBank::builtin(), ShapeSweep::Polygon, &settings()).unwrap_err();
        assert!(err.is_partial());
        match err {
            ExamError::Run(RunError::Cell { index, .. }) => assert_eq!(index, 0),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn ties_broken_deterministically() {
        assert_eq!(argmax_with_ties(&[-1.0, -0.5, -2.0], 0), Some(1));
        let a = argmax_with_ties(&[0.0, 0.0, 0.0], 42);
        assert_eq!(a, argmax_with_ties(&[0.0, 0.0, 0.0], 42));
        let hits: Vec<usize> = (0..300).filter_map(|s| argmax_with_ties(&[0.0, 0.0], s)).collect();
        let ones = hits.iter().filter(|&&i| i == 1).count();
        assert!((100..200).contains(&ones));
    }
}
