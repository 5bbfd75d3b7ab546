//! Score fields produced by the examinations and their on-disk format.

use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::ColorSpec;

pub const FIELD_SCHEMA: &str = "lens-field/1";
pub const SCOREMAP_SCHEMA: &str = "lens-scoremap/1";

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("{points} sample points but {values} values")]
    LengthMismatch { points: usize, values: usize },
    #[error("value {value} at index {index} is outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f64 },
    #[error("expected a {expected} field, found {found}")]
    WrongDomain { expected: &'static str, found: String },
    #[error("unsupported schema {0:?}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Polar grid over the HSV color wheel: radius is saturation, angle is hue,
/// value channel fixed. Cells are indexed radius-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WheelGrid {
    pub radial: usize,
    pub angular: usize,
    pub value: f64,
}

impl Default for WheelGrid {
    fn default() -> Self {
        WheelGrid { radial: 100, angular: 500, value: 1.0 }
    }
}

impl WheelGrid {
    pub fn len(&self) -> usize {
        self.radial * self.angular
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dr(&self) -> f64 {
        1.0 / self.radial as f64
    }

    pub fn dphi(&self) -> f64 {
        TAU / self.angular as f64
    }

    /// Midpoint `(r, φ)` of cell `index`.
    pub fn cell(&self, index: usize) -> (f64, f64) {
        let ri = index / self.angular;
        let ai = index % self.angular;
        ((ri as f64 + 0.5) * self.dr(), (ai as f64 + 0.5) * self.dphi())
    }

    /// Cell containing `(r, φ)`; `r` is clamped to the wheel, `φ` wraps.
    pub fn index_of(&self, r: f64, phi: f64) -> usize {
        let ri = ((r * self.radial as f64).floor().max(0.0) as usize).min(self.radial - 1);
        let ai = ((phi.rem_euclid(TAU) / self.dphi()).floor() as usize).min(self.angular - 1);
        ri * self.angular + ai
    }

    pub fn color(&self, index: usize) -> ColorSpec {
        let (r, phi) = self.cell(index);
        ColorSpec::from_hsv(phi.to_degrees(), r, self.value)
    }

    /// Wheel position of a color: saturation as radius, hue as angle.
    pub fn locate(color: ColorSpec) -> (f64, f64) {
        let hsv = color.to_hsv();
        (hsv.saturation, hsv.hue.to_radians())
    }

    pub fn points(&self) -> Vec<SamplePoint> {
        (0..self.len())
            .map(|i| {
                let (r, phi) = self.cell(i);
                SamplePoint::Polar { r, phi }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SamplePoint {
    Polar { r: f64, phi: f64 },
    Scalar(f64),
}

impl SamplePoint {
    pub fn scalar(&self) -> Option<f64> {
        match *self {
            SamplePoint::Scalar(x) => Some(x),
            SamplePoint::Polar { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Wheel { grid: WheelGrid, reference: ColorSpec },
    Eccentricity,
    Polygon,
    Size,
    NumericReal,
    NumericInteger,
}

impl Domain {
    pub fn name(&self) -> &'static str {
        match self {
            Domain::Wheel { .. } => "wheel",
            Domain::Eccentricity => "eccentricity",
            Domain::Polygon => "polygon",
            Domain::Size => "size",
            Domain::NumericReal => "numeric_real",
            Domain::NumericInteger => "numeric_integer",
        }
    }

    pub fn is_sweep(&self) -> bool {
        !matches!(self, Domain::Wheel { .. })
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Score-function values over a sweep domain, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityField {
    pub schema: String,
    pub domain: Domain,
    pub model_id: String,
    /// Question asked at every point.
    pub question: String,
    pub points: Vec<SamplePoint>,
    pub values: Vec<f64>,
}

impl SensitivityField {
    pub fn new(
        domain: Domain,
        model_id: impl Into<String>,
        question: impl Into<String>,
        points: Vec<SamplePoint>,
        values: Vec<f64>,
    ) -> Result<Self, FieldError> {
        let field = SensitivityField {
            schema: FIELD_SCHEMA.to_string(),
            domain,
            model_id: model_id.into(),
            question: question.into(),
            points,
            values,
        };
        field.validate()?;
        Ok(field)
    }

    /// Convenience for 1-D sweeps.
    pub fn sweep(domain: Domain, xs: &[f64], values: Vec<f64>) -> Result<Self, FieldError> {
        let points = xs.iter().map(|&x| SamplePoint::Scalar(x)).collect();
        SensitivityField::new(domain, "", "", points, values)
    }

    pub fn wheel(grid: WheelGrid, reference: ColorSpec, values: Vec<f64>) -> Result<Self, FieldError> {
        SensitivityField::new(Domain::Wheel { grid, reference }, "", "", grid.points(), values)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.schema != FIELD_SCHEMA {
            return Err(FieldError::Schema(self.schema.clone()));
        }
        if self.points.len() != self.values.len() {
            return Err(FieldError::LengthMismatch { points: self.points.len(), values: self.values.len() });
        }
        if let Some((index, &value)) = self.values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(FieldError::ValueOutOfRange { index, value });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Scalar abscissae of a 1-D field.
    pub fn xs(&self) -> Result<Vec<f64>, FieldError> {
        self.points
            .iter()
            .map(|p| {
                p.scalar().ok_or(FieldError::WrongDomain {
                    expected: "one-dimensional",
                    found: self.domain.name().to_string(),
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String, FieldError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, FieldError> {
        let field: SensitivityField = serde_json::from_str(text)?;
        field.validate()?;
        Ok(field)
    }

    pub fn save(&self, path: &Path) -> Result<(), FieldError> {
        write_atomic(path, self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        SensitivityField::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Patch-wise semantic scores over a sliding window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub schema: String,
    pub model_id: String,
    pub reference_image: String,
    pub target_image: String,
    pub image_width: u32,
    pub image_height: u32,
    pub patch_size: u32,
    pub stride: u32,
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub scores: Vec<f64>,
}

impl ScoreMap {
    /// Window count along one axis: `⌊(len − patch)/stride⌋ + 1`.
    pub fn windows(len: u32, patch: u32, stride: u32) -> Option<usize> {
        if patch == 0 || stride == 0 || patch > len {
            None
        } else {
            Some(((len - patch) / stride) as usize + 1)
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.cols + col]
    }

    pub fn save(&self, path: &Path) -> Result<(), FieldError> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        let map: ScoreMap = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if map.schema != SCOREMAP_SCHEMA {
            return Err(FieldError::Schema(map.schema));
        }
        Ok(map)
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_wheel_has_fifty_thousand_cells() {
        let g = WheelGrid::default();
        assert_eq!(g.len(), 50_000);
        assert_eq!(g.cell(0), (0.005, 0.5 * TAU / 500.0));
        let (r, phi) = g.cell(49_999);
        assert!((r - 0.995).abs() < 1e-12 && (phi - 499.5 * TAU / 500.0).abs() < 1e-12);
        for i in [0, 1, 499, 500, 12_345, 49_999] {
            let (r, phi) = g.cell(i);
            assert_eq!(g.index_of(r, phi), i);
        }
    }

    #[test]
    fn wheel_colors_follow_hue_and_saturation() {
        let g = WheelGrid::default();
        let outer_red = g.index_of(0.999, 0.0);
        assert_eq!(g.color(outer_red).r, 255);
        let (r, phi) = WheelGrid::locate(ColorSpec::GREEN);
        assert_eq!(r, 1.0);
        assert!((phi - TAU / 3.0).abs() < 1e-12);
    }

    #[test]
    fn validation_and_round_trip() {
        assert!(matches!(
            SensitivityField::sweep(Domain::Polygon, &[3.0, 4.0], vec![0.5]),
            Err(FieldError::LengthMismatch { .. })
        ));
        assert!(matches!(
            SensitivityField::sweep(Domain::Polygon, &[3.0], vec![1.5]),
            Err(FieldError::ValueOutOfRange { .. })
        ));
        let f = SensitivityField::sweep(Domain::Eccentricity, &[0.0005, 0.0015], vec![0.1 + 0.2, 1.0 / 3.0]).unwrap();
        let back = SensitivityField::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn window_counts() {
        assert_eq!(ScoreMap::windows(1536, 256, 128), Some(11));
        assert_eq!(ScoreMap::windows(256, 256, 7), Some(1));
        assert_eq!(ScoreMap::windows(100, 256, 7), None);
    }
}
