//! Sensitivity areas, half-score points and min-max normalization.

use serde::{Deserialize, Serialize};

use crate::color::ColorSpec;
use crate::field::{Domain, FieldError, SamplePoint, SensitivityField, WheelGrid};

/// Sensitivity area of a color: the score field integrated over the unit
/// wheel in polar coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SacResult {
    pub reference: ColorSpec,
    pub value: f64,
    pub grid: WheelGrid,
}

/// Sensitivity area of a shape: the score field summed along a 1-D sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SasResult {
    pub sweep: Domain,
    pub value: f64,
    pub ds: f64,
}

/// `Σ f_i · r_i · Δr · Δφ` with `r_i` the radial midpoint of cell `i`.
pub fn sac(field: &SensitivityField) -> Result<SacResult, FieldError> {
    let Domain::Wheel { grid, reference } = field.domain else {
        return Err(FieldError::WrongDomain { expected: "wheel", found: field.domain.name().into() });
    };
    let cell = grid.dr() * grid.dphi();
    let mut value = 0.0;
    for (p, f) in field.points.iter().zip(&field.values) {
        let SamplePoint::Polar { r, .. } = *p else {
            return Err(FieldError::WrongDomain { expected: "wheel", found: "scalar points".into() });
        };
        value += f * r * cell;
    }
    Ok(SacResult { reference, value, grid })
}

/// Integration step per sweep kind.
pub fn sweep_step(domain: &Domain) -> Option<f64> {
    match domain {
        Domain::Eccentricity | Domain::NumericReal => Some(1.0 / 1000.0),
        Domain::Polygon | Domain::Size | Domain::NumericInteger => Some(1.0),
        Domain::Wheel { .. } => None,
    }
}

pub fn sas(field: &SensitivityField) -> Result<SasResult, FieldError> {
    let ds = sweep_step(&field.domain)
        .ok_or_else(|| FieldError::WrongDomain { expected: "shape sweep", found: field.domain.name().into() })?;
    let value = field.values.iter().sum::<f64>() * ds;
    Ok(SasResult { sweep: field.domain, value, ds })
}

/// Order in which a 1-D field is scanned for its half-score point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanDirection {
    Ascending,
    Descending,
    /// Points below `pivot`, scanned from the pivot downward.
    OutwardBelow(f64),
    /// Points above `pivot`, scanned from the pivot upward.
    OutwardAbove(f64),
}

/// First abscissa, in scan order, where the field crosses 0.5 (in either
/// direction), linearly interpolated between the bracketing samples.
/// Returns `None` when the field never reaches 0.5.
pub fn half_score_point(field: &SensitivityField, direction: ScanDirection) -> Result<Option<f64>, FieldError> {
    let xs = field.xs()?;
    let mut seq: Vec<(f64, f64)> = xs.into_iter().zip(field.values.iter().copied()).collect();
    seq.sort_by(|a, b| a.0.total_cmp(&b.0));
    match direction {
        ScanDirection::Ascending => {}
        ScanDirection::Descending => seq.reverse(),
        ScanDirection::OutwardBelow(p) => {
            seq.retain(|s| s.0 < p);
            seq.reverse();
        }
        ScanDirection::OutwardAbove(p) => seq.retain(|s| s.0 > p),
    }
    Ok(first_crossing(&seq))
}

fn first_crossing(seq: &[(f64, f64)]) -> Option<f64> {
    let &(x0, f0) = seq.first()?;
    if f0 == 0.5 {
        return Some(x0);
    }
    seq.windows(2).find_map(|w| {
        let ((xa, fa), (xb, fb)) = (w[0], w[1]);
        if fb == 0.5 {
            Some(xb)
        } else if (fa - 0.5) * (fb - 0.5) < 0.0 {
            Some(xa + (0.5 - fa) / (fb - fa) * (xb - xa))
        } else {
            None
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfScore {
    pub label: String,
    pub direction: ScanDirection,
    pub point: Option<f64>,
}

/// Size-sweep pivot between the smaller and larger levels.
pub const SIZE_PIVOT: f64 = 100.5;

/// Half-score points with the default scan convention for each sweep:
/// eccentricity and the real-number probe scan upward from the reference,
/// polygon and the integer probe scan upward in vertex count, size scans
/// outward on both sides of the reference.
pub fn half_score_points(field: &SensitivityField) -> Result<Vec<HalfScore>, FieldError> {
    let dirs: Vec<(&str, ScanDirection)> = match field.domain {
        Domain::Eccentricity | Domain::NumericReal | Domain::Polygon | Domain::NumericInteger => {
            vec![("first", ScanDirection::Ascending)]
        }
        Domain::Size => vec![
            ("smaller", ScanDirection::OutwardBelow(SIZE_PIVOT)),
            ("larger", ScanDirection::OutwardAbove(SIZE_PIVOT)),
        ],
        Domain::Wheel { .. } => {
            return Err(FieldError::WrongDomain { expected: "shape sweep", found: "wheel".into() });
        }
    };
    dirs.into_iter()
        .map(|(label, direction)| {
            Ok(HalfScore {
                label: label.to_string(),
                direction,
                point: half_score_point(field, direction)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalized {
    pub values: Vec<f64>,
    /// Set when every input was equal; all outputs are then zero.
    pub degenerate: bool,
}

/// `(x − min) / (max − min)`. Constant input maps to zeros and sets the
/// degenerate flag.
pub fn minmax_normalize(values: &[f64]) -> Normalized {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = max - min;
    if values.is_empty() || span <= 0.0 || !span.is_finite() {
        return Normalized { values: vec![0.0; values.len()], degenerate: true };
    }
    Normalized {
        values: values.iter().map(|&v| (v - min) / span).collect(),
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn wheel_from(grid: WheelGrid, f: impl Fn(f64, f64) -> f64) -> SensitivityField {
        let values = (0..grid.len()).map(|i| {
            let (r, phi) = grid.cell(i);
            f(r, phi)
        });
        SensitivityField::wheel(grid, ColorSpec::RED, values.collect()).unwrap()
    }

    #[test]
    fn sac_closed_forms() {
        let g = WheelGrid::default();
        assert!((sac(&wheel_from(g, |_, _| 1.0)).unwrap().value - PI).abs() < 1e-9);
        assert_eq!(sac(&wheel_from(g, |_, _| 0.0)).unwrap().value, 0.0);
        // ∫₀^{2π}∫₀¹ r·r dr dφ = 2π/3; the midpoint rule is off by π/(2·100²).
        let v = sac(&wheel_from(g, |r, _| r)).unwrap().value;
        assert!((v - 2.0 * PI / 3.0).abs() < 1e-4, "{v}");
    }

    #[test]
    fn sac_grid_refinement() {
        let smooth = |r: f64, phi: f64| (-(r * r)).exp() * (0.5 + 0.4 * phi.cos());
        let coarse = sac(&wheel_from(WheelGrid::default(), smooth)).unwrap().value;
        let fine = sac(&wheel_from(WheelGrid { radial: 200, angular: 1000, value: 1.0 }, smooth))
            .unwrap()
            .value;
        assert!(((fine - coarse) / fine).abs() < 1e-3);
    }

    #[test]
    fn sas_closed_forms_and_domain_checks() {
        let ecc: Vec<f64> = (0..900).map(|k| (k as f64 + 0.5) / 1000.0).collect();
        let f = SensitivityField::sweep(Domain::Eccentricity, &ecc, vec![1.0; 900]).unwrap();
        assert!((sas(&f).unwrap().value - 0.9).abs() < 1e-12);
        let poly: Vec<f64> = (3..=30).map(f64::from).collect();
        let f = SensitivityField::sweep(Domain::Polygon, &poly, vec![1.0; 28]).unwrap();
        assert_eq!(sas(&f).unwrap().value, 28.0);
        assert!(sac(&f).is_err());
        let w = wheel_from(WheelGrid { radial: 2, angular: 3, value: 1.0 }, |_, _| 1.0);
        assert!(sas(&w).is_err());
    }

    #[test]
    fn step_field_crosses_between_third_and_fourth_sample() {
        let xs = [0.0005, 0.0015, 0.0025, 0.0035, 0.0045];
        let f = SensitivityField::sweep(Domain::Eccentricity, &xs, vec![1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let p = half_score_point(&f, ScanDirection::Ascending).unwrap().unwrap();
        assert!(p > xs[2] && p < xs[3]);
        assert!((p - 0.003).abs() < 1e-12);
        let never = SensitivityField::sweep(Domain::Eccentricity, &xs, vec![1.0; 5]).unwrap();
        assert_eq!(half_score_point(&never, ScanDirection::Ascending).unwrap(), None);
    }

    #[test]
    fn size_scans_outward_on_both_sides() {
        let xs: Vec<f64> = (1..=200).map(f64::from).collect();
        // Accepted sizes are 80..=130.
        let vals: Vec<f64> = xs.iter().map(|&x| if (80.0..=130.0).contains(&x) { 1.0 } else { 0.0 }).collect();
        let f = SensitivityField::sweep(Domain::Size, &xs, vals).unwrap();
        let hs = half_score_points(&f).unwrap();
        assert_eq!(hs[0].point, Some(79.5));
        assert_eq!(hs[1].point, Some(130.5));
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]).values, vec![0.0, 0.5, 1.0]);
        let d = minmax_normalize(&[5.0, 5.0]);
        assert_eq!(d.values, vec![0.0, 0.0]);
        assert!(d.degenerate);
        let n = minmax_normalize(&[0.3, -1.7, 9.1, 2.2]);
        assert_eq!(n.values[1], 0.0);
        assert_eq!(n.values[2], 1.0);
    }

    proptest! {
        #[test]
        fn sas_and_sac_are_monotone(base in prop::collection::vec(0.0f64..=1.0, 28), bump in prop::collection::vec(0.0f64..=1.0, 28)) {
            let g: Vec<f64> = base.iter().zip(&bump).map(|(a, b)| a + (1.0 - a) * b).collect();
            let xs: Vec<f64> = (3..=30).map(f64::from).collect();
            let lo = SensitivityField::sweep(Domain::Polygon, &xs, base.clone()).unwrap();
            let hi = SensitivityField::sweep(Domain::Polygon, &xs, g.clone()).unwrap();
            prop_assert!(sas(&lo).unwrap().value <= sas(&hi).unwrap().value);
            let grid = WheelGrid { radial: 4, angular: 7, value: 1.0 };
            let lo = SensitivityField::wheel(grid, ColorSpec::BLUE, base[..28].to_vec()).unwrap();
            let hi = SensitivityField::wheel(grid, ColorSpec::BLUE, g[..28].to_vec()).unwrap();
            prop_assert!(sac(&lo).unwrap().value <= sac(&hi).unwrap().value);
        }

        #[test]
        fn minmax_is_affine_invariant(v in prop::collection::vec(-1e3f64..1e3, 2..40), a in 0.01f64..100.0, b in -1e3f64..1e3) {
            let base = minmax_normalize(&v);
            let moved: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let other = minmax_normalize(&moved);
            prop_assert_eq!(base.degenerate, other.degenerate);
            for (x, y) in base.values.iter().zip(&other.values) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
