use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{Annotation, CandidateScore, ClientError, Embedder, ScoreRequest, ScoreResponse, Scorer};
use crate::color::ColorSpec;
use crate::stimuli::geometry::ink_iou;
use crate::stimuli::StimulusImage;

/// Log-probability assigned to a probability of zero, keeping scores finite.
const FLOOR: f64 = 1e-300;
/// Margin between the right and wrong answers of the perfect oracle.
const CONFIDENT: f64 = 20.0;
/// Distance scale of the background-bias oracle's content term.
const BIAS_TAU: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockOracleSpec {
    /// Answers from the answer key when it knows the request id; otherwise
    /// "yes" exactly when the two compared samples are pixel-identical, and
    /// numeric comparisons are evaluated exactly.
    Perfect,
    /// Equal log-probability for every candidate.
    UniformRandom,
    /// `p(yes) = exp(−d/τ)` with `d` the unit-scaled RGB distance between the samples.
    ColorDistance { tau: f64 },
    /// `p(yes) = exp(−d/τ)` with `d = 1 − IoU` of the two silhouettes.
    ShapeDistance { tau: f64 },
    /// `p(yes) = β/2 + (1−β)·exp(−d/0.25)`, `d` the distance between the mean
    /// colors of the two samples; `β = 1` ignores content entirely.
    BackgroundBias { beta: f64 },
}

impl MockOracleSpec {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            MockOracleSpec::ColorDistance { tau } | MockOracleSpec::ShapeDistance { tau } if !(tau > 0.0) => {
                Err(format!("tau must be positive, got {tau}"))
            }
            MockOracleSpec::BackgroundBias { beta } if !(0.0..=1.0).contains(&beta) => {
                Err(format!("beta must lie in [0, 1], got {beta}"))
            }
            _ => Ok(()),
        }
    }

    /// Parses `perfect`, `uniform`, `color_distance:<τ>`, `shape_distance:<τ>`
    /// or `background_bias:<β>`, with an optional `mock:` prefix.
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.strip_prefix("mock:").unwrap_or(s);
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let num = |name: &str| -> Result<f64, String> {
            arg.ok_or_else(|| format!("{name} needs a parameter, e.g. {name}:0.1"))?
                .parse::<f64>()
                .map_err(|e| format!("bad {name} parameter: {e}"))
        };
        let spec = match kind {
            "perfect" => MockOracleSpec::Perfect,
            "uniform" | "uniform_random" => MockOracleSpec::UniformRandom,
            "color_distance" => MockOracleSpec::ColorDistance { tau: num(kind)? },
            "shape_distance" => MockOracleSpec::ShapeDistance { tau: num(kind)? },
            "background_bias" => MockOracleSpec::BackgroundBias { beta: num(kind)? },
            other => return Err(format!("unknown mock oracle {other:?}")),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn label(&self) -> String {
        match *self {
            MockOracleSpec::Perfect => "perfect".into(),
            MockOracleSpec::UniformRandom => "uniform_random".into(),
            MockOracleSpec::ColorDistance { tau } => format!("color_distance-{tau}"),
            MockOracleSpec::ShapeDistance { tau } => format!("shape_distance-{tau}"),
            MockOracleSpec::BackgroundBias { beta } => format!("background_bias-{beta}"),
        }
    }
}

/// Deterministic in-process scorer. Every score is a pure function of the
/// request and the oracle configuration.
#[derive(Debug, Clone)]
pub struct MockOracle {
    spec: MockOracleSpec,
    seed: u64,
    answer_key: Arc<HashMap<String, String>>,
}

impl MockOracle {
    pub fn new(spec: MockOracleSpec, seed: u64) -> Self {
        MockOracle { spec, seed, answer_key: Arc::new(HashMap::new()) }
    }

    /// Supplies known answers keyed by request id (used by the perfect oracle).
    pub fn with_answer_key(mut self, key: HashMap<String, String>) -> Self {
        self.answer_key = Arc::new(key);
        self
    }

    pub fn spec(&self) -> MockOracleSpec {
        self.spec
    }

    /// Probability per candidate, or `None` when the oracle has no opinion.
    fn probabilities(&self, req: &ScoreRequest) -> Option<Vec<f64>> {
        let one_hot = |answer: &str| {
            req.candidates
                .iter()
                .map(|c| if c == answer { 1.0 } else { 0.0 })
                .collect::<Vec<_>>()
        };
        let yes_no = |p_yes: f64| {
            req.candidates
                .iter()
                .map(|c| match c.as_str() {
                    "yes" => p_yes,
                    "no" => 1.0 - p_yes,
                    _ => 0.0,
                })
                .collect::<Vec<_>>()
        };
        let binary = req.candidates.iter().any(|c| c == "yes") && req.candidates.iter().any(|c| c == "no");
        match self.spec {
            MockOracleSpec::UniformRandom => None,
            MockOracleSpec::Perfect => {
                if let Some(answer) = self.answer_key.get(&req.id) {
                    return Some(one_hot(answer));
                }
                if let Some((lhs, rhs)) = numeric_operands(req) {
                    return binary.then(|| yes_no(if lhs >= rhs { 1.0 } else { 0.0 }));
                }
                let img = req.images.first()?;
                if binary {
                    let same = pair_crops(img).map(|(a, b)| a == b)?;
                    Some(yes_no(if same { 1.0 } else { 0.0 }))
                } else {
                    let row_same = |row: &str| {
                        let a = img.crop(&format!("{row}/left"))?;
                        let b = img.crop(&format!("{row}/right"))?;
                        Some(a == b)
                    };
                    let answer = match (row_same("Sample 1")?, row_same("Sample 2")?) {
                        (true, false) => "Sample 1",
                        (false, true) => "Sample 2",
                        _ => "no answer",
                    };
                    Some(one_hot(answer))
                }
            }
            MockOracleSpec::ColorDistance { tau } => {
                if !binary {
                    return None;
                }
                let (a, b) = match req.annotation {
                    Some(Annotation::ColorPair { reference, target }) => (reference, target),
                    _ => pair_colors(req.images.first()?)?,
                };
                Some(yes_no((-a.unit_rgb_distance(b) / tau).exp()))
            }
            MockOracleSpec::ShapeDistance { tau } => {
                if !binary {
                    return None;
                }
                let (a, b) = pair_crops(req.images.first()?)?;
                Some(yes_no((-(1.0 - ink_iou(&a, &b)) / tau).exp()))
            }
            MockOracleSpec::BackgroundBias { beta } => {
                if !binary {
                    return None;
                }
                let content = if beta < 1.0 {
                    let (a, b) = pair_crops(req.images.first()?)?;
                    (-mean_color(&a).unit_rgb_distance(mean_color(&b)) / BIAS_TAU).exp()
                } else {
                    0.0
                };
                Some(yes_no(beta * 0.5 + (1.0 - beta) * content))
            }
        }
    }
}

fn pair_crops(img: &StimulusImage) -> Option<(RgbImage, RgbImage)> {
    Some((img.crop("left")?, img.crop("right")?))
}

fn pair_colors(img: &StimulusImage) -> Option<(ColorSpec, ColorSpec)> {
    let sample = |name: &str| {
        let (x, y) = img.region(name)?.rect.center();
        Some(img.pixel(x, y))
    };
    Some((sample("left")?, sample("right")?))
}

fn mean_color(img: &RgbImage) -> ColorSpec {
    let n = u64::from(img.width()) * u64::from(img.height());
    if n == 0 {
        return ColorSpec::BLACK;
    }
    let mut sum = [0u64; 3];
    for p in img.pixels() {
        for k in 0..3 {
            sum[k] += u64::from(p[k]);
        }
    }
    let avg = |s: u64| ((s + n / 2) / n) as u8;
    ColorSpec::new(avg(sum[0]), avg(sum[1]), avg(sum[2]))
}

/// Operands of a text-only "Is A greater than or equal to B?" prompt.
fn numeric_operands(req: &ScoreRequest) -> Option<(f64, f64)> {
    if let Some(Annotation::Numeric { lhs, rhs }) = req.annotation {
        return Some((lhs, rhs));
    }
    if !req.is_text_only() {
        return None;
    }
    let rest = req.prompt.strip_prefix("Is ")?;
    let (lhs, rest) = rest.split_once(" greater than or equal to ")?;
    let (rhs, _) = rest.split_once('?')?;
    Some((lhs.trim().parse().ok()?, rhs.trim().parse().ok()?))
}

impl Scorer for MockOracle {
    fn model_id(&self) -> String {
        format!("mock-{}-s{}", self.spec.label(), self.seed)
    }

    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, ClientError> {
        req.validate()?;
        let logprobs: Vec<f64> = match self.probabilities(req) {
            Some(p) if self.spec == MockOracleSpec::Perfect => {
                p.iter().map(|&v| if v >= 0.5 { 0.0 } else { -CONFIDENT }).collect()
            }
            Some(p) => p.iter().map(|&v| v.max(FLOOR).ln()).collect(),
            None => vec![-(req.candidates.len() as f64).ln(); req.candidates.len()],
        };
        Ok(ScoreResponse {
            request_id: req.id.clone(),
            model_id: self.model_id(),
            candidates: req
                .candidates
                .iter()
                .zip(logprobs)
                .map(|(text, l)| CandidateScore { text: text.clone(), first_token_logprob: l, sequence_logprob: l })
                .collect(),
            latency: Duration::ZERO,
        })
    }
}

/// Embeds an image as its mean RGB color scaled to `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct PixelMeanEmbedder {
    pub input_size: (u32, u32),
}

impl Default for PixelMeanEmbedder {
    fn default() -> Self {
        PixelMeanEmbedder { input_size: (8, 8) }
    }
}

impl Embedder for PixelMeanEmbedder {
    fn model_id(&self) -> String {
        "mock-pixel-mean".into()
    }

    fn input_size(&self) -> (u32, u32) {
        self.input_size
    }

    fn pooling(&self) -> Option<String> {
        Some("pixel-mean".into())
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>, ClientError> {
        let n = f64::from(image.width()) * f64::from(image.height());
        let mut sum = [0f64; 3];
        for p in image.pixels() {
            for k in 0..3 {
                sum[k] += f64::from(p[k]);
            }
        }
        Ok(sum.iter().map(|s| if n > 0.0 { (s / n / 255.0) as f32 } else { 0.0 }).collect())
    }
}
