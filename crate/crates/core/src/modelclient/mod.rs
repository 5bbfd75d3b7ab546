//! Access to a model under test: candidate-answer scoring for image+text and
//! text-only prompts, and visual-encoder embeddings.
//!
//! [`HttpClient`] speaks the JSON wire protocol; [`MockOracle`] and
//! [`PixelMeanEmbedder`] are deterministic in-process stand-ins.

mod http;
mod mock;

use std::time::Duration;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::ColorSpec;
use crate::stimuli::{ShapeSpec, StimulusImage};

pub use http::{HttpClient, HttpClientConfig, ENDPOINT_ENV};
pub use mock::{MockOracle, MockOracleSpec, PixelMeanEmbedder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    FirstToken,
    Sequence,
}

/// What a request's stimulus depicts. Carried alongside the request for
/// in-process scorers; never sent over the wire.
#[derive(Debug, Clone, PartialEq)]
pub enum Annotation {
    ColorPair { reference: ColorSpec, target: ColorSpec },
    ShapePair { reference: ShapeSpec, target: ShapeSpec },
    Numeric { lhs: f64, rhs: f64 },
    Patch { row: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    /// Caller-chosen identifier echoed in errors and sent as `x-request-id`.
    pub id: String,
    pub prompt: String,
    pub images: Vec<StimulusImage>,
    pub candidates: Vec<String>,
    pub mode: ScoreMode,
    pub annotation: Option<Annotation>,
}

impl ScoreRequest {
    pub fn new(id: impl Into<String>, prompt: impl Into<String>, candidates: &[&str]) -> Self {
        ScoreRequest {
            id: id.into(),
            prompt: prompt.into(),
            images: Vec::new(),
            candidates: candidates.iter().map(|c| c.to_string()).collect(),
            mode: ScoreMode::FirstToken,
            annotation: None,
        }
    }

    pub fn with_image(mut self, image: StimulusImage) -> Self {
        self.images.push(image);
        self
    }

    pub fn with_mode(mut self, mode: ScoreMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_annotation(mut self, annotation: Annotation) -> Self {
        self.annotation = Some(annotation);
        self
    }

    pub fn is_text_only(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.candidates.is_empty() {
            return Err(ClientError::InvalidRequest {
                request_id: self.id.clone(),
                detail: "at least one candidate is required".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub text: String,
    pub first_token_logprob: f64,
    pub sequence_logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResponse {
    pub request_id: String,
    pub model_id: String,
    /// Same order as the request's candidates.
    pub candidates: Vec<CandidateScore>,
    pub latency: Duration,
}

impl ScoreResponse {
    pub fn get(&self, text: &str) -> Option<&CandidateScore> {
        self.candidates.iter().find(|c| c.text == text)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("request {request_id}: timed out")]
    Timeout { request_id: String },
    #[error("request {request_id}: HTTP {status}: {body}")]
    Http { request_id: String, status: u16, body: String },
    #[error("request {request_id}: malformed response: {detail}")]
    Malformed { request_id: String, detail: String },
    #[error("request {request_id}: transport failure: {detail}")]
    Transport { request_id: String, detail: String },
    #[error("request {request_id}: invalid request: {detail}")]
    InvalidRequest { request_id: String, detail: String },
    #[error("endpoint does not expose visual-encoder embeddings")]
    NoEmbeddingCapability,
    #[error("yes/no scoring needs exactly the candidates [\"yes\", \"no\"], got {found:?}")]
    WrongCandidates { found: Vec<String> },
}

impl ClientError {
    pub fn request_id(&self) -> Option<&str> {
        match self {
            ClientError::Timeout { request_id }
            | ClientError::Http { request_id, .. }
            | ClientError::Malformed { request_id, .. }
            | ClientError::Transport { request_id, .. }
            | ClientError::InvalidRequest { request_id, .. } => Some(request_id),
            ClientError::NoEmbeddingCapability | ClientError::WrongCandidates { .. } => None,
        }
    }

    /// Failures worth retrying: timeouts, connection trouble, 429 and 5xx
    /// other than 501.
    pub fn is_transient(&self) -> bool {
        match self {
            ClientError::Timeout { .. } | ClientError::Transport { .. } => true,
            ClientError::Http { status, .. } => *status == 429 || (*status >= 500 && *status != 501),
            _ => false,
        }
    }
}

pub trait Scorer: Send + Sync {
    fn model_id(&self) -> String;
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ClientError>;
}

pub trait Embedder: Send + Sync {
    fn model_id(&self) -> String;
    /// Swatch resolution the encoder consumes natively.
    fn input_size(&self) -> (u32, u32);
    /// How token features are pooled into one vector, when the backend says.
    fn pooling(&self) -> Option<String> {
        None
    }
    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>, ClientError>;
}

impl<T: Scorer + ?Sized> Scorer for &T {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ClientError> {
        (**self).score(request)
    }
}

impl<T: Scorer + ?Sized> Scorer for Box<T> {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ClientError> {
        (**self).score(request)
    }
}

impl<T: Embedder + ?Sized> Embedder for &T {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn input_size(&self) -> (u32, u32) {
        (**self).input_size()
    }
    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>, ClientError> {
        (**self).embed(image)
    }
}

impl<T: Embedder + ?Sized> Embedder for Box<T> {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn input_size(&self) -> (u32, u32) {
        (**self).input_size()
    }
    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>, ClientError> {
        (**self).embed(image)
    }
}

/// Scorer backed by a closure over the request; handy for analytic oracles.
pub struct FnScorer<F> {
    model_id: String,
    f: F,
}

impl<F> FnScorer<F>
where
    F: Fn(&ScoreRequest) -> Vec<f64> + Send + Sync,
{
    /// `f` returns one log-probability per candidate.
    pub fn new(model_id: impl Into<String>, f: F) -> Self {
        FnScorer { model_id: model_id.into(), f }
    }
}

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&ScoreRequest) -> Vec<f64> + Send + Sync,
{
    fn model_id(&self) -> String {
        self.model_id.clone()
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ClientError> {
        request.validate()?;
        let logprobs = (self.f)(request);
        if logprobs.len() != request.candidates.len() {
            return Err(ClientError::Malformed {
                request_id: request.id.clone(),
                detail: format!("{} scores for {} candidates", logprobs.len(), request.candidates.len()),
            });
        }
        Ok(ScoreResponse {
            request_id: request.id.clone(),
            model_id: self.model_id.clone(),
            candidates: request
                .candidates
                .iter()
                .zip(logprobs)
                .map(|(text, l)| CandidateScore { text: text.clone(), first_token_logprob: l, sequence_logprob: l })
                .collect(),
            latency: Duration::ZERO,
        })
    }
}

/// Logistic of `d`, evaluated without overflow for large `|d|`.
pub fn logistic(d: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Two-way normalized "yes" probability:
/// `exp(l_yes) / (exp(l_yes) + exp(l_no))` over first-token log-probabilities.
pub fn yes_score(response: &ScoreResponse) -> Result<f64, ClientError> {
    let wrong = || ClientError::WrongCandidates {
        found: response.candidates.iter().map(|c| c.text.clone()).collect(),
    };
    if response.candidates.len() != 2 {
        return Err(wrong());
    }
    let (Some(yes), Some(no)) = (response.get("yes"), response.get("no")) else {
        return Err(wrong());
    };
    Ok(logistic(yes.first_token_logprob - no.first_token_logprob))
}

/// Cosine similarity; defined as 0 when either vector has zero norm.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}
