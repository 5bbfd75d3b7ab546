use std::sync::{Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{CandidateScore, ClientError, Embedder, ScoreMode, ScoreRequest, ScoreResponse, Scorer};
use crate::stimuli::encode_png;

pub const ENDPOINT_ENV: &str = "LENS_MODEL_ENDPOINT";

#[derive(Debug, Clone)]
pub struct HttpClientConfig {
    /// Base URL, e.g. `http://127.0.0.1:8000`.
    pub endpoint: String,
    pub timeout: Duration,
    /// Extra attempts after the first for transient failures.
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each subsequent one.
    pub backoff: Duration,
    pub max_in_flight: usize,
    /// Overrides the id reported by `/v1/health`.
    pub model_id: Option<String>,
    /// Swatch size used for embeddings when the server does not report one.
    pub input_size: (u32, u32),
}

impl HttpClientConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpClientConfig {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            timeout: Duration::from_secs(30),
            max_retries: 3,
            backoff: Duration::from_millis(200),
            max_in_flight: 16,
            model_id: None,
            input_size: (336, 336),
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty()).map(HttpClientConfig::new)
    }
}

#[derive(Serialize)]
struct WireScoreRequest<'a> {
    id: &'a str,
    prompt: &'a str,
    images: Vec<String>,
    candidates: &'a [String],
    mode: ScoreMode,
}

#[derive(Deserialize)]
struct WireScoreResponse {
    candidates: Vec<CandidateScore>,
    #[serde(default, alias = "model")]
    model_id: Option<String>,
}

#[derive(Serialize)]
struct WireEmbedRequest {
    image: String,
}

#[derive(Deserialize)]
struct WireEmbedResponse {
    vector: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct Health {
    pub model_id: String,
    #[serde(default)]
    pub pooling: Option<String>,
    #[serde(default)]
    pub input_size: Option<(u32, u32)>,
}

/// Counting gate bounding concurrent requests.
struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Blocking client for the scoring/embedding wire protocol. Shareable across
/// threads; at most `max_in_flight` requests are outstanding at once.
pub struct HttpClient {
    config: HttpClientConfig,
    http: reqwest::blocking::Client,
    gate: Gate,
    health: OnceLock<Option<Health>>,
}

impl HttpClient {
    pub fn new(config: HttpClientConfig) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .pool_max_idle_per_host(config.max_in_flight)
            .build()
            .map_err(|e| ClientError::Transport { request_id: String::new(), detail: e.to_string() })?;
        let limit = config.max_in_flight.max(1);
        Ok(HttpClient {
            config,
            http,
            gate: Gate { in_flight: Mutex::new(0), freed: Condvar::new(), limit },
            health: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &HttpClientConfig {
        &self.config
    }

    /// `GET /v1/health`, cached after the first success or failure.
    pub fn health(&self) -> Option<&Health> {
        self.health
            .get_or_init(|| {
                let url = format!("{}/v1/health", self.config.endpoint);
                match self.http.get(&url).send().and_then(|r| r.error_for_status()) {
                    Ok(resp) => resp.json::<Health>().ok(),
                    Err(e) => {
                        log::warn!("health check failed: {e}");
                        None
                    }
                }
            })
            .as_ref()
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        request_id: &str,
        body: &B,
    ) -> Result<R, ClientError> {
        let url = format!("{}{}", self.config.endpoint, path);
        let mut delay = self.config.backoff;
        let mut attempt = 0;
        loop {
            let result = {
                let _permit = self.gate.acquire();
                self.post_once(&url, request_id, body)
            };
            match result {
                Err(e) if e.is_transient() && attempt < self.config.max_retries => {
                    log::debug!("retrying after {e}");
                    attempt += 1;
                    std::thread::sleep(delay);
                    delay *= 2;
                }
                other => return other,
            }
        }
    }

    fn post_once<B: Serialize, R: for<'de> Deserialize<'de>>(
        &self,
        url: &str,
        request_id: &str,
        body: &B,
    ) -> Result<R, ClientError> {
        let transport = |e: reqwest::Error| {
            if e.is_timeout() {
                ClientError::Timeout { request_id: request_id.to_string() }
            } else {
                ClientError::Transport { request_id: request_id.to_string(), detail: e.to_string() }
            }
        };
        let resp = self
            .http
            .post(url)
            .header("x-request-id", request_id)
            .json(body)
            .send()
            .map_err(transport)?;
        let status = resp.status();
        let text = resp.text().map_err(transport)?;
        if !status.is_success() {
            if status.as_u16() == 501 && url.ends_with("/v1/embed") {
                return Err(ClientError::NoEmbeddingCapability);
            }
            return Err(ClientError::Http { request_id: request_id.to_string(), status: status.as_u16(), body: text });
        }
        serde_json::from_str(&text)
            .map_err(|e| ClientError::Malformed { request_id: request_id.to_string(), detail: e.to_string() })
    }
}

fn png_b64(img: &RgbImage) -> String {
    B64.encode(encode_png(img))
}

impl Scorer for HttpClient {
    fn model_id(&self) -> String {
        if let Some(id) = &self.config.model_id {
            return id.clone();
        }
        self.health().map(|h| h.model_id.clone()).unwrap_or_else(|| self.config.endpoint.clone())
    }

    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, ClientError> {
        req.validate()?;
        let images = req.images.iter().map(|s| png_b64(&s.image)).collect();
        let body = WireScoreRequest { id: &req.id, prompt: &req.prompt, images, candidates: &req.candidates, mode: req.mode };
        let start = Instant::now();
        let wire: WireScoreResponse = self.post("/v1/score", &req.id, &body)?;
        let malformed = |detail: String| ClientError::Malformed { request_id: req.id.clone(), detail };
        if wire.candidates.len() != req.candidates.len() {
            return Err(malformed(format!(
                "{} entries for {} candidates",
                wire.candidates.len(),
                req.candidates.len()
            )));
        }
        for (got, want) in wire.candidates.iter().zip(&req.candidates) {
            if &got.text != want {
                return Err(malformed(format!("candidate {:?} where {:?} was expected", got.text, want)));
            }
            if !got.first_token_logprob.is_finite() || !got.sequence_logprob.is_finite() {
                return Err(malformed(format!("non-finite log-probability for {:?}", got.text)));
            }
        }
        Ok(ScoreResponse {
            request_id: req.id.clone(),
            model_id: wire.model_id.unwrap_or_else(|| Scorer::model_id(self)),
            candidates: wire.candidates,
            latency: start.elapsed(),
        })
    }
}

impl Embedder for HttpClient {
    fn model_id(&self) -> String {
        Scorer::model_id(self)
    }

    fn input_size(&self) -> (u32, u32) {
        self.health().and_then(|h| h.input_size).unwrap_or(self.config.input_size)
    }

    fn pooling(&self) -> Option<String> {
        self.health().and_then(|h| h.pooling.clone())
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>, ClientError> {
        let body = WireEmbedRequest { image: png_b64(image) };
        let id = format!("embed-{}", crate::stimuli::sha256_hex(body.image.as_bytes()).get(..16).unwrap_or(""));
        let wire: WireEmbedResponse = self.post("/v1/embed", &id, &body)?;
        if wire.vector.is_empty() || wire.vector.iter().any(|v| !v.is_finite()) {
            return Err(ClientError::Malformed { request_id: id, detail: "empty or non-finite embedding".into() });
        }
        Ok(wire.vector)
    }
}
