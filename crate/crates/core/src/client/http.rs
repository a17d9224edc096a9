//! Blocking HTTP implementation of [`InferenceClient`].

use std::sync::Mutex;
use std::time::Duration;

use log::{debug, warn};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::client::trace::TraceBundle;
use crate::client::wire::{self, encode_b64, encode_parts};
use crate::client::{ClientConfig, InferenceClient};
use crate::error::{Error, Result};
use crate::par::Semaphore;
use crate::types::{EmbeddingVector, Prompt};

const BACKOFF_BASE: Duration = Duration::from_millis(50);
const BACKOFF_CAP: Duration = Duration::from_secs(2);

/// Classifies a non-200 response. 501 means the endpoint is not offered;
/// other 4xx are permanent; 5xx are retryable.
pub fn status_error(status: u16, body: &str) -> Error {
    let message = serde_json::from_str::<wire::ErrorBody>(body)
        .map(|b| b.error)
        .unwrap_or_else(|_| body.chars().take(200).collect());
    if status == 501 {
        Error::Unsupported(message)
    } else {
        Error::Http { status, message }
    }
}

pub struct HttpClient {
    base: String,
    model_id: String,
    retries: u32,
    max_in_flight: usize,
    http: reqwest::blocking::Client,
    in_flight: Semaphore,
    /// Dimension reported by the first embedding; later ones must match.
    dim: Mutex<Option<usize>>,
}

impl HttpClient {
    pub fn new(config: &ClientConfig) -> Result<Self> {
        config.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            base: config.endpoint.trim_end_matches('/').to_string(),
            model_id: config.model_id.clone(),
            retries: config.retries,
            max_in_flight: config.max_in_flight,
            http,
            in_flight: Semaphore::new(config.max_in_flight),
            dim: Mutex::new(None),
        })
    }

    fn post_once<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp> {
        let _permit = self.in_flight.acquire();
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    Error::Timeout
                } else {
                    Error::Transport(e.to_string())
                }
            })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                Error::Timeout
            } else {
                Error::Transport(e.to_string())
            }
        })?;
        if status != 200 {
            return Err(status_error(status, &text));
        }
        serde_json::from_str(&text).map_err(|e| Error::Protocol(format!("{path}: {e}")))
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp> {
        let mut attempt = 0;
        loop {
            match self.post_once(path, body) {
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    let delay = BACKOFF_BASE
                        .saturating_mul(1 << attempt.min(16))
                        .min(BACKOFF_CAP);
                    warn!("{path}: {e}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

impl InferenceClient for HttpClient {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn embed_image(&self, image: &[u8]) -> Result<EmbeddingVector> {
        if image.is_empty() {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        let resp: wire::EmbedResponse = self.post(
            wire::EMBED_PATH,
            &wire::EmbedRequest {
                image_b64: encode_b64(image),
                model_id: self.model_id.clone(),
            },
        )?;
        if resp.dim != resp.values.len() {
            return Err(Error::Protocol(format!(
                "embed_image: dim {} but {} values",
                resp.dim,
                resp.values.len()
            )));
        }
        let mut known = self.dim.lock().expect("dim lock poisoned");
        match *known {
            Some(d) if d != resp.dim => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: resp.dim,
                })
            }
            None => *known = Some(resp.dim),
            _ => {}
        }
        EmbeddingVector::new(resp.values)
    }

    fn generate(&self, prompt: &Prompt) -> Result<String> {
        if prompt.is_empty() {
            return Err(Error::InvalidPrompt("empty prompt".into()));
        }
        let resp: wire::GenerateResponse = self.post(
            wire::GENERATE_PATH,
            &wire::GenerateRequest {
                parts: encode_parts(prompt)?,
                model_id: self.model_id.clone(),
            },
        )?;
        if resp.text.is_empty() {
            return Err(Error::EmptyGeneration);
        }
        debug!("generate -> {} bytes", resp.text.len());
        Ok(resp.text)
    }

    fn score_image_text(&self, image: &[u8], text: &str) -> Result<f64> {
        let resp: wire::ScoreResponse = self.post(
            wire::SCORE_PATH,
            &wire::ScoreRequest {
                image_b64: encode_b64(image),
                text: text.to_string(),
                model_id: self.model_id.clone(),
            },
        )?;
        if !resp.score.is_finite() {
            return Err(Error::Protocol("score is not finite".into()));
        }
        Ok(resp.score)
    }

    fn fetch_trace(&self, prompt: &Prompt, target: &str) -> Result<TraceBundle> {
        let bundle: TraceBundle = self.post(
            wire::TRACE_PATH,
            &wire::TraceRequest {
                parts: encode_parts(prompt)?,
                target: target.to_string(),
                model_id: self.model_id.clone(),
            },
        )?;
        bundle.validate()?;
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert!(matches!(
            status_error(501, r#"{"error":"unsupported: trace"}"#),
            Error::Unsupported(m) if m == "unsupported: trace"
        ));
        let e = status_error(400, r#"{"error":"bad"}"#);
        assert!(matches!(&e, Error::Http { status: 400, .. }));
        assert!(!e.is_retryable());
        let e = status_error(503, "gateway gone");
        assert!(e.is_retryable());
        assert!(!Error::Unsupported("x".into()).is_retryable());
    }
}
