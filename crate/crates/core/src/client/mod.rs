//! The protocol boundary to every model the pipeline consumes.
//!
//! [`InferenceClient`] covers image embedding, generation over mixed
//! text/image prompts, image-text scoring and attention-trace export. Two
//! implementations ship: [`mock::MockClient`], a deterministic in-process
//! model, and [`http::HttpClient`], which speaks the JSON protocol in
//! [`wire`] to a server (the sidecar, or `vicl mock-serve`).

pub mod conformance;
pub mod http;
pub mod mock;
pub mod server;
pub mod trace;
pub mod wire;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{EmbeddingVector, Prompt};

pub use trace::{Span, TraceBundle};

pub trait InferenceClient: Send + Sync {
    fn model_id(&self) -> &str;

    /// Upper bound on concurrent requests callers should issue.
    fn max_in_flight(&self) -> usize {
        1
    }

    fn embed_image(&self, _image: &[u8]) -> Result<EmbeddingVector> {
        Err(Error::Unsupported("embed_image".into()))
    }

    fn generate(&self, _prompt: &Prompt) -> Result<String> {
        Err(Error::Unsupported("generate".into()))
    }

    fn score_image_text(&self, _image: &[u8], _text: &str) -> Result<f64> {
        Err(Error::Unsupported("score_image_text".into()))
    }

    fn fetch_trace(&self, _prompt: &Prompt, _target: &str) -> Result<TraceBundle> {
        Err(Error::Unsupported("fetch_trace".into()))
    }
}

pub type SharedClient = Arc<dyn InferenceClient>;

fn default_model_id() -> String {
    "mock".into()
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_in_flight() -> usize {
    4
}
fn default_retries() -> u32 {
    2
}
fn default_dim() -> usize {
    mock::DEFAULT_DIM
}

/// How to reach one model. `endpoint` is either an `http://` base URL or
/// `mock:<mode>` with mode one of `hash`, `clustered`, `echo-label`,
/// `scripted`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint: String,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Mock only: embedding dimension.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Mock only: seed for synthetic traces.
    #[serde(default)]
    pub seed: u64,
    /// Mock only: JSON script for `mock:scripted`.
    #[serde(default)]
    pub script: Option<PathBuf>,
}

impl ClientConfig {
    pub fn mock(mode: &str) -> Self {
        Self {
            endpoint: format!("mock:{mode}"),
            model_id: default_model_id(),
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_max_in_flight(),
            retries: default_retries(),
            dim: default_dim(),
            seed: 0,
            script: None,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        if self.model_id.is_empty() {
            return Err(Error::Config("model_id must not be empty".into()));
        }
        if let Some(mode) = self.endpoint.strip_prefix("mock:") {
            mode.parse::<mock::MockMode>()?;
            if self.dim == 0 {
                return Err(Error::Config("mock dim must be positive".into()));
            }
        } else if self.endpoint.starts_with("https://") {
            return Err(Error::Config(format!(
                "endpoint {:?}: TLS is not supported; use http://",
                self.endpoint
            )));
        } else if !self.endpoint.starts_with("http://") {
            return Err(Error::Config(format!(
                "endpoint {:?} is neither mock:<mode> nor an http:// URL",
                self.endpoint
            )));
        }
        Ok(())
    }
}

/// Instantiates the client an endpoint names.
pub fn connect(config: &ClientConfig) -> Result<SharedClient> {
    config.validate()?;
    if let Some(mode) = config.endpoint.strip_prefix("mock:") {
        let mode: mock::MockMode = mode.parse()?;
        let client = match mode {
            mock::MockMode::Scripted => {
                let script = match &config.script {
                    Some(path) => mock::Script::load(path)?,
                    None => mock::Script::default(),
                };
                mock::MockClient::scripted(script, &config.model_id)
            }
            other => mock::MockClient::new(other, &config.model_id),
        };
        return Ok(Arc::new(
            client
                .with_dim(config.dim)
                .with_seed(config.seed)
                .with_max_in_flight(config.max_in_flight),
        ));
    }
    Ok(Arc::new(http::HttpClient::new(config)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_validation() {
        assert!(ClientConfig::mock("hash").validate().is_ok());
        assert!(ClientConfig::mock("echo-label").validate().is_ok());
        assert!(ClientConfig::mock("bogus").validate().is_err());
        let mut cfg = ClientConfig::mock("hash");
        cfg.endpoint = "ftp://x".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.endpoint = "https://x".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.endpoint = "http://127.0.0.1:9".into();
        assert!(cfg.validate().is_ok());
        cfg.max_in_flight = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn connect_builds_mock() {
        let mut cfg = ClientConfig::mock("clustered");
        cfg.dim = 8;
        let client = connect(&cfg).unwrap();
        assert_eq!(client.embed_image(b"class1_x").unwrap().dim(), 8);
        assert_eq!(client.max_in_flight(), 4);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = toml::from_str::<ClientConfig>("endpoint = \"mock:hash\"\nbogus = 1\n");
        assert!(err.is_err());
    }
}
