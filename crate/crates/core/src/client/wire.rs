//! JSON bodies of the inference protocol.
//!
//! ```text
//! POST /v1/embed_image {"image_b64", "model_id"}          -> {"dim", "values"}
//! POST /v1/generate    {"parts": [...], "model_id"}       -> {"text"}
//! POST /v1/score       {"image_b64", "text", "model_id"}  -> {"score"}
//! POST /v1/trace       {"parts": [...], "target", "model_id"} -> TraceBundle
//! GET  /v1/health                                         -> {"status": "ok", "models": {...}}
//! ```
//!
//! Errors are non-200 responses with `{"error": str}`. Responses may echo a
//! `model_id` field.

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Prompt, PromptPart};

pub const EMBED_PATH: &str = "/v1/embed_image";
pub const GENERATE_PATH: &str = "/v1/generate";
pub const SCORE_PATH: &str = "/v1/score";
pub const TRACE_PATH: &str = "/v1/trace";
pub const HEALTH_PATH: &str = "/v1/health";

pub fn encode_b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_b64(text: &str) -> Result<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| Error::InvalidArgument(format!("invalid base64: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WirePart {
    Text { text: String },
    Image { image_b64: String },
}

/// Loads every image of `prompt` and encodes it for the wire.
pub fn encode_parts(prompt: &Prompt) -> Result<Vec<WirePart>> {
    prompt
        .parts
        .iter()
        .map(|p| match p {
            PromptPart::Text { text } => Ok(WirePart::Text { text: text.clone() }),
            PromptPart::Image { image } => Ok(WirePart::Image {
                image_b64: encode_b64(&image.load()?),
            }),
        })
        .collect()
}

pub fn decode_parts(parts: &[WirePart]) -> Result<Prompt> {
    let mut prompt = Prompt::new();
    for p in parts {
        match p {
            WirePart::Text { text } => prompt.parts.push(PromptPart::Text { text: text.clone() }),
            WirePart::Image { image_b64 } => {
                prompt.push_image(crate::types::ImageRef::Inline(decode_b64(image_b64)?))
            }
        }
    }
    Ok(prompt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedRequest {
    pub image_b64: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dim: usize,
    pub values: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub parts: Vec<WirePart>,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub image_b64: String,
    pub text: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRequest {
    pub parts: Vec<WirePart>,
    pub target: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub models: serde_json::Map<String, serde_json::Value>,
}
