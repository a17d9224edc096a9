//! Protocol conformance suite.
//!
//! Sends fixed requests to a server and checks the raw JSON responses
//! against the wire schema without going through the typed client, so the
//! same suite applies to `mock-serve` and to any sidecar.

use std::time::Duration;

use serde_json::{json, Value};

use crate::client::trace::TraceBundle;
use crate::client::wire::{self, encode_b64};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ConformanceReport {
    pub checks: Vec<Check>,
}

impl ConformanceReport {
    pub fn all_passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub model_id: String,
    /// Require a valid trace; otherwise a 501 with an error body also passes.
    pub require_trace: bool,
    pub timeout: Duration,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            model_id: "conformance".into(),
            require_trace: true,
            timeout: Duration::from_secs(30),
        }
    }
}

struct Probe {
    base: String,
    http: reqwest::blocking::Client,
}

impl Probe {
    fn post_raw(&self, path: &str, body: Vec<u8>) -> Result<(u16, Value), String> {
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| format!("transport: {e}"))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| format!("transport: {e}"))?;
        let value = serde_json::from_str(&text)
            .map_err(|e| format!("status {status}, body is not JSON ({e}): {text}"))?;
        Ok((status, value))
    }

    fn post(&self, path: &str, body: &Value) -> Result<(u16, Value), String> {
        self.post_raw(path, serde_json::to_vec(body).expect("serializable"))
    }

    fn get(&self, path: &str) -> Result<(u16, Value), String> {
        let resp = self
            .http
            .get(format!("{}{path}", self.base))
            .send()
            .map_err(|e| format!("transport: {e}"))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| format!("transport: {e}"))?;
        let value =
            serde_json::from_str(&text).map_err(|e| format!("body is not JSON ({e}): {text}"))?;
        Ok((status, value))
    }
}

fn ok_200(r: (u16, Value)) -> Result<Value, String> {
    match r {
        (200, v) => Ok(v),
        (s, v) => Err(format!("expected 200, got {s}: {v}")),
    }
}

fn expect_error_body(r: (u16, Value), range: std::ops::RangeInclusive<u16>) -> Result<(), String> {
    let (status, v) = r;
    if !range.contains(&status) {
        return Err(format!("expected status in {range:?}, got {status}: {v}"));
    }
    match v.get("error") {
        Some(Value::String(s)) if !s.is_empty() => Ok(()),
        _ => Err(format!(
            "error body lacks a non-empty \"error\" string: {v}"
        )),
    }
}

fn embed_values(v: &Value) -> Result<Vec<f64>, String> {
    let dim = v
        .get("dim")
        .and_then(Value::as_u64)
        .filter(|&d| d > 0)
        .ok_or_else(|| format!("\"dim\" must be a positive integer: {v}"))?;
    let values = v
        .get("values")
        .and_then(Value::as_array)
        .ok_or_else(|| "\"values\" must be an array".to_string())?;
    if values.len() as u64 != dim {
        return Err(format!("dim {dim} but {} values", values.len()));
    }
    values
        .iter()
        .map(|x| {
            x.as_f64()
                .filter(|f| f.is_finite())
                .ok_or_else(|| format!("non-numeric or non-finite value {x}"))
        })
        .collect()
}

fn sample_parts(image: &[u8]) -> Value {
    json!([
        {"type": "text", "text": "Question: What you see in this image? There is a category list: [cat, dog]. Image 1: a cat on a mat. Answer: cat. Image 2: "},
        {"type": "image", "image_b64": encode_b64(image)},
        {"type": "text", "text": ". Answer: "}
    ])
}

pub fn run_suite(base_url: &str, options: &SuiteOptions) -> ConformanceReport {
    let probe = Probe {
        base: base_url.trim_end_matches('/').to_string(),
        http: reqwest::blocking::Client::builder()
            .timeout(options.timeout)
            .build()
            .expect("http client"),
    };
    let model = options.model_id.as_str();
    let img_a = b"conformance image A".to_vec();
    let img_b = b"conformance image B, a different one".to_vec();
    let mut report = ConformanceReport::default();
    let mut record = |name: &'static str, result: Result<String, String>| {
        let (passed, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        report.checks.push(Check {
            name,
            passed,
            detail,
        });
    };

    record(
        "health",
        probe.get(wire::HEALTH_PATH).and_then(ok_200).and_then(|v| {
            if v.get("status") != Some(&json!("ok")) {
                return Err(format!("status must be \"ok\": {v}"));
            }
            if !v.get("models").is_some_and(Value::is_object) {
                return Err(format!("models must be an object: {v}"));
            }
            Ok("status ok".into())
        }),
    );

    let embed = |img: &[u8]| {
        probe
            .post(
                wire::EMBED_PATH,
                &json!({"image_b64": encode_b64(img), "model_id": model}),
            )
            .and_then(ok_200)
            .and_then(|v| embed_values(&v))
    };
    let first = embed(&img_a);
    record(
        "embed_image schema",
        first.clone().map(|v| format!("dim {}", v.len())),
    );
    record(
        "embed_image deterministic",
        first.clone().and_then(|a| {
            let b = embed(&img_a)?;
            if a == b {
                Ok("identical vectors".into())
            } else {
                Err("same bytes produced different vectors".into())
            }
        }),
    );
    record(
        "embed_image fixed dim",
        first.and_then(|a| {
            let b = embed(&img_b)?;
            if a.len() == b.len() {
                Ok(format!("dim {} for both images", a.len()))
            } else {
                Err(format!("dim drifted: {} vs {}", a.len(), b.len()))
            }
        }),
    );

    record(
        "generate schema",
        probe
            .post(
                wire::GENERATE_PATH,
                &json!({"parts": sample_parts(&img_a), "model_id": model}),
            )
            .and_then(ok_200)
            .and_then(|v| match v.get("text") {
                Some(Value::String(s)) if !s.is_empty() => Ok(format!("{} bytes", s.len())),
                _ => Err(format!("\"text\" must be a non-empty string: {v}")),
            }),
    );

    let score = || {
        probe
            .post(
                wire::SCORE_PATH,
                &json!({"image_b64": encode_b64(&img_a), "text": "a cat on a mat", "model_id": model}),
            )
            .and_then(ok_200)
            .and_then(|v| {
                v.get("score")
                    .and_then(Value::as_f64)
                    .filter(|s| s.is_finite())
                    .ok_or_else(|| format!("\"score\" must be a finite number: {v}"))
            })
    };
    let s1 = score();
    record("score schema", s1.clone().map(|s| format!("score {s}")));
    record(
        "score deterministic",
        s1.and_then(|a| {
            let b = score()?;
            if a == b {
                Ok("identical scores".into())
            } else {
                Err(format!("{a} vs {b}"))
            }
        }),
    );

    let trace = probe.post(
        wire::TRACE_PATH,
        &json!({"parts": sample_parts(&img_b), "target": "cat", "model_id": model}),
    );
    record(
        "trace bundle",
        trace.and_then(|(status, v)| {
            if status == 501 && !options.require_trace {
                return expect_error_body((status, v), 501..=501).map(|_| "unsupported".into());
            }
            let v = ok_200((status, v))?;
            for field in [
                "num_layers",
                "num_heads",
                "seq_len",
                "attention",
                "grad",
                "label_positions",
                "target_position",
                "image_span",
            ] {
                if v.get(field).is_none() {
                    return Err(format!("missing field {field}"));
                }
            }
            let bundle: TraceBundle =
                serde_json::from_value(v).map_err(|e| format!("bundle schema: {e}"))?;
            bundle.validate().map_err(|e| e.to_string())?;
            Ok(format!(
                "{} layers, {} heads, {} tokens",
                bundle.num_layers, bundle.num_heads, bundle.seq_len
            ))
        }),
    );

    record(
        "malformed body rejected",
        probe
            .post_raw(wire::EMBED_PATH, b"this is not json".to_vec())
            .and_then(|r| expect_error_body(r, 400..=499))
            .map(|_| "4xx with error body".into()),
    );
    record(
        "invalid base64 rejected",
        probe
            .post(
                wire::EMBED_PATH,
                &json!({"image_b64": "***not base64***", "model_id": model}),
            )
            .and_then(|r| expect_error_body(r, 400..=499))
            .map(|_| "4xx with error body".into()),
    );
    record(
        "empty image rejected",
        probe
            .post(
                wire::EMBED_PATH,
                &json!({"image_b64": "", "model_id": model}),
            )
            .and_then(|r| expect_error_body(r, 400..=499))
            .map(|_| "4xx with error body".into()),
    );
    record(
        "unknown endpoint",
        probe
            .post("/v1/does_not_exist", &json!({}))
            .and_then(|r| expect_error_body(r, 404..=404))
            .map(|_| "404 with error body".into()),
    );

    report
}
