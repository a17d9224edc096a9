//! Deterministic in-process model.
//!
//! Every mode is a pure function of its inputs, the mode and the seed:
//!
//! * `hash` embeds bytes with SHA-256-seeded components in [-1, 1].
//! * `clustered` embeds bytes beginning with `class<K>_` to the basis vector
//!   e_K plus a jitter of Euclidean norm at most 0.01; anything else falls
//!   back to the hash embedding.
//! * `echo-label` answers task prompts with the majority demonstration label
//!   (first label of the list when there are no demonstrations).
//! * `scripted` answers from a JSON script keyed by prompt digest.
//!
//! Non-task prompts (captions, summaries) get a description derived from the
//! prompt digest; when the first image carries a `class<K>_` tag the
//! description starts with that tag, so clustered scoring can match
//! captions against images.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::trace::{synthetic_trace, Span, TraceBundle, TraceLayout};
use crate::client::InferenceClient;
use crate::composer::parse_task_prompt;
use crate::error::{Error, Result};
use crate::types::{sha256, sha256_hex, EmbeddingVector, Prompt, PromptPart};

pub const DEFAULT_DIM: usize = 16;
pub const CLUSTER_JITTER: f64 = 0.01;
pub const TRACE_LAYERS: usize = 3;
pub const TRACE_HEADS: usize = 2;
/// Tokens an image occupies in a mock trace.
pub const TRACE_IMAGE_TOKENS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockMode {
    Hash,
    Clustered,
    EchoLabel,
    Scripted,
}

impl MockMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MockMode::Hash => "hash",
            MockMode::Clustered => "clustered",
            MockMode::EchoLabel => "echo-label",
            MockMode::Scripted => "scripted",
        }
    }
}

impl FromStr for MockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hash" => Ok(MockMode::Hash),
            "clustered" => Ok(MockMode::Clustered),
            "echo-label" => Ok(MockMode::EchoLabel),
            "scripted" => Ok(MockMode::Scripted),
            other => Err(Error::Config(format!(
                "unknown mock mode {other:?} (expected hash, clustered, echo-label or scripted)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedScore {
    pub image_sha256: String,
    pub text: String,
    pub score: f64,
}

/// Canned responses for `mock:scripted`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    /// Prompt digest (hex, see [`Prompt::digest`]) to generated text.
    #[serde(default)]
    pub generate: HashMap<String, String>,
    /// Returned for prompts missing from `generate`.
    #[serde(default)]
    pub default_generation: Option<String>,
    #[serde(default)]
    pub scores: Vec<ScriptedScore>,
}

impl Script {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct MockClient {
    mode: MockMode,
    model_id: String,
    dim: usize,
    seed: u64,
    max_in_flight: usize,
    script: Script,
}

/// Component `c` of the hash embedding: the first 8 bytes (little-endian) of
/// SHA-256(bytes ∥ c as u64 LE), mapped linearly onto [-1, 1].
pub fn hash_component(bytes: &[u8], c: usize) -> f64 {
    let mut h = Sha256::new();
    h.update(bytes);
    h.update((c as u64).to_le_bytes());
    let digest = h.finalize();
    let word = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    word as f64 / u64::MAX as f64 * 2.0 - 1.0
}

pub fn hash_embedding(bytes: &[u8], dim: usize) -> Vec<f64> {
    (0..dim).map(|c| hash_component(bytes, c)).collect()
}

/// Parses a leading `class<K>_` tag.
pub fn class_tag(bytes: &[u8]) -> Option<usize> {
    let rest = bytes.strip_prefix(b"class")?;
    let digits = rest.iter().take_while(|b| b.is_ascii_digit()).count();
    if digits == 0 || rest.get(digits) != Some(&b'_') {
        return None;
    }
    std::str::from_utf8(&rest[..digits]).ok()?.parse().ok()
}

fn cosine64(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl MockClient {
    pub fn new(mode: MockMode, model_id: &str) -> Self {
        Self {
            mode,
            model_id: model_id.to_string(),
            dim: DEFAULT_DIM,
            seed: 0,
            max_in_flight: 4,
            script: Script::default(),
        }
    }

    pub fn scripted(script: Script, model_id: &str) -> Self {
        Self {
            script,
            ..Self::new(MockMode::Scripted, model_id)
        }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim.max(1);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn mode(&self) -> MockMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The mode's embedding function, shared by images and text.
    fn embed_bytes(&self, bytes: &[u8]) -> Vec<f64> {
        if self.mode == MockMode::Clustered {
            if let Some(k) = class_tag(bytes).filter(|&k| k < self.dim) {
                let scale = CLUSTER_JITTER / (self.dim as f64).sqrt();
                let mut v: Vec<f64> = hash_embedding(bytes, self.dim)
                    .into_iter()
                    .map(|x| x * scale)
                    .collect();
                v[k] += 1.0;
                return v;
            }
        }
        hash_embedding(bytes, self.dim)
    }

    fn describe(&self, prompt: &Prompt) -> Result<String> {
        let digest = prompt.digest()?;
        let tag = match prompt.images().next() {
            Some(image) => class_tag(&image.load()?).map(|k| format!("class{k}_ ")),
            None => None,
        };
        Ok(format!(
            "{}a mock rendering of the scene, reference {}",
            tag.unwrap_or_default(),
            &digest[..16]
        ))
    }

    fn echo_label(&self, prompt: &Prompt) -> Result<Option<String>> {
        let Some(parsed) = parse_task_prompt(prompt) else {
            return Ok(None);
        };
        if parsed.demo_labels.is_empty() {
            return Ok(parsed.labels.first().cloned());
        }
        let mut counts: Vec<(&String, usize)> = Vec::new();
        for label in &parsed.demo_labels {
            match counts.iter_mut().find(|(l, _)| *l == label) {
                Some((_, n)) => *n += 1,
                None => counts.push((label, 1)),
            }
        }
        // max_by_key keeps the last maximum; scan manually so ties go to the
        // first occurring label.
        let mut best = counts[0];
        for &(label, n) in &counts[1..] {
            if n > best.1 {
                best = (label, n);
            }
        }
        Ok(Some(best.0.clone()))
    }

    /// Whitespace tokenization used for mock traces. Images take
    /// [`TRACE_IMAGE_TOKENS`] tokens; the query image is the last one.
    fn trace_layout(&self, prompt: &Prompt, labels: &[String]) -> Result<TraceLayout> {
        let mut tokens: Vec<Option<&str>> = Vec::new();
        let mut image_span = Span::new(0, 0);
        for part in &prompt.parts {
            match part {
                PromptPart::Text { text } => tokens.extend(text.split_whitespace().map(Some)),
                PromptPart::Image { .. } => {
                    image_span = Span::new(tokens.len(), tokens.len() + TRACE_IMAGE_TOKENS);
                    tokens.extend(std::iter::repeat_n(None, TRACE_IMAGE_TOKENS));
                }
            }
        }
        if tokens.len() < 2 {
            return Err(Error::InvalidPrompt("prompt too short to trace".into()));
        }
        let target_position = tokens.len() - 1;
        let mut label_positions = Vec::new();
        for i in 1..target_position {
            if tokens[i - 1] != Some("Answer:") {
                continue;
            }
            if let Some(word) = tokens[i] {
                let word = word.trim_end_matches('.');
                if labels.iter().any(|l| l == word) && !image_span.contains(i) {
                    label_positions.push(i);
                }
            }
        }
        Ok(TraceLayout {
            seq_len: tokens.len(),
            label_positions,
            target_position,
            image_span,
        })
    }
}

impl InferenceClient for MockClient {
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
        EmbeddingVector::new(
            self.embed_bytes(image)
                .into_iter()
                .map(|x| x as f32)
                .collect(),
        )
    }

    fn generate(&self, prompt: &Prompt) -> Result<String> {
        if prompt.is_empty() {
            return Err(Error::InvalidPrompt("empty prompt".into()));
        }
        match self.mode {
            MockMode::Scripted => {
                let digest = prompt.digest()?;
                self.script
                    .generate
                    .get(&digest)
                    .or(self.script.default_generation.as_ref())
                    .cloned()
                    .ok_or_else(|| Error::Http {
                        status: 404,
                        message: format!("no scripted response for prompt {digest}"),
                    })
            }
            MockMode::EchoLabel => match self.echo_label(prompt)? {
                Some(label) => Ok(label),
                None => self.describe(prompt),
            },
            MockMode::Hash | MockMode::Clustered => self.describe(prompt),
        }
    }

    fn score_image_text(&self, image: &[u8], text: &str) -> Result<f64> {
        if image.is_empty() || text.is_empty() {
            return Err(Error::InvalidArgument(
                "image and text must be non-empty".into(),
            ));
        }
        if self.mode == MockMode::Scripted {
            let image_sha = sha256_hex(image);
            if let Some(s) = self
                .script
                .scores
                .iter()
                .find(|s| s.image_sha256 == image_sha && s.text == text)
            {
                return Ok(s.score);
            }
        }
        Ok(cosine64(
            &self.embed_bytes(image),
            &self.embed_bytes(text.as_bytes()),
        ))
    }

    fn fetch_trace(&self, prompt: &Prompt, target: &str) -> Result<TraceBundle> {
        let labels = parse_task_prompt(prompt)
            .map(|p| p.labels)
            .unwrap_or_default();
        let layout = self.trace_layout(prompt, &labels)?;
        let mut seed_material = prompt.digest()?.into_bytes();
        seed_material.extend_from_slice(target.as_bytes());
        let digest = sha256(&seed_material);
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) ^ self.seed;
        let bundle = synthetic_trace(seed, TRACE_LAYERS, TRACE_HEADS, &layout);
        bundle.validate()?;
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::{render_prompt, ComposedDemonstration, DemoContent, PromptMode};
    use crate::types::{DatasetKind, ImageRef, LabelSet};

    #[test]
    fn hash_embedding_is_deterministic_and_bit_sensitive() {
        let m = MockClient::new(MockMode::Hash, "m");
        let a = m.embed_image(b"same bytes").unwrap();
        assert_eq!(a, m.embed_image(b"same bytes").unwrap());
        assert_eq!(a.dim(), DEFAULT_DIM);
        let b = m.embed_image(b"same bytet").unwrap(); // 's' ^ 't' differ in one bit
        assert_ne!(a, b);
        assert!(a.values().iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn hash_component_reference() {
        // First 8 bytes of SHA-256(b"x" ∥ 0u64 LE), independently computed.
        let mut input = b"x".to_vec();
        input.extend_from_slice(&0u64.to_le_bytes());
        let d = sha256(&input);
        let word = u64::from_le_bytes(d[..8].try_into().unwrap());
        assert_eq!(
            hash_component(b"x", 0),
            word as f64 / u64::MAX as f64 * 2.0 - 1.0
        );
    }

    #[test]
    fn clustered_lands_near_basis_vector() {
        let m = MockClient::new(MockMode::Clustered, "m");
        for bytes in [&b"class2_0001"[..], b"class2_zzz", b"class2_"] {
            let v = m.embed_image(bytes).unwrap();
            let dist: f64 = v
                .values()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let e = if i == 2 { 1.0 } else { 0.0 };
                    (x as f64 - e).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            assert!(dist <= 0.01, "distance {dist}");
        }
        assert_eq!(class_tag(b"class12_x"), Some(12));
        assert_eq!(class_tag(b"class_x"), None);
        assert_eq!(class_tag(b"classy_x"), None);
        // Untagged bytes use the hash scheme.
        let h = MockClient::new(MockMode::Hash, "m");
        assert_eq!(
            m.embed_image(b"plain").unwrap(),
            h.embed_image(b"plain").unwrap()
        );
    }

    fn labels() -> LabelSet {
        LabelSet::new(
            vec!["joy".into(), "anger".into(), "amusement".into()],
            DatasetKind::Emotion,
        )
        .unwrap()
    }

    fn demo(answer: &str) -> ComposedDemonstration {
        ComposedDemonstration {
            content: DemoContent::Summary("s".into()),
            question: "q".into(),
            answer: answer.into(),
            source_id: answer.into(),
        }
    }

    #[test]
    fn echo_label_majority_and_zero_shot() {
        let m = MockClient::new(MockMode::EchoLabel, "m");
        let q = ImageRef::Inline(b"q".to_vec());
        let p = render_prompt(
            PromptMode::Vicl,
            &labels(),
            &[demo("joy"), demo("joy"), demo("anger")],
            &q,
        )
        .unwrap();
        assert_eq!(m.generate(&p).unwrap(), "joy");

        let tie = render_prompt(
            PromptMode::Vicl,
            &labels(),
            &[demo("anger"), demo("joy")],
            &q,
        )
        .unwrap();
        assert_eq!(m.generate(&tie).unwrap(), "anger");

        let zs = render_prompt(PromptMode::ZeroShot, &labels(), &[], &q).unwrap();
        assert_eq!(m.generate(&zs).unwrap(), "joy");
    }

    #[test]
    fn scripted_by_prompt_digest() {
        let q = ImageRef::Inline(b"q".to_vec());
        let p = render_prompt(PromptMode::ZeroShot, &labels(), &[], &q).unwrap();
        let mut script = Script::default();
        script
            .generate
            .insert(p.digest().unwrap(), "amusement".into());
        let m = MockClient::scripted(script, "m");
        assert_eq!(m.generate(&p).unwrap(), "amusement");
        let other = render_prompt(PromptMode::Vicl, &labels(), &[demo("joy")], &q).unwrap();
        assert!(m.generate(&other).is_err());
    }

    #[test]
    fn scripted_scores_override_hash_scores() {
        let mut script = Script::default();
        script.scores.push(ScriptedScore {
            image_sha256: sha256_hex(b"img1"),
            text: "t".into(),
            score: 0.9,
        });
        let m = MockClient::scripted(script, "m");
        assert_eq!(m.score_image_text(b"img1", "t").unwrap(), 0.9);
        let fallback = m.score_image_text(b"img2", "t").unwrap();
        assert_eq!(fallback, m.score_image_text(b"img2", "t").unwrap());
        assert!((-1.0..=1.0).contains(&fallback));
    }

    #[test]
    fn clustered_scores_favor_matching_class() {
        let m = MockClient::new(MockMode::Clustered, "m");
        let mut caption_prompt = Prompt::new();
        caption_prompt.push_text("describe");
        caption_prompt.push_image(ImageRef::Inline(b"class1_q".to_vec()));
        let caption = m.generate(&caption_prompt).unwrap();
        assert!(caption.starts_with("class1_ "));
        let same = m.score_image_text(b"class1_d", &caption).unwrap();
        let other = m.score_image_text(b"class2_d", &caption).unwrap();
        assert!(same > 0.99 && other < 0.1, "{same} {other}");
    }

    #[test]
    fn description_has_no_braces_or_answer_marker() {
        let m = MockClient::new(MockMode::Hash, "m");
        let mut p = Prompt::new();
        p.push_text("summarize");
        p.push_image(ImageRef::Inline(b"img".to_vec()));
        let text = m.generate(&p).unwrap();
        assert!(!text.contains('{') && !text.contains('}') && !text.contains("Answer:"));
        assert_eq!(text, m.generate(&p).unwrap());
    }

    #[test]
    fn prompt_traces_annotate_labels_and_query_image() {
        let m = MockClient::new(MockMode::EchoLabel, "m");
        let q = ImageRef::Inline(b"q".to_vec());
        let p = render_prompt(
            PromptMode::Vicl,
            &labels(),
            &[demo("joy"), demo("anger")],
            &q,
        )
        .unwrap();
        let t = m.fetch_trace(&p, "joy").unwrap();
        t.validate().unwrap();
        assert_eq!(t.label_positions.len(), 2);
        assert_eq!(t.target_position, t.seq_len - 1);
        assert_eq!(t.image_span.len(), TRACE_IMAGE_TOKENS);
        assert_eq!(t, m.fetch_trace(&p, "joy").unwrap());
        assert_ne!(t.attention, m.fetch_trace(&p, "anger").unwrap().attention);
    }
}
