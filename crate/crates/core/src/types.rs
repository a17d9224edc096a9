//! Domain types shared across the pipeline. Nothing here performs model calls.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    let digest = Sha256::digest(bytes);
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(sha256(bytes))
}

/// Case-insensitive label comparison; surrounding whitespace is ignored.
pub fn labels_equal(a: &str, b: &str) -> bool {
    a.trim().to_lowercase() == b.trim().to_lowercase()
}

/// A fixed-dimension embedding with finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(
                "embedding must have dim >= 1".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// Where the bytes of an image come from. Caching always keys on the bytes,
/// never on the path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    Path(PathBuf),
    Inline(#[serde(with = "b64")] Vec<u8>),
}

impl ImageRef {
    pub fn load(&self) -> Result<Vec<u8>> {
        match self {
            ImageRef::Path(p) => std::fs::read(p).map_err(|e| Error::io(p, e)),
            ImageRef::Inline(bytes) => Ok(bytes.clone()),
        }
    }
}

mod b64 {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemonstrationCandidate {
    pub id: String,
    pub image: ImageRef,
    pub question: String,
    /// The gold label; an element of the dataset's label list.
    pub answer: String,
    pub sublabel: Option<String>,
}

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum SummaryStrategy {
    Standard,
    TaskIntent,
    ImageParsing,
    #[serde(rename = "iois")]
    #[default]
    Iois,
}

impl SummaryStrategy {
    pub const ALL: [SummaryStrategy; 4] = [
        SummaryStrategy::Standard,
        SummaryStrategy::TaskIntent,
        SummaryStrategy::ImageParsing,
        SummaryStrategy::Iois,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SummaryStrategy::Standard => "standard",
            SummaryStrategy::TaskIntent => "task_intent",
            SummaryStrategy::ImageParsing => "image_parsing",
            SummaryStrategy::Iois => "iois",
        }
    }
}

impl fmt::Display for SummaryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SummaryStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "standard" => Ok(SummaryStrategy::Standard),
            "task_intent" => Ok(SummaryStrategy::TaskIntent),
            "image_parsing" => Ok(SummaryStrategy::ImageParsing),
            "iois" => Ok(SummaryStrategy::Iois),
            other => Err(Error::Config(format!("unknown summary strategy {other:?}"))),
        }
    }
}

/// A generated textual stand-in for a demonstration image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub text: String,
    pub strategy: SummaryStrategy,
    pub source_candidate: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PromptPart {
    Text { text: String },
    Image { image: ImageRef },
}

/// One model input: an ordered sequence of text segments and images.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub parts: Vec<PromptPart>,
}

impl Prompt {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends text, merging into a preceding text part.
    pub fn push_text(&mut self, text: &str) {
        if text.is_empty() {
            return;
        }
        if let Some(PromptPart::Text { text: last }) = self.parts.last_mut() {
            last.push_str(text);
        } else {
            self.parts.push(PromptPart::Text {
                text: text.to_string(),
            });
        }
    }

    pub fn push_image(&mut self, image: ImageRef) {
        self.parts.push(PromptPart::Image { image });
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn image_count(&self) -> usize {
        self.images().count()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.parts.iter().filter_map(|p| match p {
            PromptPart::Image { image } => Some(image),
            PromptPart::Text { .. } => None,
        })
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(|p| match p {
            PromptPart::Text { text } => Some(text.as_str()),
            PromptPart::Image { .. } => None,
        })
    }

    /// SHA-256 over a canonical encoding of the parts: text as
    /// `'T' ∥ u64 LE byte length ∥ bytes`, images as `'I' ∥ SHA-256(bytes)`.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for part in &self.parts {
            match part {
                PromptPart::Text { text } => {
                    h.update(b"T");
                    h.update((text.len() as u64).to_le_bytes());
                    h.update(text.as_bytes());
                }
                PromptPart::Image { image } => {
                    h.update(b"I");
                    h.update(sha256(&image.load()?));
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Flattens the prompt to a string, writing `marker` for every image.
    pub fn flatten(&self, marker: &str) -> String {
        let mut out = String::new();
        for part in &self.parts {
            match part {
                PromptPart::Text { text } => out.push_str(text),
                PromptPart::Image { .. } => out.push_str(marker),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Emotion,
    Object,
}

impl DatasetKind {
    /// The task question the templates ask about every image.
    pub fn question(self) -> &'static str {
        match self {
            DatasetKind::Emotion => "Do you feel which emotion when seeing this image?",
            DatasetKind::Object => "What you see in this image?",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "emotion" => Ok(DatasetKind::Emotion),
            "object" => Ok(DatasetKind::Object),
            other => Err(Error::Config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

/// The ordered label list of a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLabelSet")]
pub struct LabelSet {
    labels: Vec<String>,
    dataset_kind: DatasetKind,
}

#[derive(Deserialize)]
struct RawLabelSet {
    labels: Vec<String>,
    dataset_kind: DatasetKind,
}

impl TryFrom<RawLabelSet> for LabelSet {
    type Error = Error;

    fn try_from(raw: RawLabelSet) -> Result<Self> {
        LabelSet::new(raw.labels, raw.dataset_kind)
    }
}

impl LabelSet {
    pub fn new(labels: Vec<String>, dataset_kind: DatasetKind) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for label in &labels {
            if label.trim().is_empty() {
                return Err(Error::InvalidArgument("empty label".into()));
            }
            if !seen.insert(label.trim().to_lowercase()) {
                return Err(Error::InvalidArgument(format!(
                    "label {label:?} repeated (case-insensitive)"
                )));
            }
        }
        Ok(Self {
            labels,
            dataset_kind,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dataset_kind(&self) -> DatasetKind {
        self.dataset_kind
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| labels_equal(l, label))
    }

    /// Returns the label with its canonical casing.
    pub fn find(&self, label: &str) -> Option<&str> {
        self.position(label).map(|i| self.labels[i].as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(matches!(
            EmbeddingVector::new(vec![1.0, f32::NAN]),
            Err(Error::NonFinite)
        ));
        assert!(EmbeddingVector::new(vec![]).is_err());
        let err = serde_json::from_str::<EmbeddingVector>("[]");
        assert!(err.is_err());
    }

    #[test]
    fn label_set_is_case_insensitive() {
        let set = LabelSet::new(vec!["Joy".into(), "anger".into()], DatasetKind::Emotion).unwrap();
        assert_eq!(set.find("JOY"), Some("Joy"));
        assert_eq!(set.position(" anger "), Some(1));
        assert!(LabelSet::new(vec!["joy".into(), "JOY".into()], DatasetKind::Emotion).is_err());
    }

    #[test]
    fn push_text_merges_adjacent_segments() {
        let mut p = Prompt::new();
        p.push_text("a");
        p.push_text("b");
        p.push_image(ImageRef::Inline(vec![1]));
        p.push_text("c");
        assert_eq!(p.parts.len(), 3);
        assert_eq!(p.flatten("<img>"), "ab<img>c");
    }

    #[test]
    fn sha256_reference() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    fn arb_image() -> impl Strategy<Value = ImageRef> {
        prop_oneof![
            "[a-z/]{1,12}".prop_map(|s| ImageRef::Path(s.into())),
            proptest::collection::vec(any::<u8>(), 0..32).prop_map(ImageRef::Inline),
        ]
    }

    fn arb_strategy() -> impl Strategy<Value = SummaryStrategy> {
        prop::sample::select(SummaryStrategy::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn serde_round_trips(
            id in "[a-z0-9_]{1,10}",
            image in arb_image(),
            answer in "[a-z]{1,8}",
            sublabel in proptest::option::of("[a-z]{1,8}"),
            text in ".{1,40}",
            strategy in arb_strategy(),
            values in proptest::collection::vec(-1e6f32..1e6, 1..16),
        ) {
            let cand = DemonstrationCandidate {
                id: id.clone(), image: image.clone(), question: "q?".into(), answer, sublabel,
            };
            let back: DemonstrationCandidate =
                serde_json::from_str(&serde_json::to_string(&cand).unwrap()).unwrap();
            prop_assert_eq!(back, cand);

            let summary = Summary { text: text.clone(), strategy, source_candidate: id, model_id: "m".into() };
            let back: Summary = serde_json::from_str(&serde_json::to_string(&summary).unwrap()).unwrap();
            prop_assert_eq!(back, summary);

            let mut prompt = Prompt::new();
            prompt.push_text(&text);
            prompt.push_image(image);
            let back: Prompt = serde_json::from_str(&serde_json::to_string(&prompt).unwrap()).unwrap();
            prop_assert_eq!(back, prompt);

            let v = EmbeddingVector::new(values).unwrap();
            let back: EmbeddingVector = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
