//! Prompt composition for zero-shot, image ICL and summary-based VICL.
//!
//! The task templates ship as assets in their published display form. They
//! are parsed once into an instruction, a repeated demonstration item and a
//! trailing query item:
//!
//! ```text
//! {instruction} Image {i}: {content}. Answer: {label}. … Image {n+1}: {image}. Answer:
//! ```
//!
//! Zero-shot prompts use `Image: {image}. Answer: ` as the only item.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DatasetKind, ImageRef, LabelSet, Prompt};

pub const EMOTION_ZERO_SHOT: &str = include_str!("../assets/templates/emotion_zero_shot.txt");
pub const EMOTION_DEMO: &str = include_str!("../assets/templates/emotion_demo.txt");
pub const OBJECT_ZERO_SHOT: &str = include_str!("../assets/templates/object_zero_shot.txt");
pub const OBJECT_DEMO: &str = include_str!("../assets/templates/object_demo.txt");

pub const LABEL_SEPARATOR: &str = ", ";
pub const DEFAULT_IMAGE_TOKENS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ZeroShot,
    Icl,
    Vicl,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::ZeroShot => "zero_shot",
            PromptMode::Icl => "icl",
            PromptMode::Vicl => "vicl",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "zero_shot" | "zeroshot" => Ok(PromptMode::ZeroShot),
            "icl" => Ok(PromptMode::Icl),
            "vicl" => Ok(PromptMode::Vicl),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected zero-shot, icl or vicl)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Head,
    Middle,
    Tail,
}

impl Section {
    pub const ALL: [Section; 3] = [Section::Head, Section::Middle, Section::Tail];

    pub fn as_str(self) -> &'static str {
        match self {
            Section::Head => "head",
            Section::Middle => "middle",
            Section::Tail => "tail",
        }
    }

    /// Target index of the positive demonstration among `len` demos.
    pub fn index(self, len: usize) -> usize {
        match self {
            Section::Head => 0,
            Section::Middle => (len.saturating_sub(1)) / 2,
            Section::Tail => len.saturating_sub(1),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    #[default]
    RerankDescending,
    PositiveAt(Section),
}

impl FromStr for OrderPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rerank" | "rerank_descending" => Ok(OrderPolicy::RerankDescending),
            "head" => Ok(OrderPolicy::PositiveAt(Section::Head)),
            "middle" => Ok(OrderPolicy::PositiveAt(Section::Middle)),
            "tail" => Ok(OrderPolicy::PositiveAt(Section::Tail)),
            other => Err(Error::Config(format!(
                "unknown order {other:?} (expected rerank, head, middle or tail)"
            ))),
        }
    }
}

impl fmt::Display for OrderPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderPolicy::RerankDescending => f.write_str("rerank"),
            OrderPolicy::PositiveAt(s) => f.write_str(s.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoContent {
    Summary(String),
    Image(ImageRef),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedDemonstration {
    pub content: DemoContent,
    pub question: String,
    pub answer: String,
    pub source_id: String,
}

/// A task template split into its reusable pieces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskTemplate {
    /// Contains `{Label List}`.
    pub instruction: String,
    /// Placeholders `{i}`, `{content}`, `{label}`.
    pub demo_item: String,
    /// Placeholders `{i}`, `{image}`.
    pub query_item: String,
    /// Placeholder `{image}`.
    pub zero_shot_item: String,
}

impl TaskTemplate {
    pub fn parse(zero_shot: &str, demo_form: &str) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("malformed task template: {what}"));

        let (instruction, zero_rest) = zero_shot
            .split_once(" Image: ")
            .ok_or_else(|| bad("zero-shot form lacks \"Image: \""))?;
        if !instruction.contains("{Label List}") {
            return Err(bad("instruction lacks {Label List}"));
        }
        let zero_shot_item = format!("Image: {zero_rest}");

        let (demo_instruction, rest) = demo_form
            .split_once(" Image 1: ")
            .ok_or_else(|| bad("demo form lacks \"Image 1: \""))?;
        if demo_instruction != instruction {
            return Err(bad("zero-shot and demo instructions differ"));
        }
        let first_item_end = rest
            .find("Image 2: ")
            .ok_or_else(|| bad("demo form lacks \"Image 2: \""))?;
        let demo_item = format!("Image 1: {}", &rest[..first_item_end])
            .replacen("Image 1:", "Image {i}:", 1)
            .replace("{summary-1}", "{content}")
            .replace("{label-1}", "{label}");
        let query_start = rest
            .find("Image N: ")
            .ok_or_else(|| bad("demo form lacks \"Image N: \""))?;
        let query_item = rest[query_start..]
            .replacen("Image N:", "Image {i}:", 1)
            .replace("{image-N}", "{image}");

        for (piece, needed) in [
            (&demo_item, &["{i}", "{content}", "{label}"][..]),
            (&query_item, &["{i}", "{image}"][..]),
            (&zero_shot_item, &["{image}"][..]),
        ] {
            for p in needed {
                if !piece.contains(p) {
                    return Err(bad(&format!("{piece:?} lacks {p}")));
                }
            }
        }
        Ok(Self {
            instruction: instruction.to_string(),
            demo_item,
            query_item,
            zero_shot_item,
        })
    }

    pub fn for_kind(kind: DatasetKind) -> &'static TaskTemplate {
        static EMOTION: OnceLock<TaskTemplate> = OnceLock::new();
        static OBJECT: OnceLock<TaskTemplate> = OnceLock::new();
        match kind {
            DatasetKind::Emotion => EMOTION.get_or_init(|| {
                TaskTemplate::parse(EMOTION_ZERO_SHOT, EMOTION_DEMO)
                    .expect("bundled emotion template parses")
            }),
            DatasetKind::Object => OBJECT.get_or_init(|| {
                TaskTemplate::parse(OBJECT_ZERO_SHOT, OBJECT_DEMO)
                    .expect("bundled object template parses")
            }),
        }
    }
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

/// Splits a template into literal text and `{name}` slots. Only the template
/// is scanned; substituted values are never re-parsed.
fn pieces(template: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        match rest[open..].find('}') {
            Some(close) => {
                out.push(Piece::Text(&rest[..open]));
                out.push(Piece::Slot(&rest[open + 1..open + close]));
                rest = &rest[open + close + 1..];
            }
            None => break,
        }
    }
    out.push(Piece::Text(rest));
    out
}

fn expand(
    prompt: &mut Prompt,
    template: &str,
    mut fill: impl FnMut(&str, &mut Prompt) -> Result<()>,
) -> Result<()> {
    for piece in pieces(template) {
        match piece {
            Piece::Text(t) => prompt.push_text(t),
            Piece::Slot(name) => fill(name, prompt)?,
        }
    }
    Ok(())
}

fn unknown_slot(name: &str) -> Error {
    Error::Config(format!("unknown template placeholder {{{name}}}"))
}

/// Renders one model input.
pub fn render_prompt(
    mode: PromptMode,
    labels: &LabelSet,
    demos: &[ComposedDemonstration],
    query_image: &ImageRef,
) -> Result<Prompt> {
    if labels.is_empty() {
        return Err(Error::InvalidPrompt("label list is empty".into()));
    }
    if mode == PromptMode::ZeroShot && !demos.is_empty() {
        return Err(Error::InvalidPrompt(
            "zero-shot prompts take no demonstrations".into(),
        ));
    }
    for d in demos {
        if d.answer.trim().is_empty() {
            return Err(Error::InvalidPrompt(format!(
                "demonstration {} has an empty answer",
                d.source_id
            )));
        }
        match (mode, &d.content) {
            (PromptMode::Vicl, DemoContent::Image(_)) => {
                return Err(Error::InvalidPrompt(format!(
                    "VICL demonstration {} carries an image",
                    d.source_id
                )))
            }
            (PromptMode::Icl, DemoContent::Summary(_)) => {
                return Err(Error::InvalidPrompt(format!(
                    "ICL demonstration {} carries summary text",
                    d.source_id
                )))
            }
            _ => {}
        }
    }

    let template = TaskTemplate::for_kind(labels.dataset_kind());
    let label_list = labels.labels().join(LABEL_SEPARATOR);
    let mut prompt = Prompt::new();
    expand(&mut prompt, &template.instruction, |name, p| match name {
        "Label List" => {
            p.push_text(&label_list);
            Ok(())
        }
        other => Err(unknown_slot(other)),
    })?;
    prompt.push_text(" ");

    for (i, d) in demos.iter().enumerate() {
        let number = (i + 1).to_string();
        expand(&mut prompt, &template.demo_item, |name, p| {
            match name {
                "i" => p.push_text(&number),
                "label" => p.push_text(&d.answer),
                "content" => match &d.content {
                    DemoContent::Summary(text) => p.push_text(text),
                    DemoContent::Image(image) => p.push_image(image.clone()),
                },
                other => return Err(unknown_slot(other)),
            }
            Ok(())
        })?;
    }

    let (item, number) = match mode {
        PromptMode::ZeroShot => (&template.zero_shot_item, String::new()),
        _ => (&template.query_item, (demos.len() + 1).to_string()),
    };
    expand(&mut prompt, item, |name, p| {
        match name {
            "i" => p.push_text(&number),
            "image" => p.push_image(query_image.clone()),
            other => return Err(unknown_slot(other)),
        }
        Ok(())
    })?;
    Ok(prompt)
}

/// Reorders demonstrations. `is_positive` identifies the positive
/// demonstration for `PositiveAt`; the others keep their relative order.
pub fn order_demonstrations(
    demos: Vec<ComposedDemonstration>,
    policy: OrderPolicy,
    is_positive: impl Fn(&ComposedDemonstration) -> bool,
) -> Result<Vec<ComposedDemonstration>> {
    let section = match policy {
        OrderPolicy::RerankDescending => return Ok(demos),
        OrderPolicy::PositiveAt(section) => section,
    };
    let positives: Vec<usize> = demos
        .iter()
        .enumerate()
        .filter(|(_, d)| is_positive(d))
        .map(|(i, _)| i)
        .collect();
    let [pos] = positives[..] else {
        return Err(Error::Order(format!(
            "positive placement needs exactly one positive demonstration, found {}",
            positives.len()
        )));
    };
    let mut demos = demos;
    let positive = demos.remove(pos);
    let target = section.index(demos.len() + 1);
    demos.insert(target, positive);
    Ok(demos)
}

/// Token accounting: `ceil(utf8_len / 4)` per text part plus a fixed cost
/// per image part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEstimator {
    pub image_tokens: usize,
}

impl Default for TokenEstimator {
    fn default() -> Self {
        Self {
            image_tokens: DEFAULT_IMAGE_TOKENS,
        }
    }
}

impl TokenEstimator {
    pub fn estimate(&self, prompt: &Prompt) -> usize {
        prompt
            .parts
            .iter()
            .map(|p| match p {
                crate::types::PromptPart::Text { text } => text.len().div_ceil(4),
                crate::types::PromptPart::Image { .. } => self.image_tokens,
            })
            .sum()
    }
}

/// Keeps the longest prefix of `demos` whose rendered prompt fits `budget`.
pub fn fit_to_budget(
    mode: PromptMode,
    labels: &LabelSet,
    demos: Vec<ComposedDemonstration>,
    query_image: &ImageRef,
    budget: usize,
    estimator: &TokenEstimator,
) -> Result<Vec<ComposedDemonstration>> {
    let template = estimator.estimate(&render_prompt(mode, labels, &[], query_image)?);
    if budget < template {
        return Err(Error::BudgetTooSmall { budget, template });
    }
    let mut keep = 0;
    for k in 1..=demos.len() {
        let cost = estimator.estimate(&render_prompt(mode, labels, &demos[..k], query_image)?);
        if cost > budget {
            break;
        }
        keep = k;
    }
    let mut demos = demos;
    demos.truncate(keep);
    Ok(demos)
}

/// What a rendered task prompt says, recovered from its text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTaskPrompt {
    pub labels: Vec<String>,
    /// Demonstration answers in prompt order.
    pub demo_labels: Vec<String>,
}

/// Parses a prompt produced by [`render_prompt`]. Returns `None` for prompts
/// that do not follow the task grammar (captioning, summarization, ...).
pub fn parse_task_prompt(prompt: &Prompt) -> Option<ParsedTaskPrompt> {
    let text = prompt.flatten("\u{FFFC}");
    if !text.starts_with("Question: ") || !text.ends_with("Answer: ") {
        return None;
    }
    let list_start = text.find("category list: [")? + "category list: [".len();
    let list_len = text[list_start..].find("].")?;
    let labels: Vec<String> = text[list_start..list_start + list_len]
        .split(LABEL_SEPARATOR)
        .map(str::to_string)
        .collect();

    let body = &text[list_start + list_len..];
    let mut demo_labels = Vec::new();
    for (at, _) in body.match_indices("Answer: ") {
        let rest = &body[at + "Answer: ".len()..];
        let hit = labels
            .iter()
            .filter(|l| {
                rest.strip_prefix(l.as_str())
                    .is_some_and(|after| after.starts_with('.'))
            })
            .max_by_key(|l| l.len());
        if let Some(label) = hit {
            demo_labels.push(label.clone());
        }
    }
    Some(ParsedTaskPrompt {
        labels,
        demo_labels,
    })
}
