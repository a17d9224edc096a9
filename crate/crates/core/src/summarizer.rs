//! Intent-oriented image summarization: turns each demonstration image into
//! text with one of four fixed instruction prompts.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::client::InferenceClient;
use crate::error::{Error, Result};
use crate::par::bounded_map;
use crate::store::{CacheKey, GenerationCache};
use crate::types::{DemonstrationCandidate, ImageRef, Prompt, Summary, SummaryStrategy};

pub const STANDARD_PROMPT: &str = include_str!("../assets/summary/standard.txt");
pub const TASK_INTENT_PROMPT: &str = include_str!("../assets/summary/task_intent.txt");
pub const IMAGE_PARSING_PROMPT: &str = include_str!("../assets/summary/image_parsing.txt");
pub const IOIS_PROMPT: &str = include_str!("../assets/summary/iois.txt");

pub fn strategy_prompt(strategy: SummaryStrategy) -> &'static str {
    match strategy {
        SummaryStrategy::Standard => STANDARD_PROMPT,
        SummaryStrategy::TaskIntent => TASK_INTENT_PROMPT,
        SummaryStrategy::ImageParsing => IMAGE_PARSING_PROMPT,
        SummaryStrategy::Iois => IOIS_PROMPT,
    }
}

/// The plain description prompt, also used to caption query images.
pub fn captioning_prompt(image: ImageRef) -> Prompt {
    let mut p = Prompt::new();
    p.push_text(STANDARD_PROMPT);
    p.push_image(image);
    p
}

/// `[instruction, image, "Label: <answer>"]`; the standard strategy has no
/// label part.
pub fn build_summary_prompt(
    strategy: SummaryStrategy,
    demo: &DemonstrationCandidate,
) -> Result<Prompt> {
    if demo.answer.trim().is_empty() {
        return Err(Error::InvalidArgument(format!(
            "candidate {} has an empty answer",
            demo.id
        )));
    }
    let mut p = Prompt::new();
    p.push_text(strategy_prompt(strategy));
    p.push_image(demo.image.clone());
    if strategy != SummaryStrategy::Standard {
        p.push_text(&format!("Label: {}", demo.answer));
    }
    Ok(p)
}

pub fn summarize_demonstration(
    demo: &DemonstrationCandidate,
    strategy: SummaryStrategy,
    client: &dyn InferenceClient,
    cache: &GenerationCache,
) -> Result<Summary> {
    let prompt = build_summary_prompt(strategy, demo)?;
    let image = demo.image.load()?;
    let key = CacheKey::new(&image, &prompt.flatten(""), client.model_id());
    let text = cache
        .get_or_generate(key, || client.generate(&prompt))
        .map_err(|e| match e {
            Error::EmptyGeneration => Error::EmptySummary,
            other => other,
        })?;
    Ok(Summary {
        text,
        strategy,
        source_candidate: demo.id.clone(),
        model_id: client.model_id().to_string(),
    })
}

/// Summarizes every candidate, concurrently up to the client's bound.
/// Output order follows `demos`.
pub fn summarize_pool(
    demos: &[DemonstrationCandidate],
    strategy: SummaryStrategy,
    client: &dyn InferenceClient,
    cache: &GenerationCache,
) -> Result<Vec<Summary>> {
    bounded_map(demos, client.max_in_flight(), |_, d| {
        summarize_demonstration(d, strategy, client, cache)
            .map_err(|e| Error::for_candidate(&d.id, e))
    })
    .into_iter()
    .collect()
}

/// Summary text by candidate id.
pub fn summary_map(summaries: &[Summary]) -> HashMap<String, String> {
    summaries
        .iter()
        .map(|s| (s.source_candidate.clone(), s.text.clone()))
        .collect()
}

pub fn write_summaries(path: &Path, summaries: &[Summary]) -> Result<()> {
    let mut buf = Vec::new();
    for s in summaries {
        serde_json::to_writer(&mut buf, s).expect("summary serializes");
        buf.push(b'\n');
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_summaries(path: &Path) -> Result<Vec<Summary>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Summary = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?;
        if s.text.is_empty() {
            return Err(Error::EmptySummary);
        }
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::mock::{MockClient, MockMode};
    use crate::types::PromptPart;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn demo(id: &str, answer: &str) -> DemonstrationCandidate {
        DemonstrationCandidate {
            id: id.into(),
            image: ImageRef::Inline(format!("pixels of {id}").into_bytes()),
            question: "q".into(),
            answer: answer.into(),
            sublabel: None,
        }
    }

    #[test]
    fn standard_has_no_label_part() {
        let p = build_summary_prompt(SummaryStrategy::Standard, &demo("a", "joy")).unwrap();
        assert_eq!(p.parts.len(), 2);
        assert_eq!(
            p.parts[0],
            PromptPart::Text {
                text:
                    "Generate a detailed description of the content depicted in the provided image."
                        .into()
            }
        );
        assert!(!p.texts().any(|t| t.contains("Label")));
    }

    #[test]
    fn iois_appends_label() {
        let p = build_summary_prompt(SummaryStrategy::Iois, &demo("a", "joy")).unwrap();
        assert!(IOIS_PROMPT
            .starts_with("Generate a descriptive caption for the provided image and labels"));
        assert!(IMAGE_PARSING_PROMPT
            .starts_with("You are presented with an image along with accompanying labels"));
        assert_eq!(p.parts.len(), 3);
        assert_eq!(
            p.parts[2],
            PromptPart::Text {
                text: "Label: joy".into()
            }
        );
        for s in SummaryStrategy::ALL {
            assert_eq!(
                build_summary_prompt(s, &demo("a", "joy"))
                    .unwrap()
                    .image_count(),
                1
            );
        }
        assert!(build_summary_prompt(SummaryStrategy::Iois, &demo("a", " ")).is_err());
    }

    struct Counting {
        inner: MockClient,
        calls: AtomicUsize,
        reply: Option<&'static str>,
    }

    impl InferenceClient for Counting {
        fn model_id(&self) -> &str {
            "counting"
        }
        fn max_in_flight(&self) -> usize {
            3
        }
        fn generate(&self, prompt: &Prompt) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            match self.reply {
                Some(r) => Ok(r.to_string()),
                None => self.inner.generate(prompt),
            }
        }
    }

    fn counting(reply: Option<&'static str>) -> Counting {
        Counting {
            inner: MockClient::new(MockMode::EchoLabel, "m"),
            calls: AtomicUsize::new(0),
            reply,
        }
    }

    #[test]
    fn cached_second_call_makes_no_request() {
        let client = counting(None);
        let cache = GenerationCache::in_memory();
        let d = demo("a", "joy");
        let first = summarize_demonstration(&d, SummaryStrategy::Iois, &client, &cache).unwrap();
        let second = summarize_demonstration(&d, SummaryStrategy::Iois, &client, &cache).unwrap();
        assert_eq!(first, second);
        assert_eq!(client.calls.load(Ordering::SeqCst), 1);
        assert_eq!(first.source_candidate, "a");
        assert_eq!(first.strategy, SummaryStrategy::Iois);
        assert!(!first.text.contains('{') && !first.text.contains('}'));

        summarize_demonstration(&d, SummaryStrategy::TaskIntent, &client, &cache).unwrap();
        assert_eq!(client.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn empty_generation_is_an_empty_summary() {
        let client = counting(Some(""));
        let cache = GenerationCache::in_memory();
        let err =
            summarize_demonstration(&demo("a", "joy"), SummaryStrategy::Iois, &client, &cache)
                .unwrap_err();
        assert_eq!(err.to_string(), "empty summary");
    }

    #[test]
    fn pool_yields_one_summary_per_demo_in_order() {
        let client = counting(None);
        let cache = GenerationCache::in_memory();
        let demos: Vec<_> = (0..7).map(|i| demo(&format!("d{i}"), "joy")).collect();
        let out = summarize_pool(&demos, SummaryStrategy::Iois, &client, &cache).unwrap();
        assert_eq!(out.len(), 7);
        for (s, d) in out.iter().zip(&demos) {
            assert_eq!(s.source_candidate, d.id);
        }
        let again = summarize_pool(&demos, SummaryStrategy::Iois, &client, &cache).unwrap();
        assert_eq!(out, again);
        assert_eq!(client.calls.load(Ordering::SeqCst), 7);
    }

    #[test]
    fn summaries_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let client = MockClient::new(MockMode::Hash, "m");
        let demos: Vec<_> = (0..3).map(|i| demo(&format!("d{i}"), "joy")).collect();
        let out = summarize_pool(
            &demos,
            SummaryStrategy::Standard,
            &client,
            &GenerationCache::in_memory(),
        )
        .unwrap();
        write_summaries(&path, &out).unwrap();
        assert_eq!(read_summaries(&path).unwrap(), out);
        assert_eq!(summary_map(&out).len(), 3);
    }
}
