//! Evaluation runs: compose a prompt per test item, ask the generator, map
//! the answer onto the label list and score it.

mod records;
mod sweep;
mod unlearning;

pub use records::{git_describe, read_records, RecordWriter, RunHeader};
pub use sweep::{run_sweep, sweep_csv, sweep_json, SweepAxis, SweepRow, SWEEP_CSV_HEADER};
pub use unlearning::{build_unlearning_sets, UnlearningSets, UnlearningSpec, UNLEARNED_SUBCLASSES};

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::composer::{
    fit_to_budget, order_demonstrations, render_prompt, ComposedDemonstration, DemoContent,
    OrderPolicy, PromptMode, TokenEstimator, DEFAULT_IMAGE_TOKENS,
};
use crate::error::{Error, Result};
use crate::retrieval::{
    select_demonstrations, CandidatePool, RankedCandidate, RetrievalClients, SelectionParams,
    DEFAULT_DEMO_COUNT, DEFAULT_POOL_SIZE,
};
use crate::store::{CacheKey, EmbeddingIndex, GenerationCache};
use crate::types::{labels_equal, DemonstrationCandidate, LabelSet, SummaryStrategy};

/// Share of errored items above which a run counts as failed.
pub const MAX_ERROR_RATE: f64 = 0.10;

/// Maps free-form model output onto a label: lowercase, trim, strip trailing
/// punctuation, then an exact match, else the single label occurring as a
/// substring. Several substring matches are ambiguous and yield `None`.
pub fn normalize_answer(raw: &str, labels: &LabelSet) -> Option<String> {
    let text = raw
        .trim()
        .to_lowercase()
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string();
    if let Some(l) = labels.find(&text) {
        return Some(l.to_string());
    }
    let mut hits = labels
        .labels()
        .iter()
        .filter(|l| text.contains(&l.to_lowercase()));
    match (hits.next(), hits.next()) {
        (Some(l), None) => Some(l.clone()),
        _ => None,
    }
}

fn default_true() -> bool {
    true
}

fn default_image_tokens() -> usize {
    DEFAULT_IMAGE_TOKENS
}

/// Knobs of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    #[serde(default = "default_mode")]
    pub mode: PromptMode,
    #[serde(default = "default_demo_count")]
    pub demo_count: usize,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default)]
    pub strategy: SummaryStrategy,
    #[serde(default, with = "order_str")]
    pub order: OrderPolicy,
    #[serde(default)]
    pub budget_tokens: Option<usize>,
    #[serde(default = "default_image_tokens")]
    pub image_tokens: usize,
    #[serde(default = "default_true")]
    pub rerank: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_mode() -> PromptMode {
    PromptMode::Vicl
}

fn default_demo_count() -> usize {
    DEFAULT_DEMO_COUNT
}

fn default_pool_size() -> usize {
    DEFAULT_POOL_SIZE
}

mod order_str {
    use super::OrderPolicy;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(o: &OrderPolicy, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(o)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<OrderPolicy, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            mode: PromptMode::Vicl,
            demo_count: DEFAULT_DEMO_COUNT,
            pool_size: DEFAULT_POOL_SIZE,
            strategy: SummaryStrategy::default(),
            order: OrderPolicy::default(),
            budget_tokens: None,
            image_tokens: DEFAULT_IMAGE_TOKENS,
            rerank: true,
            seed: 0,
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        if self.mode != PromptMode::ZeroShot {
            if self.demo_count == 0 {
                return Err(Error::Config("demo_count must be at least 1".into()));
            }
            if self.demo_count > self.pool_size {
                return Err(Error::Config(format!(
                    "demo_count {} exceeds pool_size {}",
                    self.demo_count, self.pool_size
                )));
            }
        }
        if self.budget_tokens == Some(0) {
            return Err(Error::Config("budget_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// How demonstrations are chosen for each query.
#[derive(Clone, Copy)]
pub enum DemoPlan<'a> {
    /// The top reranked demonstrations.
    Retrieved,
    /// One demonstration of the gold label (the best ranked) plus the best
    /// ranked demonstrations of other labels; used to study placement.
    SinglePositive,
    /// A fixed anchor demonstration per query (when listed) plus retrieved
    /// demonstrations from a restricted index.
    Anchored {
        anchors: &'a BTreeMap<String, String>,
        index: &'a EmbeddingIndex,
    },
}

/// Everything a run reads; shared by every setting of a sweep.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub labels: &'a LabelSet,
    pub pool: &'a CandidatePool,
    pub index: &'a EmbeddingIndex,
    /// Summary text by candidate id; required for VICL.
    pub summaries: &'a HashMap<String, String>,
    pub clients: RetrievalClients<'a>,
    pub cache: &'a GenerationCache,
    pub plan: DemoPlan<'a>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub query_id: String,
    pub demo_ids: Vec<String>,
    pub prompt_sha256: String,
    pub raw_output: String,
    pub prediction: Option<String>,
    pub gold: String,
    pub correct: bool,
    /// Retrieval pool with scores, in final rank order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audit: Vec<RankedCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_total: usize,
    pub n_errors: usize,
    /// More than [`MAX_ERROR_RATE`] of the items errored.
    pub failed: bool,
    pub records: Vec<RunRecord>,
}

impl RunOutcome {
    fn from_records(records: Vec<RunRecord>) -> Self {
        let n_total = records.len();
        let n_correct = records.iter().filter(|r| r.correct).count();
        let n_errors = records.iter().filter(|r| r.error.is_some()).count();
        Self {
            accuracy: if n_total == 0 {
                0.0
            } else {
                n_correct as f64 / n_total as f64
            },
            n_correct,
            n_total,
            n_errors,
            failed: n_errors as f64 > MAX_ERROR_RATE * n_total as f64,
            records,
        }
    }
}

struct Composed {
    demos: Vec<DemonstrationCandidate>,
    audit: Vec<RankedCandidate>,
}

fn choose_demos(
    settings: &RunSettings,
    pipeline: &Pipeline<'_>,
    query: &DemonstrationCandidate,
    image: &[u8],
) -> Result<Composed> {
    if settings.mode == PromptMode::ZeroShot {
        return Ok(Composed {
            demos: Vec::new(),
            audit: Vec::new(),
        });
    }
    let params = SelectionParams {
        pool_size: settings.pool_size,
        demo_count: settings.demo_count,
        rerank: settings.rerank,
    };
    let select = |index: &EmbeddingIndex, params: SelectionParams| {
        select_demonstrations(
            image,
            None,
            index,
            pipeline.pool,
            params,
            pipeline.clients,
            pipeline.cache,
        )
    };
    match pipeline.plan {
        DemoPlan::Retrieved => {
            let sel = select(pipeline.index, params)?;
            Ok(Composed {
                demos: sel.demos,
                audit: sel.ranked,
            })
        }
        DemoPlan::SinglePositive => {
            let sel = select(
                pipeline.index,
                SelectionParams {
                    demo_count: params.pool_size,
                    ..params
                },
            )?;
            let mut positive = None;
            let mut negatives = Vec::new();
            for d in sel.demos {
                if labels_equal(&d.answer, &query.answer) {
                    positive.get_or_insert(d);
                } else if negatives.len() + 1 < settings.demo_count {
                    negatives.push(d);
                }
            }
            let positive = positive.ok_or_else(|| {
                Error::Order(format!(
                    "no demonstration labeled {:?} in the retrieval pool",
                    query.answer
                ))
            })?;
            if negatives.len() + 1 < settings.demo_count {
                return Err(Error::Order(format!(
                    "retrieval pool holds only {} demonstrations of other labels",
                    negatives.len()
                )));
            }
            let mut demos = vec![positive];
            demos.extend(negatives);
            Ok(Composed {
                demos,
                audit: sel.ranked,
            })
        }
        DemoPlan::Anchored { anchors, index } => {
            let anchor = anchors.get(&query.id);
            let wanted = settings.demo_count - usize::from(anchor.is_some());
            let mut demos = Vec::new();
            let mut audit = Vec::new();
            if let Some(id) = anchor {
                demos.push(pipeline.pool.get(id)?.clone());
            }
            if wanted > 0 {
                let sel = select(
                    index,
                    SelectionParams {
                        demo_count: wanted,
                        ..params
                    },
                )?;
                demos.extend(sel.demos);
                audit = sel.ranked;
            }
            Ok(Composed { demos, audit })
        }
    }
}

fn evaluate_item(
    settings: &RunSettings,
    pipeline: &Pipeline<'_>,
    query: &DemonstrationCandidate,
) -> RunRecord {
    let mut record = RunRecord {
        query_id: query.id.clone(),
        demo_ids: Vec::new(),
        prompt_sha256: String::new(),
        raw_output: String::new(),
        prediction: None,
        gold: query.answer.clone(),
        correct: false,
        audit: Vec::new(),
        error: None,
    };
    if let Err(e) = evaluate_into(settings, pipeline, query, &mut record) {
        warn!("{}: {e}", query.id);
        record.error = Some(e.to_string());
        record.prediction = None;
        record.correct = false;
    }
    record
}

fn evaluate_into(
    settings: &RunSettings,
    pipeline: &Pipeline<'_>,
    query: &DemonstrationCandidate,
    record: &mut RunRecord,
) -> Result<()> {
    let image = query.image.load()?;
    let chosen = choose_demos(settings, pipeline, query, &image)?;
    record.audit = chosen.audit;
    let anchor = match pipeline.plan {
        DemoPlan::Anchored { anchors, .. } => anchors.get(&query.id),
        _ => None,
    };
    let demos = chosen
        .demos
        .into_iter()
        .map(|d| {
            let content = match settings.mode {
                PromptMode::Vicl => {
                    DemoContent::Summary(pipeline.summaries.get(&d.id).cloned().ok_or_else(
                        || Error::InvalidArgument(format!("no summary for candidate {}", d.id)),
                    )?)
                }
                _ => DemoContent::Image(d.image.clone()),
            };
            Ok(ComposedDemonstration {
                content,
                question: d.question,
                answer: d.answer,
                source_id: d.id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let demos = match (settings.order, anchor) {
        (OrderPolicy::RerankDescending, _) => demos,
        (policy, Some(anchor)) => order_demonstrations(demos, policy, |d| &d.source_id == anchor)?,
        (_, None) if matches!(pipeline.plan, DemoPlan::Anchored { .. }) => demos,
        (policy, None) => {
            order_demonstrations(demos, policy, |d| labels_equal(&d.answer, &query.answer))?
        }
    };
    let demos = match settings.budget_tokens {
        Some(budget) => fit_to_budget(
            settings.mode,
            pipeline.labels,
            demos,
            &query.image,
            budget,
            &TokenEstimator {
                image_tokens: settings.image_tokens,
            },
        )?,
        None => demos,
    };
    record.demo_ids = demos.iter().map(|d| d.source_id.clone()).collect();
    let prompt = render_prompt(settings.mode, pipeline.labels, &demos, &query.image)?;
    let digest = prompt.digest()?;
    record.prompt_sha256 = digest.clone();
    let generator = pipeline.clients.generator;
    let key = CacheKey::new(&image, &digest, generator.model_id());
    record.raw_output = pipeline
        .cache
        .get_or_generate(key, || generator.generate(&prompt))?;
    record.prediction = normalize_answer(&record.raw_output, pipeline.labels);
    record.correct = record
        .prediction
        .as_deref()
        .is_some_and(|p| labels_equal(p, &query.answer));
    Ok(())
}

/// Evaluates every test item. Items run concurrently up to the generator's
/// in-flight bound; `sink` sees the records in test order as soon as each
/// one and all before it are done. Per-item failures become errored
/// records and the run continues.
pub fn run_evaluation(
    settings: &RunSettings,
    pipeline: &Pipeline<'_>,
    tests: &[DemonstrationCandidate],
    mut sink: impl FnMut(&RunRecord) -> Result<()>,
) -> Result<RunOutcome> {
    settings.validate()?;
    if tests.is_empty() {
        return Err(Error::NoTestItems);
    }
    if settings.mode == PromptMode::Vicl && pipeline.summaries.is_empty() {
        return Err(Error::InvalidArgument(
            "VICL needs demonstration summaries".into(),
        ));
    }
    let workers = pipeline
        .clients
        .generator
        .max_in_flight()
        .clamp(1, tests.len());
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, RunRecord)>();
    std::thread::scope(|scope| -> Result<RunOutcome> {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tests.len() {
                    break;
                }
                if tx
                    .send((i, evaluate_item(settings, pipeline, &tests[i])))
                    .is_err()
                {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut records = Vec::with_capacity(tests.len());
        let mut sink_error = None;
        for (i, rec) in rx {
            pending.insert(i, rec);
            while let Some(rec) = pending.remove(&records.len()) {
                if sink_error.is_none() {
                    sink_error = sink(&rec).err();
                }
                records.push(rec);
            }
        }
        if let Some(e) = sink_error {
            return Err(e);
        }
        Ok(RunOutcome::from_records(records))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::mock::{MockClient, MockMode, Script};
    use crate::summarizer::{summarize_pool, summary_map};
    use crate::synthetic::{synthetic_dataset, SyntheticSpec};
    use crate::types::DatasetKind;

    fn labels(ls: &[&str]) -> LabelSet {
        LabelSet::new(
            ls.iter().map(|s| s.to_string()).collect(),
            DatasetKind::Emotion,
        )
        .unwrap()
    }

    #[test]
    fn normalization_rules() {
        let l = labels(&["amusement", "anger"]);
        assert_eq!(
            normalize_answer("Amusement.", &l).as_deref(),
            Some("amusement")
        );
        assert_eq!(normalize_answer("  ANGER!\n", &l).as_deref(), Some("anger"));
        assert_eq!(
            normalize_answer("I sense anger here", &l).as_deref(),
            Some("anger")
        );
        assert_eq!(normalize_answer("nothing", &l), None);
        let l = labels(&["joy", "anger"]);
        assert_eq!(normalize_answer("I feel both joy and anger", &l), None);
        let digits: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        let l = LabelSet::new(digits, DatasetKind::Object).unwrap();
        assert_eq!(normalize_answer("7", &l).as_deref(), Some("7"));
        for label in l.labels() {
            assert_eq!(normalize_answer(label, &l).as_deref(), Some(label.as_str()));
        }
    }

    struct Fixture {
        data: crate::store::Dataset,
        pool: CandidatePool,
        index: EmbeddingIndex,
        summaries: HashMap<String, String>,
        clustered: MockClient,
        echo: MockClient,
        cache: GenerationCache,
    }

    fn fixture() -> Fixture {
        let data = synthetic_dataset(&SyntheticSpec {
            classes: 3,
            candidates_per_class: 10,
            tests_per_class: 6,
            sublabels_per_class: 2,
        })
        .unwrap();
        let clustered = MockClient::new(MockMode::Clustered, "clip");
        let echo = MockClient::new(MockMode::EchoLabel, "lvlm");
        let cache = GenerationCache::in_memory();
        let index = crate::store::build_index(&data.candidates, &clustered).unwrap();
        let summaries = summary_map(
            &summarize_pool(&data.candidates, SummaryStrategy::Iois, &echo, &cache).unwrap(),
        );
        Fixture {
            pool: CandidatePool::new(data.candidates.clone()).unwrap(),
            data,
            index,
            summaries,
            clustered,
            echo,
            cache,
        }
    }

    impl Fixture {
        fn pipeline(&self) -> Pipeline<'_> {
            Pipeline {
                labels: &self.data.labels,
                pool: &self.pool,
                index: &self.index,
                summaries: &self.summaries,
                clients: RetrievalClients {
                    embedder: &self.clustered,
                    scorer: &self.clustered,
                    generator: &self.echo,
                },
                cache: &self.cache,
                plan: DemoPlan::Retrieved,
            }
        }
    }

    #[test]
    fn clustered_echo_vicl_is_perfect_and_streams_in_order() {
        let f = fixture();
        let mut seen = Vec::new();
        let out = run_evaluation(&RunSettings::default(), &f.pipeline(), &f.data.tests, |r| {
            seen.push(r.query_id.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(out.accuracy, 1.0);
        assert_eq!(out.n_total, f.data.tests.len());
        let ids: Vec<_> = f.data.tests.iter().map(|t| t.id.clone()).collect();
        assert_eq!(seen, ids);
        assert!(out
            .records
            .iter()
            .all(|r| r.demo_ids.len() == 4 && r.prompt_sha256.len() == 64));

        let again = run_evaluation(
            &RunSettings::default(),
            &f.pipeline(),
            &f.data.tests,
            |_| Ok(()),
        )
        .unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn icl_and_zero_shot_run() {
        let f = fixture();
        let icl = RunSettings {
            mode: PromptMode::Icl,
            ..RunSettings::default()
        };
        let out = run_evaluation(&icl, &f.pipeline(), &f.data.tests, |_| Ok(())).unwrap();
        assert_eq!(out.accuracy, 1.0);
        let zs = RunSettings {
            mode: PromptMode::ZeroShot,
            ..RunSettings::default()
        };
        let out = run_evaluation(&zs, &f.pipeline(), &f.data.tests, |_| Ok(())).unwrap();
        // Echo-label answers the first label without demonstrations.
        let first = &f.data.labels.labels()[0];
        assert_eq!(
            out.n_correct,
            f.data.tests.iter().filter(|t| &t.answer == first).count()
        );
        assert!(out.records.iter().all(|r| r.demo_ids.is_empty()));
    }

    #[test]
    fn fixed_wrong_answer_scores_zero() {
        let f = fixture();
        let script = Script {
            default_generation: Some("a wrong label".into()),
            ..Script::default()
        };
        let wrong = MockClient::scripted(script, "scripted");
        let mut p = f.pipeline();
        p.clients.generator = &wrong;
        let cache = GenerationCache::in_memory();
        p.cache = &cache;
        let out = run_evaluation(&RunSettings::default(), &p, &f.data.tests, |_| Ok(())).unwrap();
        assert_eq!(out.accuracy, 0.0);
        assert_eq!(out.n_errors, 0);
    }

    #[test]
    fn client_failures_are_errored_records() {
        let f = fixture();
        let empty = MockClient::scripted(Script::default(), "scripted");
        let mut p = f.pipeline();
        p.clients.generator = &empty;
        let cache = GenerationCache::in_memory();
        p.cache = &cache;
        let settings = RunSettings {
            rerank: false,
            ..RunSettings::default()
        };
        let out = run_evaluation(&settings, &p, &f.data.tests, |_| Ok(())).unwrap();
        assert_eq!(out.n_errors, out.n_total);
        assert!(out.failed);
        assert_eq!(out.accuracy, 0.0);
        assert!(out.records.iter().all(|r| !r.correct && r.error.is_some()));
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let f = fixture();
        let err =
            run_evaluation(&RunSettings::default(), &f.pipeline(), &[], |_| Ok(())).unwrap_err();
        assert_eq!(err.to_string(), "no test items");
    }

    #[test]
    fn positive_placement() {
        let f = fixture();
        let mut p = f.pipeline();
        p.plan = DemoPlan::SinglePositive;
        for (policy, at) in [("head", 0), ("middle", 1), ("tail", 3)] {
            let settings = RunSettings {
                order: policy.parse().unwrap(),
                ..RunSettings::default()
            };
            let out = run_evaluation(&settings, &p, &f.data.tests, |_| Ok(())).unwrap();
            assert_eq!(out.n_errors, 0);
            for r in &out.records {
                let positives: Vec<usize> = r
                    .demo_ids
                    .iter()
                    .enumerate()
                    .filter(|(_, id)| f.pool.get(id).unwrap().answer == r.gold)
                    .map(|(i, _)| i)
                    .collect();
                assert_eq!(positives, [at], "{policy}");
            }
        }
    }

    #[test]
    fn settings_validation() {
        let bad = RunSettings {
            demo_count: 30,
            ..RunSettings::default()
        };
        assert!(bad.validate().is_err());
        let json = serde_json::to_value(RunSettings::default()).unwrap();
        assert_eq!(json["order"], "rerank");
        assert_eq!(json["mode"], "vicl");
        let back: RunSettings = serde_json::from_value(json).unwrap();
        assert_eq!(back, RunSettings::default());
    }
}
