use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use log::{info, warn};
use serde_json::json;
use vicl_core::client::server::{serve_forever, ServerOptions};
use vicl_core::client::{connect, ClientConfig, SharedClient, TraceBundle};
use vicl_core::composer::PromptMode;
use vicl_core::config::{load_config, Config};
use vicl_core::evaluator::{
    build_unlearning_sets, run_evaluation, run_sweep, sweep_csv, sweep_json, DemoPlan, Pipeline,
    RecordWriter, RunHeader, RunOutcome, RunSettings, SweepAxis,
};
use vicl_core::flow::{analyze_trace, flow_csv, mean_flow, FlowScores, TraceFlow};
use vicl_core::retrieval::{
    select_demonstrations, CandidatePool, RetrievalClients, SelectionParams,
};
use vicl_core::store::{
    build_index, load_manifest, read_index, write_index, Dataset, EmbeddingIndex, GenerationCache,
};
use vicl_core::summarizer::{read_summaries, summarize_pool, summary_map, write_summaries};
use vicl_core::types::{DemonstrationCandidate, SummaryStrategy};
use vicl_core::{Error, Result};

use crate::{Aggregate, Axis, Command, ConfigArgs, RunFlags};

struct Context {
    config: Config,
    data: Dataset,
    embedder: SharedClient,
    scorer: SharedClient,
    generator: SharedClient,
    cache: GenerationCache,
}

impl Context {
    fn clients(&self) -> RetrievalClients<'_> {
        RetrievalClients {
            embedder: &*self.embedder,
            scorer: &*self.scorer,
            generator: &*self.generator,
        }
    }
}

fn apply_flags(run: &mut RunSettings, flags: &RunFlags) {
    if let Some(m) = flags.mode {
        run.mode = m;
    }
    if let Some(n) = flags.demo_count {
        run.demo_count = n;
    }
    if let Some(k) = flags.pool_size {
        run.pool_size = k;
    }
    if let Some(s) = flags.strategy {
        run.strategy = s;
    }
    if let Some(o) = flags.order {
        run.order = o;
    }
    if let Some(b) = flags.budget {
        run.budget_tokens = Some(b);
    }
    if flags.no_rerank {
        run.rerank = false;
    }
    if let Some(s) = flags.seed {
        run.seed = s;
    }
}

fn prepare(args: &ConfigArgs, flags: &RunFlags) -> Result<Context> {
    let mut config = load_config(&args.config, &args.overrides)?;
    apply_flags(&mut config.run, flags);
    config.validate()?;
    let work = &config.paths.work_dir;
    std::fs::create_dir_all(work).map_err(|e| Error::io(work, e))?;
    let data = load_manifest(&config.dataset.manifest, config.dataset.kind)?;
    info!(
        "{} candidates, {} tests, {} labels",
        data.candidates.len(),
        data.tests.len(),
        data.labels.len()
    );
    Ok(Context {
        embedder: connect(&config.clients.embedder)?,
        scorer: connect(&config.clients.scorer)?,
        generator: connect(&config.clients.generator)?,
        cache: GenerationCache::open(config.cache_dir())?,
        config,
        data,
    })
}

fn same_ids(index: &EmbeddingIndex, candidates: &[DemonstrationCandidate]) -> bool {
    index.len() == candidates.len()
        && index
            .entries()
            .iter()
            .zip(candidates)
            .all(|((id, _), c)| *id == c.id)
}

/// Reuses the index on disk when it covers exactly the candidates.
fn index_for(ctx: &Context) -> Result<EmbeddingIndex> {
    let path = ctx.config.index_path();
    if path.exists() {
        let index = read_index(&path)?;
        if same_ids(&index, &ctx.data.candidates) {
            return Ok(index);
        }
        warn!(
            "{} does not match the candidate set; rebuilding",
            path.display()
        );
    }
    let index = build_index(&ctx.data.candidates, &*ctx.embedder)?;
    write_index(&index, &path)?;
    Ok(index)
}

fn summaries_for(
    ctx: &Context,
    candidates: &[DemonstrationCandidate],
    strategy: SummaryStrategy,
    path: &Path,
) -> Result<HashMap<String, String>> {
    if path.exists() {
        let stored = read_summaries(path)?;
        let model = ctx.generator.model_id();
        let usable = stored.len() == candidates.len()
            && stored.iter().zip(candidates).all(|(s, c)| {
                s.source_candidate == c.id && s.strategy == strategy && s.model_id == model
            });
        if usable {
            return Ok(summary_map(&stored));
        }
        warn!("{} is stale; summarizing again", path.display());
    }
    let summaries = summarize_pool(candidates, strategy, &*ctx.generator, &ctx.cache)?;
    write_summaries(path, &summaries)?;
    Ok(summary_map(&summaries))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

fn evaluate_to_file(
    settings: &RunSettings,
    pipeline: &Pipeline<'_>,
    tests: &[DemonstrationCandidate],
    header: &RunHeader,
    path: &Path,
) -> Result<RunOutcome> {
    let mut writer = RecordWriter::new(create(path)?, header)?;
    run_evaluation(settings, pipeline, tests, |r| writer.write(r))
}

fn report(label: &str, o: &RunOutcome) {
    println!(
        "{label}accuracy {:.6} ({}/{}), {} errored",
        o.accuracy, o.n_correct, o.n_total, o.n_errors
    );
}

fn outcome_code(outcomes: &[&RunOutcome]) -> ExitCode {
    if outcomes.iter().any(|o| o.failed) {
        eprintln!("error: more than 10% of the items failed; the run is marked failed");
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

pub fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::BuildIndex { config } => {
            let ctx = prepare(&config, &RunFlags::default())?;
            let index = build_index(&ctx.data.candidates, &*ctx.embedder)?;
            let path = ctx.config.index_path();
            write_index(&index, &path)?;
            println!(
                "{} entries, dim {}: {}",
                index.len(),
                index.dim(),
                path.display()
            );
        }
        Command::Summarize { config, strategy } => {
            let flags = RunFlags {
                strategy,
                ..RunFlags::default()
            };
            let ctx = prepare(&config, &flags)?;
            let strategy = ctx.config.run.strategy;
            let summaries =
                summarize_pool(&ctx.data.candidates, strategy, &*ctx.generator, &ctx.cache)?;
            let path = ctx.config.summaries_path();
            write_summaries(&path, &summaries)?;
            info!(
                "cache: {} hits, {} misses",
                ctx.cache.hits(),
                ctx.cache.misses()
            );
            println!(
                "{} {} summaries: {}",
                summaries.len(),
                strategy,
                path.display()
            );
        }
        Command::Retrieve {
            config,
            flags,
            query,
        } => {
            let ctx = prepare(&config, &flags)?;
            let index = index_for(&ctx)?;
            let pool = CandidatePool::new(ctx.data.candidates.clone())?;
            let item = ctx
                .data
                .tests
                .iter()
                .chain(&ctx.data.candidates)
                .find(|c| c.id == query)
                .ok_or_else(|| Error::UnknownCandidate(query.clone()))?;
            let run = &ctx.config.run;
            let params = SelectionParams {
                pool_size: run.pool_size,
                demo_count: run.demo_count,
                rerank: run.rerank,
            };
            let sel = select_demonstrations(
                &item.image.load()?,
                None,
                &index,
                &pool,
                params,
                ctx.clients(),
                &ctx.cache,
            )?;
            println!("rank,id,label,retrieval_score,rerank_score,selected");
            for (i, r) in sel.ranked.iter().enumerate() {
                let rerank = r.rerank_score.map(|s| s.to_string()).unwrap_or_default();
                println!(
                    "{},{},{},{},{},{}",
                    i + 1,
                    r.id,
                    pool.get(&r.id)?.answer,
                    r.retrieval_score,
                    rerank,
                    i < params.demo_count
                );
            }
        }
        Command::Run {
            config,
            flags,
            output,
        } => {
            let ctx = prepare(&config, &flags)?;
            let settings = ctx.config.run.clone();
            let index = index_for(&ctx)?;
            let pool = CandidatePool::new(ctx.data.candidates.clone())?;
            let summaries = if settings.mode == PromptMode::Vicl {
                summaries_for(
                    &ctx,
                    &ctx.data.candidates,
                    settings.strategy,
                    &ctx.config.summaries_path(),
                )?
            } else {
                HashMap::new()
            };
            let pipeline = Pipeline {
                labels: &ctx.data.labels,
                pool: &pool,
                index: &index,
                summaries: &summaries,
                clients: ctx.clients(),
                cache: &ctx.cache,
                plan: DemoPlan::Retrieved,
            };
            let path = output.unwrap_or_else(|| {
                ctx.config
                    .paths
                    .work_dir
                    .join(format!("results-{}.jsonl", settings.mode))
            });
            let header = RunHeader::new(ctx.config.to_json(), settings.seed);
            let outcome = evaluate_to_file(&settings, &pipeline, &ctx.data.tests, &header, &path)?;
            report("", &outcome);
            info!("records: {}", path.display());
            return Ok(outcome_code(&[&outcome]));
        }
        Command::Sweep {
            config,
            flags,
            axis,
            values,
            output,
        } => {
            let axis = match axis {
                Axis::OrderSection => SweepAxis::OrderSection,
                _ if values.is_empty() => {
                    return Err(Error::InvalidArgument(
                        "--values is required for this axis".into(),
                    ))
                }
                Axis::DemoCount => SweepAxis::DemoCount(values),
                Axis::ContextBudget => SweepAxis::ContextBudget(values),
            };
            let ctx = prepare(&config, &flags)?;
            let settings = ctx.config.run.clone();
            let index = index_for(&ctx)?;
            let pool = CandidatePool::new(ctx.data.candidates.clone())?;
            let summaries = if settings.mode == PromptMode::Vicl {
                summaries_for(
                    &ctx,
                    &ctx.data.candidates,
                    settings.strategy,
                    &ctx.config.summaries_path(),
                )?
            } else {
                HashMap::new()
            };
            let pipeline = Pipeline {
                labels: &ctx.data.labels,
                pool: &pool,
                index: &index,
                summaries: &summaries,
                clients: ctx.clients(),
                cache: &ctx.cache,
                plan: DemoPlan::Retrieved,
            };
            let rows = run_sweep(&settings, &pipeline, &ctx.data.tests, &axis)?;
            let prefix = output.unwrap_or_else(|| {
                ctx.config
                    .paths
                    .work_dir
                    .join(format!("sweep-{}", axis.name()))
            });
            let csv = sweep_csv(&rows);
            write_file(&prefix.with_extension("csv"), csv.as_bytes())?;
            let mut doc = sweep_json(&axis, &rows);
            doc["config"] = ctx.config.to_json();
            let json = serde_json::to_string_pretty(&doc).expect("sweep serializes");
            write_file(&prefix.with_extension("json"), json.as_bytes())?;
            print!("{csv}");
            for r in rows.iter().filter(|r| r.error.is_some()) {
                eprintln!(
                    "setting {}: {}",
                    r.setting,
                    r.error.as_deref().unwrap_or_default()
                );
            }
        }
        Command::Unlearn {
            config,
            flags,
            output,
        } => {
            let ctx = prepare(&config, &flags)?;
            let settings = ctx.config.run.clone();
            let sets = build_unlearning_sets(
                &ctx.data.candidates,
                &ctx.data.tests,
                &ctx.data.labels,
                settings.seed,
            )?;
            let dir = output.unwrap_or_else(|| ctx.config.paths.work_dir.join("unlearn"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let index = index_for(&ctx)?;
            let standard = index.filtered(|id| sets.standard_ids.contains(id));
            let pool = CandidatePool::new(sets.demo_pool.clone())?;
            let summaries = if settings.mode == PromptMode::Vicl {
                summaries_for(
                    &ctx,
                    &sets.demo_pool,
                    settings.strategy,
                    &dir.join(format!("summaries-{}.jsonl", settings.strategy)),
                )?
            } else {
                HashMap::new()
            };
            let pipeline = Pipeline {
                labels: &ctx.data.labels,
                pool: &pool,
                index: &index,
                summaries: &summaries,
                clients: ctx.clients(),
                cache: &ctx.cache,
                plan: DemoPlan::Anchored {
                    anchors: &sets.anchors,
                    index: &standard,
                },
            };
            let spec = serde_json::to_string_pretty(&json!({
                "spec": sets.spec,
                "anchors": sets.anchors,
                "unlearning_set": sets.unlearning_set.len(),
                "all_set": sets.all_set.len(),
            }))
            .expect("spec serializes");
            write_file(&dir.join("spec.json"), spec.as_bytes())?;
            let mut header = RunHeader::new(ctx.config.to_json(), settings.seed);
            header.config["unlearning"] = json!({"set": "unlearning", "spec": sets.spec});
            let unlearning = evaluate_to_file(
                &settings,
                &pipeline,
                &sets.unlearning_set,
                &header,
                &dir.join("unlearning.jsonl"),
            )?;
            header.config["unlearning"]["set"] = json!("all");
            let all = evaluate_to_file(
                &settings,
                &pipeline,
                &sets.all_set,
                &header,
                &dir.join("all.jsonl"),
            )?;
            println!("sub-classes: {}", sets.spec.affected_sublabels.join(", "));
            report("unlearning ", &unlearning);
            report("all ", &all);
            return Ok(outcome_code(&[&unlearning, &all]));
        }
        Command::AnalyzeFlow {
            traces,
            aggregate,
            output,
            sidecar,
        } => analyze_flow(&traces, aggregate, output, sidecar)?,
        Command::MockServe {
            mode,
            host,
            port,
            model_id,
            dim,
            seed,
            script,
            no_trace,
            fail_every,
        } => {
            let config = ClientConfig {
                model_id,
                dim,
                seed,
                script,
                ..ClientConfig::mock(&mode)
            };
            let client = connect(&config)?;
            let options = ServerOptions {
                trace_disabled: no_trace,
                fail_every,
            };
            serve_forever(&format!("{host}:{port}"), client, options, |addr| {
                println!("listening on http://{addr}");
                let _ = std::io::stdout().flush();
            })?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn flow_sidecar(paths: &[&Path], flows: &[TraceFlow], layers: &[FlowScores]) -> Result<String> {
    let averaged: Vec<TraceFlow> = flows
        .iter()
        .map(|f| TraceFlow {
            layers: f.head_averaged(),
            ..f.clone()
        })
        .collect();
    let doc = json!({
        "traces": paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "num_layers": layers.len(),
        "num_heads": flows.iter().map(|f| f.num_heads).collect::<Vec<_>>(),
        "set_sizes": flows.iter().map(|f| f.set_sizes).collect::<Vec<_>>(),
        "layers": layers,
        "head_averaged": mean_flow(&averaged)?,
    });
    Ok(serde_json::to_string_pretty(&doc).expect("sidecar serializes") + "\n")
}

fn emit_flow(
    paths: &[&Path],
    flows: &[TraceFlow],
    output: Option<&Path>,
    sidecar: Option<PathBuf>,
) -> Result<()> {
    let layers = mean_flow(flows)?;
    let csv = flow_csv(&layers);
    match output {
        Some(p) => write_file(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    if let Some(side) = sidecar.or_else(|| output.map(|p| p.with_extension("json"))) {
        write_file(&side, flow_sidecar(paths, flows, &layers)?.as_bytes())?;
    }
    Ok(())
}

fn analyze_flow(
    traces: &[PathBuf],
    aggregate: Aggregate,
    output: Option<PathBuf>,
    sidecar: Option<PathBuf>,
) -> Result<()> {
    let flows = traces
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            analyze_trace(&TraceBundle::from_json(&text)?)
                .map_err(|e| Error::InvalidTrace(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    if aggregate == Aggregate::Mean || traces.len() == 1 {
        let paths: Vec<&Path> = traces.iter().map(PathBuf::as_path).collect();
        return emit_flow(&paths, &flows, output.as_deref(), sidecar);
    }
    let dir = output.ok_or_else(|| {
        Error::InvalidArgument("per-trace output for several traces needs --output <dir>".into())
    })?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (p, f) in traces.iter().zip(flows) {
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let csv = dir.join(format!("{stem}.csv"));
        emit_flow(&[p.as_path()], &[f], Some(&csv), None)?;
    }
    Ok(())
}
