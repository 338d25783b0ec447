use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use stance_inject::analysis::{
    attribution_report, plot::bar_chart_svg, CorrelationMode, ReportModel, ReportOptions,
};
use stance_inject::encoder::EncoderConfig;
use stance_inject::experiments::{
    attach_contexts, bhapkar_test, evaluate, f1_macro, load_dataset, run_experiment, Dataset,
    ExperimentConfig, Prediction, SplitMode,
};
use stance_inject::inject::{
    model_gradient_check, InjectConfig, ModelConfig, ModelKind, RandomBatchSpec, StanceModel,
};
use stance_inject::retrieval::{
    causal_retrieve, conceptgraph_retrieve, context_length_stats, generate_context,
    read_context_cache, write_context_cache, CausalStore, ConceptGraph, ContextCandidate,
    ContextRecord, ContextSource, EmbeddingBackend, EncoderEmbedding, GenerationBackend,
    GenerationCache, GenerationConfig, HttpBackend, PromptMode, ReplayBackend, ScoredText,
    StopwordChunker,
};
use stance_inject::tensor::GradCheckOptions;
use stance_inject::text::{words, StopwordList};
use stance_inject::util::write_atomic;

const ENDPOINT_VAR: &str = "STANCE_INJECT_ENDPOINT";

#[derive(Parser)]
#[command(
    name = "stance-inject",
    version,
    about = "Stance detection with injected background context"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Conceptnet,
    Causenet,
    Prompt,
}

impl From<SourceArg> for ContextSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Conceptnet => ContextSource::ConceptGraph,
            SourceArg::Causenet => ContextSource::Causal,
            SourceArg::Prompt => ContextSource::Prompt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Bert,
    BertTarget,
    BertContext,
    Inject,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Bert => ModelKind::Bert,
            ModelArg::BertTarget => ModelKind::BertTarget,
            ModelArg::BertContext => ModelKind::BertContext,
            ModelArg::Inject => ModelKind::Inject,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    InTarget,
    CrossTarget,
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptModeArg {
    Np,
    NpTarg,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbeddingArg {
    Hash,
    Encoder,
}

#[derive(Subcommand)]
enum Command {
    /// Retrieve or generate contexts for every instance of a dataset.
    Retrieve(RetrieveArgs),
    /// Train one model per seed from an experiment config.
    Train(TrainArgs),
    /// Score a saved checkpoint on a dataset.
    Eval(EvalArgs),
    /// Paired significance test between two prediction files.
    Compare(CompareArgs),
    /// Attention-norm attributions and their correlation with token relevance.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of every model parameter on random batches.
    Gradcheck(GradcheckArgs),
    /// Dataset counts and context length statistics.
    Stats(StatsArgs),
}

#[derive(clap::Args)]
struct RetrieveArgs {
    #[arg(long, value_enum)]
    source: SourceArg,
    #[arg(long)]
    dataset: PathBuf,
    /// Edge file (conceptnet) or relation file (causenet).
    #[arg(long, required_if_eq_any([("source", "conceptnet"), ("source", "causenet")]))]
    kb: Option<PathBuf>,
    /// Candidates kept per instance.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    /// One stopword per line; defaults to the built-in English list.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "hash")]
    embedding: EmbeddingArg,
    #[arg(long, default_value_t = 256)]
    embedding_dim: usize,
    /// Directory with weights.ntar, config.json and vocab.txt of a sentence encoder.
    #[arg(long, required_if_eq("embedding", "encoder"))]
    embedding_model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "np")]
    prompt_mode: PromptModeArg,
    /// Replay generations from a JSON Lines file of {prompt, text}
    /// instead of calling the endpoint in $STANCE_INJECT_ENDPOINT.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Generation cache, read if present and rewritten afterwards.
    #[arg(long)]
    generation_cache: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    max_words: usize,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Train a single run with this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long)]
    inject_layer: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Only use cached contexts from this source.
    #[arg(long, value_enum)]
    source: Option<SourceArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Context cache joined by instance id.
    #[arg(long)]
    contexts: Option<PathBuf>,
    #[arg(long, value_enum)]
    source: Option<SourceArg>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CompareArgs {
    #[arg(long)]
    run_a: PathBuf,
    #[arg(long)]
    run_b: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    /// `name=checkpoint_dir`, repeatable.
    #[arg(long = "model", required = true, value_parser = parse_named_path)]
    models: Vec<(String, PathBuf)>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    contexts: Option<PathBuf>,
    #[arg(long, value_enum)]
    source: Option<SourceArg>,
    #[arg(long)]
    out: PathBuf,
    /// 1-based layer; defaults to the last (or the inject layer).
    #[arg(long)]
    layer: Option<usize>,
    /// Correlate token occurrences instead of token types.
    #[arg(long)]
    occurrence: bool,
    #[arg(long, default_value_t = 5)]
    min_count: usize,
    /// Raw counts instead of +0.5 smoothing.
    #[arg(long)]
    no_smoothing: bool,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    /// Check only this seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: Vec<PathBuf>,
    #[arg(long)]
    contexts: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_named_path(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected name=path, got {s:?}")),
    }
}

/// A bad combination of otherwise well-formed arguments.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

/// Run metadata that changes between otherwise identical invocations.
fn write_sidecar(path: &Path, command: &str, extra: serde_json::Value) -> Result<()> {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default();
    write_json(
        path,
        &json!({
            "command": command,
            "argv": std::env::args().collect::<Vec<_>>(),
            "finished_unix_secs": now.as_secs(),
            "details": extra,
        }),
    )
}

fn sidecar_for(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    file.with_file_name(name)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn load_stopwords(path: Option<&Path>) -> Result<StopwordList> {
    Ok(match path {
        Some(p) => StopwordList::load(p)?,
        None => StopwordList::english(),
    })
}

fn to_record(
    id: &str,
    source: ContextSource,
    dataset: &str,
    candidates: &[ContextCandidate],
) -> ContextRecord {
    ContextRecord {
        id: id.to_string(),
        source,
        candidates: candidates.iter().map(ScoredText::from).collect(),
        dataset: Some(dataset.to_string()),
    }
}

fn retrieve(args: RetrieveArgs) -> Result<()> {
    ensure!(args.k > 0, usage("--k must be positive"));
    let dataset = load_dataset(&args.dataset)?;
    let name = dataset_name(&args.dataset);
    let stopwords = load_stopwords(args.stopwords.as_deref())?;
    let source = ContextSource::from(args.source);
    let mut details =
        json!({ "instances": dataset.instances.len(), "source": source.name(), "k": args.k });
    let records: Vec<ContextRecord> = match args.source {
        SourceArg::Conceptnet => {
            let kb = args
                .kb
                .as_deref()
                .ok_or_else(|| usage("--kb is required"))?;
            let (graph, stats) = ConceptGraph::load(kb, &stopwords)?;
            log::info!(
                "concept graph: {} of {} edges kept",
                stats.kept,
                stats.lines
            );
            details["graph"] = serde_json::to_value(&stats)?;
            dataset
                .instances
                .iter()
                .map(|i| {
                    let found =
                        conceptgraph_retrieve(&words(&i.text), &words(&i.target), &graph, args.k);
                    to_record(&i.id, source, &name, &found)
                })
                .collect()
        }
        SourceArg::Causenet => {
            let kb = args
                .kb
                .as_deref()
                .ok_or_else(|| usage("--kb is required"))?;
            let backend: Box<dyn EmbeddingBackend> = match args.embedding {
                EmbeddingArg::Hash => {
                    ensure!(
                        args.embedding_dim > 0,
                        usage("--embedding-dim must be positive")
                    );
                    Box::new(stance_inject::retrieval::HashEmbedding::new(
                        args.embedding_dim,
                    ))
                }
                EmbeddingArg::Encoder => {
                    let dir = args
                        .embedding_model
                        .as_deref()
                        .ok_or_else(|| usage("--embedding-model is required"))?;
                    Box::new(EncoderEmbedding::load(
                        &dir.join("weights.ntar"),
                        &dir.join("config.json"),
                        &dir.join("vocab.txt"),
                    )?)
                }
            };
            let store = CausalStore::load(kb, backend.as_ref())?;
            log::info!("causal store: {} relations", store.len());
            let mut exceeded = 0;
            let records = dataset
                .instances
                .iter()
                .map(|i| {
                    let found = causal_retrieve(&i.text, &store, backend.as_ref(), args.k)?;
                    exceeded += usize::from(found.k_exceeded);
                    Ok(to_record(&i.id, source, &name, &found.candidates))
                })
                .collect::<Result<Vec<_>>>()?;
            if exceeded > 0 {
                log::warn!(
                    "k={} exceeds the store size; all {} relations returned",
                    args.k,
                    store.len()
                );
            }
            records
        }
        SourceArg::Prompt => {
            let backend: Box<dyn GenerationBackend> =
                match (&args.replay, std::env::var(ENDPOINT_VAR)) {
                    (Some(path), _) => Box::new(ReplayBackend::load(path)?),
                    (None, Ok(endpoint)) if !endpoint.is_empty() => Box::new(HttpBackend::new(
                        endpoint,
                        Duration::from_secs(args.timeout_secs),
                        3,
                        Duration::from_millis(500),
                    )),
                    _ => {
                        return Err(usage(format!(
                            "prompt source needs --replay or ${ENDPOINT_VAR}"
                        )))
                    }
                };
            let cache = args
                .generation_cache
                .as_ref()
                .map(GenerationCache::load)
                .transpose()?;
            let config = GenerationConfig {
                max_words: args.max_words,
                m: args.k,
                mode: match args.prompt_mode {
                    PromptModeArg::Np => PromptMode::Np,
                    PromptModeArg::NpTarg => PromptMode::NpTarg,
                },
                ..GenerationConfig::default()
            };
            let mut prompts = 0;
            let mut failures = 0;
            let mut records = Vec::with_capacity(dataset.instances.len());
            for inst in &dataset.instances {
                let outcome = generate_context(
                    &inst.text,
                    &inst.target,
                    &config,
                    backend.as_ref(),
                    &stopwords,
                    &StopwordChunker,
                    cache.as_ref(),
                );
                prompts += outcome.prompts;
                for f in &outcome.failures {
                    log::warn!("{}: prompt {:?} failed: {}", inst.id, f.prompt, f.error);
                }
                failures += outcome.failures.len();
                records.push(to_record(&inst.id, source, &name, &outcome.candidates));
            }
            if let (Some(cache), Some(path)) = (&cache, &args.generation_cache) {
                cache.save(path)?;
            }
            details["prompts"] = prompts.into();
            details["failed_prompts"] = failures.into();
            records
        }
    };
    let empty = records.iter().filter(|r| r.candidates.is_empty()).count();
    details["without_context"] = empty.into();
    write_context_cache(&args.out, &records)?;
    write_sidecar(&sidecar_for(&args.out), "retrieve", details)?;
    println!(
        "{} records written to {} ({empty} without context)",
        records.len(),
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seeds = vec![seed];
    }
    if let Some(mode) = args.mode {
        config.split.mode = match mode {
            ModeArg::InTarget => SplitMode::InTarget,
            ModeArg::CrossTarget => SplitMode::CrossTarget,
        };
    }
    if let Some(model) = args.model {
        config.model.kind = model.into();
    }
    if args.inject_layer.is_some() {
        config.model.inject_layer = args.inject_layer;
    }
    if let Some(m) = args.m {
        config.model.m = m;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    if let Some(source) = args.source {
        let spec = config
            .context
            .as_mut()
            .ok_or_else(|| usage("--source needs a context cache in the config"))?;
        spec.source = Some(source.into());
    }
    ensure!(!config.train.seeds.is_empty(), usage("no seeds configured"));
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_json(&args.out.join("config.json"), &config)?;
    let outcome = run_experiment(&config, Some(&args.out))?;

    let name = dataset_name(&config.dataset);
    let mut labels: Vec<String> = outcome
        .runs
        .iter()
        .map(|r| format!("seed {}", r.seed))
        .collect();
    let mut values: Vec<f64> = outcome.runs.iter().map(|r| r.test_f1).collect();
    labels.push("mean".into());
    values.push(outcome.test_f1.mean);
    let svg = bar_chart_svg(
        &format!("{name}: test F1-macro ({})", config.model.kind),
        &labels,
        &values,
    );
    let plot = args.out.join("f1.svg");
    write_atomic(&plot, svg.as_bytes()).with_context(|| format!("writing {}", plot.display()))?;
    write_sidecar(
        &args.out.join("meta.json"),
        "train",
        json!({ "config": args.config }),
    )?;

    for run in &outcome.runs {
        println!(
            "seed {}: best epoch {} dev F1 {:.4} test F1 {:.4}",
            run.seed, run.best_epoch, run.dev_f1, run.test_f1
        );
    }
    let agg = &outcome.test_f1;
    println!(
        "{name} {}: test F1-macro {:.4} ± {:.4} over {} seed(s)",
        config.model.kind, agg.mean, agg.stdev, agg.n
    );
    Ok(())
}

/// Attach cached contexts, or check that inline ones are present when the
/// model needs them.
fn with_contexts(
    dataset: &mut Dataset,
    contexts: Option<&Path>,
    source: Option<SourceArg>,
    kind: ModelKind,
    m: usize,
) -> Result<()> {
    match contexts {
        Some(path) => {
            let mut records = read_context_cache(path)?;
            if let Some(s) = source {
                let s = ContextSource::from(s);
                records.retain(|r| r.source == s);
            }
            let missing = attach_contexts(&mut dataset.instances, &records, m);
            if missing > 0 {
                log::warn!("{missing} instance(s) have no cached context");
            }
        }
        None if kind.uses_context() => {
            for inst in &mut dataset.instances {
                let ctx = inst.contexts.as_mut().ok_or_else(|| {
                    usage(format!(
                        "{kind} needs contexts: pass --contexts (instance {:?})",
                        inst.id
                    ))
                })?;
                ctx.truncate(m);
            }
        }
        None => {}
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PredictionFile {
    #[serde(default)]
    labels: Vec<String>,
    predictions: Vec<Prediction>,
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let (model, vocab) = StanceModel::load(&args.checkpoint)?;
    let mut dataset = load_dataset(&args.dataset)?;
    let k = model.config.inject.num_labels;
    ensure!(
        dataset.scheme.len() == k,
        "dataset has {} labels, checkpoint predicts {k}",
        dataset.scheme.len()
    );
    with_contexts(
        &mut dataset,
        args.contexts.as_deref(),
        args.source,
        model.kind(),
        model.config.inject.m,
    )?;
    let all: Vec<usize> = (0..dataset.instances.len()).collect();
    let predictions = evaluate(&model, &vocab, &dataset.instances, &all, args.batch_size)?;
    let pred: Vec<usize> = predictions.iter().map(|p| p.pred).collect();
    let gold: Vec<usize> = predictions.iter().map(|p| p.gold).collect();
    let report = f1_macro(&pred, &gold, k)?;
    if let Some(out) = &args.out {
        write_json(
            out,
            &json!({
                "checkpoint": args.checkpoint,
                "dataset": args.dataset,
                "model": model.config,
                "labels": dataset.scheme.labels,
                "f1_macro": report.f1_macro,
                "per_class": report.per_class,
                "predictions": predictions,
            }),
        )?;
        write_sidecar(&sidecar_for(out), "eval", json!({}))?;
    }
    println!(
        "{}: F1-macro {:.4} over {} instances",
        dataset_name(&args.dataset),
        report.f1_macro,
        pred.len()
    );
    for (label, f1) in dataset.scheme.labels.iter().zip(&report.per_class) {
        match f1 {
            Some(f) => println!("  {label}: {f:.4}"),
            None => println!("  {label}: absent"),
        }
    }
    Ok(())
}

fn read_predictions(path: &Path) -> Result<PredictionFile> {
    let raw = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&raw).with_context(|| {
        format!(
            "{}: expected a JSON object with `predictions`",
            path.display()
        )
    })
}

fn compare(args: CompareArgs) -> Result<()> {
    let a = read_predictions(&args.run_a)?;
    let b = read_predictions(&args.run_b)?;
    if !a.labels.is_empty() && !b.labels.is_empty() && a.labels != b.labels {
        bail!("label schemes differ: {:?} vs {:?}", a.labels, b.labels);
    }
    let by_id: HashMap<&str, &Prediction> =
        b.predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    ensure!(
        a.predictions.len() == b.predictions.len(),
        "runs cover {} and {} instances",
        a.predictions.len(),
        b.predictions.len()
    );
    let mut pa = Vec::with_capacity(a.predictions.len());
    let mut pb = Vec::with_capacity(a.predictions.len());
    for p in &a.predictions {
        let q = by_id
            .get(p.id.as_str())
            .with_context(|| format!("instance {:?} missing from run b", p.id))?;
        ensure!(
            p.gold == q.gold,
            "instance {:?} has different gold labels",
            p.id
        );
        pa.push(p.pred);
        pb.push(q.pred);
    }
    let k = a
        .labels
        .len()
        .max(b.labels.len())
        .max(pa.iter().chain(&pb).max().map_or(0, |m| m + 1));
    let result = bhapkar_test(&pa, &pb, k)?;
    let significant = result.significant(args.alpha);
    println!("instances: {}", result.n);
    println!("statistic: {:.6}", result.statistic);
    println!("df: {}", result.df);
    println!("p: {:.6}", result.p_value);
    println!(
        "{} at {}",
        if significant {
            "significant"
        } else {
            "not significant"
        },
        args.alpha
    );
    if let Some(out) = &args.out {
        write_json(
            out,
            &json!({ "run_a": args.run_a, "run_b": args.run_b, "alpha": args.alpha, "significant": significant, "result": result }),
        )?;
    }
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let loaded = args
        .models
        .iter()
        .map(|(name, dir)| {
            let (model, vocab) = StanceModel::load(dir)
                .with_context(|| format!("loading {name} from {}", dir.display()))?;
            Ok((name.clone(), model, vocab))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut dataset = load_dataset(&args.dataset)?;
    let needs = loaded.iter().find(|(_, m, _)| m.kind().uses_context());
    let m = loaded
        .iter()
        .map(|(_, model, _)| model.config.inject.m)
        .max()
        .unwrap_or(1);
    let kind = needs.map_or(ModelKind::Bert, |(_, model, _)| model.kind());
    with_contexts(&mut dataset, args.contexts.as_deref(), args.source, kind, m)?;
    let models: Vec<ReportModel> = loaded
        .iter()
        .map(|(name, model, vocab)| ReportModel {
            name: name.clone(),
            model,
            vocab,
        })
        .collect();
    let options = ReportOptions {
        layer: args.layer,
        mode: if args.occurrence {
            CorrelationMode::Occurrence
        } else {
            CorrelationMode::Type
        },
        smoothing: (!args.no_smoothing).then_some(0.5),
        min_count: args.min_count,
        batch_size: args.batch_size,
        ..ReportOptions::default()
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let report = attribution_report(&models, &dataset.instances, &options, Some(&args.out))?;
    write_sidecar(
        &args.out.join("meta.json"),
        "analyze",
        json!({ "dataset": args.dataset }),
    )?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.1}"));
    println!(
        "{:<16} {:<6} {:>8} {:>8}",
        "model", "kind", "target", "label"
    );
    for c in &report.summary.correlations {
        println!(
            "{:<16} {:<6} {:>8} {:>8}",
            c.model,
            c.kind.name(),
            fmt(c.target),
            fmt(c.label)
        );
    }
    println!(
        "{} attribution rows written to {}",
        report.rows.len(),
        args.out.display()
    );
    Ok(())
}

fn default_kind() -> ModelKind {
    ModelKind::Inject
}
fn default_labels() -> usize {
    3
}
fn default_batch() -> usize {
    1
}
fn default_seq() -> usize {
    6
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_tol() -> f64 {
    GradCheckOptions::default().tol
}

/// Input of the `gradcheck` subcommand.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckConfig {
    #[serde(default = "default_kind")]
    kind: ModelKind,
    /// Defaults to 2 layers, 2 heads, hidden 32, ff 32, vocabulary 20.
    #[serde(default)]
    encoder: Option<EncoderConfig>,
    #[serde(default)]
    inject_layer: Option<usize>,
    #[serde(default)]
    m: Option<usize>,
    #[serde(default = "default_labels")]
    num_labels: usize,
    #[serde(default = "default_batch")]
    batch: usize,
    #[serde(default = "default_seq")]
    seq: usize,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_tol")]
    tol: f64,
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let raw = std::fs::read(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut gc: GradcheckConfig = serde_json::from_slice(&raw)
        .map_err(|e| usage(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        gc.seeds = vec![seed];
    }
    let encoder = gc.encoder.clone().unwrap_or_else(|| EncoderConfig {
        ff_size: 32,
        dropout: 0.0,
        init_std: 0.3,
        ..EncoderConfig::toy(20, gc.seq.max(8))
    });
    let mut inject = InjectConfig::new(encoder, gc.num_labels);
    inject.inject_layer = gc.inject_layer;
    if let Some(m) = gc.m {
        inject.m = m;
    }
    let config = ModelConfig {
        kind: gc.kind,
        inject,
    };
    let opts = GradCheckOptions {
        tol: gc.tol,
        ..GradCheckOptions::default()
    };
    let spec = RandomBatchSpec {
        batch: gc.batch,
        seq: gc.seq,
    };
    let mut worst = BTreeMap::<String, f64>::new();
    let mut failed = 0;
    for &seed in &gc.seeds {
        let report = model_gradient_check(&config, spec, seed, opts)?;
        log::info!("seed {seed}: max rel err {:.3e}", report.max_rel_err);
        for p in &report.params {
            let w = worst.entry(p.name.clone()).or_insert(0.0);
            *w = w.max(p.max_rel_err);
        }
        if !report.passed {
            failed += 1;
            for p in report.failing() {
                eprintln!(
                    "seed {seed}: {} rel err {:.3e} (analytic {:.6e}, numeric {:.6e})",
                    p.name, p.max_rel_err, p.analytic, p.numeric
                );
            }
        }
    }
    for (name, err) in &worst {
        println!("{name:<48} {err:.3e}");
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    println!(
        "{} parameters, {} seed(s), max rel err {max:.3e} (tol {:.0e})",
        worst.len(),
        gc.seeds.len(),
        gc.tol
    );
    ensure!(failed == 0, "gradient check failed for {failed} seed(s)");
    Ok(())
}

#[derive(Serialize)]
struct DatasetCounts {
    dataset: String,
    instances: usize,
    /// target -> label -> count
    counts: BTreeMap<String, BTreeMap<String, usize>>,
}

fn stats(args: StatsArgs) -> Result<()> {
    if args.dataset.is_empty() && args.contexts.is_empty() {
        return Err(usage("pass at least one --dataset or --contexts"));
    }
    let mut datasets = Vec::new();
    for path in &args.dataset {
        let d = load_dataset(path)?;
        let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for inst in &d.instances {
            *counts
                .entry(inst.target.clone())
                .or_default()
                .entry(d.scheme.labels[inst.label].clone())
                .or_default() += 1;
        }
        println!("{}: {} instances", dataset_name(path), d.instances.len());
        for (target, by_label) in &counts {
            let cells: Vec<String> = by_label.iter().map(|(l, n)| format!("{l}={n}")).collect();
            println!("  {target}: {}", cells.join(" "));
        }
        datasets.push(DatasetCounts {
            dataset: dataset_name(path),
            instances: d.instances.len(),
            counts,
        });
    }
    let mut records = Vec::new();
    for path in &args.contexts {
        records.extend(read_context_cache(path)?);
    }
    let lengths = context_length_stats(&records);
    for s in &lengths {
        println!(
            "{} {}: {} contexts, {:.2} tokens on average",
            s.dataset,
            s.source.name(),
            s.contexts,
            s.mean_tokens
        );
    }
    if let Some(out) = &args.out {
        write_json(
            out,
            &json!({ "datasets": datasets, "context_lengths": lengths }),
        )?;
    }
    Ok(())
}

/// The error chain joined by `: `, skipping causes the previous message
/// already ends with.
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Retrieve(a) => retrieve(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Compare(a) => compare(a),
        Command::Analyze(a) => analyze(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Stats(a) => stats(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render_chain(&e));
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
