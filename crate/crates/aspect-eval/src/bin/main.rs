//! Command-line entry point: forge training data, inspect aspect
//! selection, run evaluations, correlate with human judgments, and serve
//! a deterministic mock backend.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use aspect_eval::backend::{Backend, BackendKind, RecordingBackend};
use aspect_eval::domain::{AspectCatalog, AspectId, EvalRequest, HumanRatingRow, UnitScore};
use aspect_eval::engine::{Engine, EngineConfig, FailurePolicy, InjectionMode};
use aspect_eval::error::{Error, Result};
use aspect_eval::fileio::{read_jsonl, write_jsonl};
use aspect_eval::forge::{build_training_mix, ForgeConfig, SourceDataset, TemplateSet};
use aspect_eval::ingest::{load_rating_dataset, SourceSchemaConfig};
use aspect_eval::metaeval::{
    segment_correlation, AggregationMode, Metric, PairedSeries,
};
use aspect_eval::selector::{
    embed_definitions, select_top_k, similarity_ranking, EmbeddingCache, PoolMode,
};
use aspect_eval::verbalizer::TemplateCatalog;

#[derive(Parser, Debug)]
#[command(
    name = "aspect-eval",
    version,
    about = "Multi-aspect text evaluation: task forging, Boolean-QA scoring with auxiliary aspects, and correlation against human judgments",
    long_about = None
)]
struct Cli {
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master random seed; recorded in every output manifest.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Log verbosity: error, warn, info, debug, trace.
    #[arg(long, global = true, value_name = "LEVEL")]
    log_level: Option<String>,

    /// Directory receiving all output artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Derive stage-1/stage-2 training tasks and inference requests from
    /// human-rating datasets.
    Forge(ForgeArgs),
    /// Score evaluation requests through a backend, with auxiliary-aspect
    /// enrichment, writing results and traces.
    Evaluate(EvaluateArgs),
    /// Inspect auxiliary-aspect selection for one target aspect.
    Select(SelectArgs),
    /// Correlate a results file with a human-ratings file.
    Metaeval(MetaevalArgs),
    /// Serve a mock or replay backend over the HTTP wire protocol.
    MockServe(MockServeArgs),
}

#[derive(Args, Debug)]
struct ForgeArgs {
    /// Source dataset as name=path (repeatable).
    #[arg(long = "data", value_name = "NAME=PATH", required = true)]
    data: Vec<String>,

    /// Ingest schema as name=path, one per dataset (repeatable).
    #[arg(long = "schema", value_name = "NAME=PATH", required = true)]
    schema: Vec<String>,

    /// Aspect catalog file; defaults to the built-in catalog.
    #[arg(long, value_name = "PATH")]
    catalog: Option<PathBuf>,

    /// Instruction templates file; defaults to the built-in set.
    #[arg(long, value_name = "PATH")]
    instruction_templates: Option<PathBuf>,

    /// Verbalizer templates file; defaults to the built-in catalog.
    #[arg(long, value_name = "PATH")]
    verbalizer_templates: Option<PathBuf>,

    /// Dataset names assigned to the training side (repeatable).
    #[arg(long = "train", value_name = "NAME")]
    train: Vec<String>,

    /// Dataset names assigned to the test side (repeatable).
    #[arg(long = "test", value_name = "NAME")]
    test: Vec<String>,

    /// Likert levels K for scoring tasks.
    #[arg(long, value_name = "K")]
    likert_levels: Option<u32>,

    /// Binarization threshold delta in [0,1].
    #[arg(long, value_name = "DELTA")]
    threshold: Option<f64>,

    /// Minimum score gap for comparison pairs.
    #[arg(long, value_name = "GAP")]
    min_gap: Option<f64>,

    /// Emit NOTA comparison labels on ties instead of skipping them.
    #[arg(long)]
    allow_nota: bool,

    /// Per-task-type instance cap as type=N (repeatable).
    #[arg(long = "quota", value_name = "TYPE=N")]
    quota: Vec<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Evaluation request file (newline-delimited JSON).
    #[arg(long, value_name = "PATH")]
    requests: Option<PathBuf>,

    /// Backend: mock[:SEED], replay:PATH, replay-lenient:PATH, or wire:URL.
    #[arg(long, value_name = "SPEC")]
    backend: Option<String>,

    /// Environment variable holding the wire-backend auth token.
    #[arg(long, value_name = "VAR")]
    auth_env: Option<String>,

    /// Number of auxiliary aspects per target.
    #[arg(long, value_name = "N")]
    k: Option<usize>,

    /// Auxiliary candidate pool: all, seen, unseen, random.
    #[arg(long, value_name = "MODE")]
    pool_mode: Option<String>,

    /// Auxiliary verdict source: predicted, ground-truth, random.
    #[arg(long, value_name = "MODE")]
    injection_mode: Option<String>,

    /// Binarization threshold delta in [0,1].
    #[arg(long, value_name = "DELTA")]
    threshold: Option<f64>,

    /// Worker threads for batch evaluation.
    #[arg(long, value_name = "N")]
    parallelism: Option<usize>,

    /// On item failure: abort the batch or skip and record.
    #[arg(long, value_name = "POLICY")]
    failure_policy: Option<String>,

    /// Aspect catalog file; defaults to the built-in catalog.
    #[arg(long, value_name = "PATH")]
    catalog: Option<PathBuf>,

    /// Instruction templates file; defaults to the built-in set.
    #[arg(long, value_name = "PATH")]
    instruction_templates: Option<PathBuf>,

    /// Verbalizer templates file; defaults to the built-in catalog.
    #[arg(long, value_name = "PATH")]
    verbalizer_templates: Option<PathBuf>,

    /// Record every backend exchange into a replay fixture file.
    #[arg(long, value_name = "PATH")]
    record_fixture: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    /// Target aspect id (name@nlg-task).
    #[arg(long, value_name = "ASPECT")]
    aspect: String,

    /// Backend: mock[:SEED], replay:PATH, replay-lenient:PATH, or wire:URL.
    #[arg(long, value_name = "SPEC")]
    backend: Option<String>,

    /// Environment variable holding the wire-backend auth token.
    #[arg(long, value_name = "VAR")]
    auth_env: Option<String>,

    /// Number of auxiliary aspects to select.
    #[arg(long, value_name = "N")]
    k: Option<usize>,

    /// Auxiliary candidate pool: all, seen, unseen, random.
    #[arg(long, value_name = "MODE")]
    pool_mode: Option<String>,

    /// Aspect catalog file; defaults to the built-in catalog.
    #[arg(long, value_name = "PATH")]
    catalog: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MetaevalArgs {
    /// Results file produced by `evaluate`.
    #[arg(long, value_name = "PATH")]
    results: Option<PathBuf>,

    /// Human-ratings file (id, aspect_id, human, context_id).
    #[arg(long, value_name = "PATH")]
    human: Option<PathBuf>,

    /// Correlation metric: pearson, spearman, kendall, all.
    #[arg(long, value_name = "METRIC")]
    metric: Option<String>,

    /// Aggregation mode: pooled, grouped, all.
    #[arg(long, value_name = "MODE")]
    mode: Option<String>,
}

#[derive(Args, Debug)]
struct MockServeArgs {
    /// Bind address; port 0 picks an ephemeral port (printed on stdout).
    #[arg(long, value_name = "ADDR", default_value = "127.0.0.1:0")]
    addr: String,

    /// Backend: mock[:SEED], replay:PATH, or replay-lenient:PATH.
    #[arg(long, value_name = "SPEC")]
    backend: Option<String>,
}

/// Optional settings loadable from the --config file. Flags win over the
/// file; the merged result is dumped next to every output.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    log_level: Option<String>,
    #[serde(default)]
    backend: Option<String>,
    #[serde(default)]
    auth_env: Option<String>,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    pool_mode: Option<String>,
    #[serde(default)]
    injection_mode: Option<String>,
    #[serde(default)]
    threshold: Option<f64>,
    #[serde(default)]
    parallelism: Option<usize>,
    #[serde(default)]
    failure_policy: Option<String>,
    #[serde(default)]
    metric: Option<String>,
    #[serde(default)]
    mode: Option<String>,
    #[serde(default)]
    forge: Option<ForgeConfig>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
    }
}

fn require_path(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "{what} path does not exist: {}",
            path.display()
        )))
    }
}

fn parse_pair(spec: &str, flag: &str) -> Result<(String, String)> {
    spec.split_once('=')
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .ok_or_else(|| Error::Usage(format!("--{flag} expects NAME=VALUE, got '{spec}'")))
}

fn parse_backend(spec: &str, auth_env: Option<String>) -> Result<BackendKind> {
    if spec == "mock" {
        return Ok(BackendKind::Mock { seed: 0 });
    }
    if let Some(seed) = spec.strip_prefix("mock:") {
        let seed = seed
            .parse()
            .map_err(|_| Error::Usage(format!("invalid mock seed '{seed}'")))?;
        return Ok(BackendKind::Mock { seed });
    }
    if let Some(path) = spec.strip_prefix("replay:") {
        require_path(Path::new(path), "replay fixture")?;
        return Ok(BackendKind::Replay {
            fixture_path: path.to_string(),
            strict: true,
        });
    }
    if let Some(path) = spec.strip_prefix("replay-lenient:") {
        require_path(Path::new(path), "replay fixture")?;
        return Ok(BackendKind::Replay {
            fixture_path: path.to_string(),
            strict: false,
        });
    }
    if let Some(url) = spec.strip_prefix("wire:") {
        return Ok(BackendKind::Wire {
            endpoint: url.to_string(),
            auth_token_env: auth_env,
            timeout_ms: 30_000,
            retry: Default::default(),
            max_in_flight: 8,
        });
    }
    Err(Error::Usage(format!(
        "unknown backend spec '{spec}' (expected mock[:SEED], replay:PATH, replay-lenient:PATH, wire:URL)"
    )))
}

fn parse_injection(spec: &str, seed: u64) -> Result<InjectionMode> {
    match spec {
        "predicted" => Ok(InjectionMode::Predicted),
        "ground-truth" | "ground_truth" => Ok(InjectionMode::GroundTruth),
        "random" => Ok(InjectionMode::RandomResults { seed }),
        other => Err(Error::Usage(format!(
            "unknown injection mode '{other}' (expected predicted, ground-truth, random)"
        ))),
    }
}

fn parse_threshold(value: f64) -> Result<UnitScore> {
    UnitScore::new(value)
        .map_err(|_| Error::Usage(format!("threshold must lie in [0,1], got {value}")))
}

fn load_catalog(path: Option<&Path>) -> Result<AspectCatalog> {
    match path {
        Some(p) => {
            require_path(p, "catalog")?;
            AspectCatalog::load(p)
        }
        None => Ok(AspectCatalog::default_catalog()),
    }
}

fn load_templates(path: Option<&Path>) -> Result<TemplateSet> {
    match path {
        Some(p) => {
            require_path(p, "instruction templates")?;
            TemplateSet::load(p)
        }
        None => Ok(TemplateSet::default_set()),
    }
}

fn load_verbalizer(path: Option<&Path>) -> Result<TemplateCatalog> {
    match path {
        Some(p) => {
            require_path(p, "verbalizer templates")?;
            TemplateCatalog::load(p)
        }
        None => Ok(TemplateCatalog::default_catalog()),
    }
}

fn output_dir(cli_dir: Option<&Path>, file: &FileConfig) -> Result<PathBuf> {
    let dir = cli_dir
        .map(Path::to_path_buf)
        .or_else(|| file.output_dir.clone())
        .ok_or_else(|| Error::Usage("--output-dir is required for this subcommand".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok(dir)
}

fn write_effective_config<T: Serialize>(dir: &Path, config: &T) -> Result<()> {
    let path = dir.join("effective_config.json");
    let json = serde_json::to_string_pretty(config).expect("serializable");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_forge(args: &ForgeArgs, file: &FileConfig, seed: Option<u64>, dir: Option<&Path>) -> Result<()> {
    let catalog = load_catalog(args.catalog.as_deref())?;
    let templates = load_templates(args.instruction_templates.as_deref())?;
    let verbalizer = load_verbalizer(args.verbalizer_templates.as_deref())?;
    let out = output_dir(dir, file)?;

    let mut cfg = file.forge.clone().unwrap_or_default();
    if let Some(seed) = seed.or(file.seed) {
        cfg.seed = seed;
    }
    if let Some(k) = args.likert_levels {
        cfg.likert_levels = k;
    }
    if let Some(t) = args.threshold {
        cfg.boolean_threshold = parse_threshold(t)?;
    }
    if let Some(gap) = args.min_gap {
        cfg.min_gap = gap;
    }
    if args.allow_nota {
        cfg.allow_nota = true;
    }
    if !args.train.is_empty() {
        cfg.split.train = args.train.clone();
    }
    if !args.test.is_empty() {
        cfg.split.test = args.test.clone();
    }
    for spec in &args.quota {
        let (task_type, count) = parse_pair(spec, "quota")?;
        let task_type = match task_type.as_str() {
            "scoring" => aspect_eval::domain::TaskType::Scoring,
            "comparison" => aspect_eval::domain::TaskType::Comparison,
            "ranking" => aspect_eval::domain::TaskType::Ranking,
            "boolean_qa" => aspect_eval::domain::TaskType::BooleanQA,
            other => return Err(Error::Usage(format!("unknown task type '{other}'"))),
        };
        let count = count
            .parse()
            .map_err(|_| Error::Usage(format!("invalid quota count '{count}'")))?;
        cfg.quotas.insert(task_type, count);
    }

    let mut schemas: BTreeMap<String, SourceSchemaConfig> = BTreeMap::new();
    for spec in &args.schema {
        let (name, path) = parse_pair(spec, "schema")?;
        require_path(Path::new(&path), "schema")?;
        schemas.insert(name, SourceSchemaConfig::load(path)?);
    }

    let mut sources = Vec::new();
    for spec in &args.data {
        let (name, path) = parse_pair(spec, "data")?;
        require_path(Path::new(&path), "dataset")?;
        let schema = schemas
            .get(&name)
            .ok_or_else(|| Error::Usage(format!("no --schema given for dataset '{name}'")))?;
        let records = load_rating_dataset(&path, schema, &catalog)?;
        sources.push(SourceDataset { name, records });
    }

    let collection = build_training_mix(&sources, &cfg, &catalog, &templates, &verbalizer)?;
    collection.write_to(&out)?;
    write_effective_config(&out, &cfg)?;
    for warning in &collection.manifest.warnings {
        log::warn!("{warning}");
    }
    println!(
        "forged {} stage-1 tasks, {} inference requests into {}",
        collection.manifest.stage1_total,
        collection.manifest.inference_total,
        out.display()
    );
    Ok(())
}

fn engine_config(
    args: &EvaluateArgs,
    file: &FileConfig,
    seed: Option<u64>,
) -> Result<EngineConfig> {
    let seed = seed.or(file.seed).unwrap_or(0);
    let mut cfg = EngineConfig {
        seed,
        ..EngineConfig::default()
    };
    if let Some(k) = args.k.or(file.k) {
        cfg.k = k;
    }
    if let Some(mode) = args.pool_mode.as_deref().or(file.pool_mode.as_deref()) {
        cfg.pool_mode = mode.parse()?;
    }
    if let Some(mode) = args
        .injection_mode
        .as_deref()
        .or(file.injection_mode.as_deref())
    {
        cfg.injection = parse_injection(mode, seed)?;
    }
    if let Some(t) = args.threshold.or(file.threshold) {
        cfg.threshold = parse_threshold(t)?;
    }
    if let Some(p) = args.parallelism.or(file.parallelism) {
        cfg.parallelism = p;
    }
    if let Some(policy) = args
        .failure_policy
        .as_deref()
        .or(file.failure_policy.as_deref())
    {
        cfg.failure_policy = match policy {
            "abort" => FailurePolicy::Abort,
            "skip" => FailurePolicy::Skip,
            other => {
                return Err(Error::Usage(format!(
                    "unknown failure policy '{other}' (expected abort, skip)"
                )))
            }
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_evaluate(
    args: &EvaluateArgs,
    file: &FileConfig,
    seed: Option<u64>,
    dir: Option<&Path>,
) -> Result<()> {
    let requests_path = args
        .requests
        .as_deref()
        .ok_or_else(|| Error::Usage("--requests is required".into()))?;
    require_path(requests_path, "requests")?;
    let backend_spec = args
        .backend
        .as_deref()
        .or(file.backend.as_deref())
        .ok_or_else(|| Error::Usage("--backend is required".into()))?;
    let auth_env = args.auth_env.clone().or(file.auth_env.clone());
    let kind = parse_backend(backend_spec, auth_env)?;
    let out = output_dir(dir, file)?;
    let cfg = engine_config(args, file, seed)?;

    let requests: Vec<EvalRequest> = read_jsonl(requests_path)?;
    if matches!(cfg.injection, InjectionMode::GroundTruth)
        && requests.iter().all(|r| r.ratings.is_empty())
    {
        return Err(Error::Validation(
            "ground-truth injection requires requests with ratings; none carry any".into(),
        ));
    }

    let catalog = load_catalog(args.catalog.as_deref())?;
    let templates = load_templates(args.instruction_templates.as_deref())?;
    let verbalizer = load_verbalizer(args.verbalizer_templates.as_deref())?;

    let backend = RecordingBackend::new(kind.build()?);
    let engine = Engine::new(backend, catalog, templates, verbalizer, cfg.clone())?;
    let outcome = engine.evaluate_batch(&requests)?;

    write_jsonl(out.join("results.jsonl"), &outcome.results)?;
    write_jsonl(out.join("traces.jsonl"), &outcome.traces)?;
    write_jsonl(out.join("item_errors.jsonl"), &outcome.errors)?;
    write_effective_config(&out, &cfg)?;
    if let Some(fixture) = &args.record_fixture {
        engine.backend.write_fixture(fixture)?;
    }
    println!(
        "evaluated {} items ({} failed) into {}",
        outcome.results.len(),
        outcome.errors.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SelectionRow {
    aspect_id: AspectId,
    similarity: f64,
    selected: bool,
}

fn cmd_select(args: &SelectArgs, file: &FileConfig, seed: Option<u64>) -> Result<()> {
    let catalog = load_catalog(args.catalog.as_deref())?;
    let target = catalog.require(&AspectId(args.aspect.clone()))?.clone();
    let backend_spec = args
        .backend
        .as_deref()
        .or(file.backend.as_deref())
        .unwrap_or("mock:0");
    let backend = parse_backend(backend_spec, args.auth_env.clone().or(file.auth_env.clone()))?
        .build()?;
    let k = args.k.or(file.k).unwrap_or(1);
    let pool_mode: PoolMode = args
        .pool_mode
        .as_deref()
        .or(file.pool_mode.as_deref())
        .unwrap_or("all")
        .parse()?;

    let pool: Vec<_> = catalog
        .iter()
        .filter(|a| a.nlg_task == target.nlg_task && a.id != target.id)
        .filter(|a| match pool_mode {
            PoolMode::Seen => a.seen,
            PoolMode::Unseen => !a.seen,
            _ => true,
        })
        .cloned()
        .collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(
        seed.or(file.seed).unwrap_or(0),
    );
    let (ranking, selected) = if pool_mode == PoolMode::Random {
        let picked = select_top_k(&target, &pool, k, pool_mode, &[], &mut rng)?;
        (Vec::new(), picked)
    } else {
        let cache = EmbeddingCache::new();
        let mut with_target = pool.clone();
        with_target.push(target.clone());
        let embeddings = embed_definitions(&with_target, &backend, &cache)?;
        let ranking = similarity_ranking(&target, &pool, &embeddings)?;
        let picked = select_top_k(&target, &pool, k, pool_mode, &embeddings, &mut rng)?;
        (ranking, picked)
    };

    let selected_ids: Vec<&AspectId> = selected.iter().map(|a| &a.id).collect();
    if ranking.is_empty() {
        for a in &selected {
            println!(
                "{}",
                serde_json::json!({ "aspect_id": a.id, "selected": true })
            );
        }
    } else {
        for (aspect_id, similarity) in ranking {
            let row = SelectionRow {
                selected: selected_ids.contains(&&aspect_id),
                aspect_id,
                similarity,
            };
            println!("{}", serde_json::to_string(&row).expect("serializable"));
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportRow {
    aspect: String,
    metric: Metric,
    mode: AggregationMode,
    value: Option<f64>,
    n: usize,
    groups_used: usize,
    groups_skipped: usize,
}

fn parse_metrics(spec: &str) -> Result<Vec<Metric>> {
    match spec {
        "pearson" => Ok(vec![Metric::Pearson]),
        "spearman" => Ok(vec![Metric::Spearman]),
        "kendall" => Ok(vec![Metric::KendallTauB]),
        "all" => Ok(Metric::ALL.to_vec()),
        other => Err(Error::Usage(format!(
            "unknown metric '{other}' (expected pearson, spearman, kendall, all)"
        ))),
    }
}

fn parse_modes(spec: &str) -> Result<Vec<AggregationMode>> {
    match spec {
        "pooled" => Ok(vec![AggregationMode::Pooled]),
        "grouped" => Ok(vec![AggregationMode::GroupedMean]),
        "all" => Ok(AggregationMode::ALL.to_vec()),
        other => Err(Error::Usage(format!(
            "unknown mode '{other}' (expected pooled, grouped, all)"
        ))),
    }
}

fn cmd_metaeval(args: &MetaevalArgs, file: &FileConfig, dir: Option<&Path>) -> Result<()> {
    let results_path = args
        .results
        .as_deref()
        .ok_or_else(|| Error::Usage("--results is required".into()))?;
    let human_path = args
        .human
        .as_deref()
        .ok_or_else(|| Error::Usage("--human is required".into()))?;
    require_path(results_path, "results")?;
    require_path(human_path, "human ratings")?;
    let out = output_dir(dir, file)?;
    let metrics = parse_metrics(args.metric.as_deref().or(file.metric.as_deref()).unwrap_or("all"))?;
    let modes = parse_modes(args.mode.as_deref().or(file.mode.as_deref()).unwrap_or("pooled"))?;

    let results: Vec<aspect_eval::engine::EvalResult> = read_jsonl(results_path)?;
    let human: Vec<HumanRatingRow> = read_jsonl(human_path)?;

    let by_id: BTreeMap<&str, &aspect_eval::engine::EvalResult> =
        results.iter().map(|r| (r.id.as_str(), r)).collect();
    let human_ids: std::collections::BTreeSet<&str> =
        human.iter().map(|h| h.id.as_str()).collect();
    let missing_results: Vec<&str> = human
        .iter()
        .map(|h| h.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let missing_human: Vec<&str> = results
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !human_ids.contains(id))
        .collect();
    if !missing_results.is_empty() || !missing_human.is_empty() {
        return Err(Error::Validation(format!(
            "id mismatch between files; without results: [{}]; without human ratings: [{}]",
            missing_results.join(", "),
            missing_human.join(", ")
        )));
    }

    // per-aspect paired series, human-file order
    let mut per_aspect: BTreeMap<String, (Vec<String>, Vec<f64>, Vec<f64>, Vec<Option<String>>)> =
        BTreeMap::new();
    for row in &human {
        let result = by_id[row.id.as_str()];
        let entry = per_aspect.entry(row.aspect_id.0.clone()).or_default();
        entry.0.push(row.id.clone());
        entry.1.push(result.score.value());
        entry.2.push(row.human);
        entry.3.push(row.context_id.clone());
    }

    let mut rows = Vec::new();
    for (aspect, (ids, predicted, human_scores, groups)) in per_aspect {
        if ids.len() < 2 {
            log::warn!("aspect '{aspect}' has fewer than 2 paired items; skipped");
            continue;
        }
        let mut series = PairedSeries::new(ids, predicted, human_scores)?;
        let group_keys: Option<Vec<String>> =
            groups.iter().cloned().collect::<Option<Vec<_>>>();
        if let Some(keys) = group_keys {
            series = series.with_groups(keys)?;
        }
        for &metric in &metrics {
            for &mode in &modes {
                let report = segment_correlation(&series, metric, mode)?;
                rows.push(ReportRow {
                    aspect: aspect.clone(),
                    metric,
                    mode,
                    value: report.value,
                    n: report.n,
                    groups_used: report.groups_used,
                    groups_skipped: report.groups_skipped,
                });
            }
        }
    }

    write_jsonl(out.join("correlation_report.jsonl"), &rows)?;
    let mut summary = String::from("aspect\tmetric\tmode\tvalue\tn\n");
    for row in &rows {
        let value = row
            .value
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "undefined".to_string());
        summary.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            row.aspect, row.metric, row.mode, value, row.n
        ));
    }
    let summary_path = out.join("summary.tsv");
    std::fs::write(&summary_path, &summary)
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;
    print!("{summary}");
    Ok(())
}

fn cmd_mock_serve(args: &MockServeArgs, file: &FileConfig) -> Result<()> {
    let spec = args
        .backend
        .as_deref()
        .or(file.backend.as_deref())
        .unwrap_or("mock:0");
    let kind = parse_backend(spec, None)?;
    if matches!(kind, BackendKind::Wire { .. }) {
        return Err(Error::Usage("mock-serve cannot front a wire backend".into()));
    }
    let addr: SocketAddr = args
        .addr
        .parse()
        .map_err(|_| Error::Usage(format!("invalid bind address '{}'", args.addr)))?;
    let backend: Arc<dyn Backend> = Arc::from(kind.build()?);
    aspect_eval::backend::server::serve(addr, backend)
}

fn run(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let level = cli
        .log_level
        .as_deref()
        .or(file.log_level.as_deref())
        .unwrap_or("warn");
    let _ = env_logger::Builder::new().parse_filters(level).try_init();
    let seed = cli.seed;
    let dir = cli.output_dir.as_deref();
    match &cli.command {
        Command::Forge(args) => cmd_forge(args, &file, seed, dir),
        Command::Evaluate(args) => cmd_evaluate(args, &file, seed, dir),
        Command::Select(args) => cmd_select(args, &file, seed),
        Command::Metaeval(args) => cmd_metaeval(args, &file, dir),
        Command::MockServe(args) => cmd_mock_serve(args, &file),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help/version exit cleanly; everything else is a usage error
            if err.use_stderr() {
                eprint!("{err}");
                std::process::exit(1);
            }
            print!("{err}");
            std::process::exit(0);
        }
    };
    if let Err(err) = run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
