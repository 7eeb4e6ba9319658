//! Boolean-QA scoring engine.
//!
//! For each request the engine selects top-k auxiliary aspects, obtains a
//! Yes/No verdict for each (from the backend, from supplied ground truth,
//! or from a seeded coin), verbalizes those verdicts, appends them to the
//! prompt, and scores the target aspect as P(Yes) / (P(Yes) + P(No)).
//! Every run emits a trace that an independent verifier can replay.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{Backend, ChoiceProbRequest};
use crate::domain::{Aspect, AspectCatalog, AspectId, EvalRequest, UnitScore};
use crate::error::{Error, Result};
use crate::forge::{assemble_instruction, TemplateSet, AUXILIARY_SLOT};
use crate::selector::{
    embed_definitions, select_top_k, similarity_ranking, AspectEmbedding, EmbeddingCache, PoolMode,
};
use crate::verbalizer::TemplateCatalog;

/// Where auxiliary verdicts come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InjectionMode {
    /// Score each auxiliary through the backend and binarize at the
    /// verbalizer threshold.
    Predicted,
    /// Verbalize the ground-truth rating carried by the request.
    GroundTruth,
    /// Verbalize a fair coin drawn from a seeded generator.
    RandomResults { seed: u64 },
}

impl InjectionMode {
    pub fn label(&self) -> &'static str {
        match self {
            InjectionMode::Predicted => "predicted",
            InjectionMode::GroundTruth => "ground_truth",
            InjectionMode::RandomResults { .. } => "random",
        }
    }
}

impl std::fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// First item error fails the whole batch.
    Abort,
    /// Item errors are recorded with their ids; the rest proceed.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub k: usize,
    pub pool_mode: PoolMode,
    pub injection: InjectionMode,
    pub threshold: UnitScore,
    pub seed: u64,
    pub parallelism: usize,
    pub failure_policy: FailurePolicy,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            k: 1,
            pool_mode: PoolMode::All,
            injection: InjectionMode::Predicted,
            threshold: UnitScore::new(crate::verbalizer::DEFAULT_THRESHOLD).unwrap(),
            seed: 0,
            parallelism: 1,
            failure_policy: FailurePolicy::Abort,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.parallelism == 0 {
            return Err(Error::Validation("parallelism must be >= 1".into()));
        }
        Ok(())
    }
}

/// One auxiliary verdict as it entered the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryTrace {
    pub aspect_id: AspectId,
    /// Cosine similarity to the target; absent under a random pool.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    /// Raw (P(Yes), P(No)); absent for injected verdicts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probs: Option<(f64, f64)>,
    pub score: UnitScore,
    pub verbalization: String,
}

/// Complete record of one evaluation, sufficient to replay the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationTrace {
    pub id: String,
    pub target_aspect: AspectId,
    pub k: usize,
    pub pool_mode: PoolMode,
    pub injection: InjectionMode,
    pub threshold: UnitScore,
    /// Similarity of every pool candidate, descending; empty when
    /// selection did not use embeddings.
    pub pool_similarities: Vec<(AspectId, f64)>,
    pub auxiliaries: Vec<AuxiliaryTrace>,
    pub target_probs: (f64, f64),
    pub score: UnitScore,
}

/// One line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub id: String,
    pub score: UnitScore,
    pub k: usize,
    pub mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub id: String,
    pub message: String,
    /// True when the failure came from the model backend rather than the
    /// input data; decides the process exit class under the abort policy.
    pub backend: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub results: Vec<EvalResult>,
    pub traces: Vec<EvaluationTrace>,
    pub errors: Vec<ItemError>,
}

fn combine(numerator: f64, denominator_extra: f64) -> f64 {
    numerator / (numerator + denominator_extra)
}

fn score_from_probs(p_yes: f64, p_no: f64) -> Result<UnitScore> {
    if p_yes + p_no == 0.0 {
        return Err(Error::Backend(
            "P(Yes) + P(No) is zero; refusing to fabricate a score".into(),
        ));
    }
    UnitScore::new(combine(p_yes, p_no))
}

/// Boolean-QA prompt for scoring `aspect` on `output` given `sources`,
/// optionally enriched with auxiliary verbalizations.
pub fn boolean_prompt(
    output: &str,
    sources: &[String],
    aspect: &Aspect,
    templates: &TemplateSet,
    auxiliary: Option<&str>,
) -> Result<String> {
    let template = templates.get(crate::domain::TaskType::BooleanQA)?;
    let mut payload = BTreeMap::from([
        ("source".to_string(), sources.join("\n")),
        ("output".to_string(), output.to_string()),
    ]);
    if let Some(aux) = auxiliary {
        payload.insert(AUXILIARY_SLOT.to_string(), aux.to_string());
    }
    assemble_instruction(template, aspect, &payload, &BTreeMap::new())
}

// Prompt-keyed cache of raw probabilities. The OnceLock per key makes each
// distinct prompt hit the backend exactly once even under parallelism.
type ProbCache = Mutex<HashMap<String, Arc<OnceLock<std::result::Result<(f64, f64), String>>>>>;

fn cached_yes_no<B: Backend>(
    backend: &B,
    prompt: &str,
    cache: Option<&ProbCache>,
) -> Result<(f64, f64)> {
    let fetch = || -> std::result::Result<(f64, f64), String> {
        let req = ChoiceProbRequest::yes_no(prompt);
        let resp = backend.choice_prob(&req).map_err(|e| e.to_string())?;
        Ok((resp.probs[0], resp.probs[1]))
    };
    let outcome = match cache {
        None => fetch(),
        Some(cache) => {
            let cell = {
                let mut map = cache.lock().unwrap();
                map.entry(prompt.to_string()).or_default().clone()
            };
            cell.get_or_init(fetch).clone()
        }
    };
    outcome.map_err(Error::Backend)
}

/// Score one aspect on one text: c = P(Yes) / (P(Yes) + P(No)).
pub fn score_boolean<B: Backend>(
    output: &str,
    sources: &[String],
    aspect: &Aspect,
    backend: &B,
    templates: &TemplateSet,
) -> Result<UnitScore> {
    let prompt = boolean_prompt(output, sources, aspect, templates, None)?;
    let (p_yes, p_no) = cached_yes_no(backend, &prompt, None)?;
    score_from_probs(p_yes, p_no)
}

/// Seed a per-item generator from (seed, item id) so batch order and
/// parallelism cannot change any draw.
fn item_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b"\0");
    hasher.update(id.as_bytes());
    let digest = hasher.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

pub struct Engine<B: Backend> {
    pub backend: B,
    pub catalog: AspectCatalog,
    pub templates: TemplateSet,
    pub verbalizer: TemplateCatalog,
    pub config: EngineConfig,
}

impl<B: Backend> Engine<B> {
    pub fn new(
        backend: B,
        catalog: AspectCatalog,
        templates: TemplateSet,
        verbalizer: TemplateCatalog,
        config: EngineConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Engine {
            backend,
            catalog,
            templates,
            verbalizer,
            config,
        })
    }

    /// Candidate auxiliaries for a target: catalog aspects of the same NLG
    /// task family. Pool-mode filtering happens at selection time.
    fn pool_for(&self, target: &Aspect) -> Vec<Aspect> {
        self.catalog
            .iter()
            .filter(|a| a.nlg_task == target.nlg_task && a.id != target.id)
            .cloned()
            .collect()
    }

    fn needs_embeddings(&self) -> bool {
        self.config.k > 0 && self.config.pool_mode != PoolMode::Random
    }

    /// Embed every catalog definition once per run. No-op (empty) when the
    /// run cannot use embeddings.
    pub fn prepare_embeddings(&self, cache: &EmbeddingCache) -> Result<Vec<AspectEmbedding>> {
        if !self.needs_embeddings() {
            return Ok(Vec::new());
        }
        let aspects: Vec<Aspect> = self.catalog.iter().cloned().collect();
        embed_definitions(&aspects, &self.backend, cache)
    }

    fn auxiliary_verdict(
        &self,
        req: &EvalRequest,
        aspect: &Aspect,
        cache: Option<&ProbCache>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(UnitScore, Option<(f64, f64)>)> {
        match self.config.injection {
            InjectionMode::Predicted => {
                let prompt =
                    boolean_prompt(&req.output, &req.sources, aspect, &self.templates, None)?;
                let (p_yes, p_no) = cached_yes_no(&self.backend, &prompt, cache)?;
                Ok((score_from_probs(p_yes, p_no)?, Some((p_yes, p_no))))
            }
            InjectionMode::GroundTruth => {
                let rating = req.ratings.get(&aspect.id).copied().ok_or_else(|| {
                    Error::Validation(format!(
                        "request '{}' has no ground-truth rating for auxiliary '{}'",
                        req.id, aspect.id
                    ))
                })?;
                Ok((rating, None))
            }
            InjectionMode::RandomResults { .. } => {
                let score = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                Ok((UnitScore::new(score).unwrap(), None))
            }
        }
    }

    /// Run the full procedure for one request. `embeddings` comes from
    /// [`Engine::prepare_embeddings`]; `cache` deduplicates backend prompts
    /// within a batch.
    pub fn evaluate_one(
        &self,
        req: &EvalRequest,
        embeddings: &[AspectEmbedding],
        cache: Option<&ProbCache>,
    ) -> Result<(EvalResult, EvaluationTrace)> {
        let target = self.catalog.require(&req.target_aspect)?.clone();
        let pool = self.pool_for(&target);
        let cfg = &self.config;

        let coin_seed = match cfg.injection {
            InjectionMode::RandomResults { seed } => seed,
            _ => cfg.seed,
        };
        let mut rng = item_rng(cfg.seed, &req.id);
        let mut coin_rng = item_rng(coin_seed, &req.id);

        let (selected, pool_similarities) = if cfg.k == 0 {
            (Vec::new(), Vec::new())
        } else if cfg.pool_mode == PoolMode::Random {
            let picked = select_top_k(&target, &pool, cfg.k, cfg.pool_mode, &[], &mut rng)?;
            (picked, Vec::new())
        } else {
            let filtered: Vec<Aspect> = pool
                .iter()
                .filter(|a| match cfg.pool_mode {
                    PoolMode::Seen => a.seen,
                    PoolMode::Unseen => !a.seen,
                    _ => true,
                })
                .cloned()
                .collect();
            let picked =
                select_top_k(&target, &filtered, cfg.k, cfg.pool_mode, embeddings, &mut rng)?;
            let sims = similarity_ranking(&target, &filtered, embeddings)?;
            (picked, sims)
        };

        let sim_by_id: HashMap<&AspectId, f64> =
            pool_similarities.iter().map(|(id, s)| (id, *s)).collect();

        let mut auxiliaries = Vec::with_capacity(selected.len());
        for aspect in &selected {
            let (score, probs) = self.auxiliary_verdict(req, aspect, cache, &mut coin_rng)?;
            let verbalization = self
                .verbalizer
                .verbalize(&aspect.id, score, cfg.threshold)?;
            auxiliaries.push(AuxiliaryTrace {
                aspect_id: aspect.id.clone(),
                similarity: sim_by_id.get(&aspect.id).copied(),
                probs,
                score,
                verbalization,
            });
        }

        let enriched = if auxiliaries.is_empty() {
            None
        } else {
            Some(
                auxiliaries
                    .iter()
                    .map(|a| a.verbalization.as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
            )
        };
        let prompt = boolean_prompt(
            &req.output,
            &req.sources,
            &target,
            &self.templates,
            enriched.as_deref(),
        )?;
        let (p_yes, p_no) = cached_yes_no(&self.backend, &prompt, cache)?;
        let score = score_from_probs(p_yes, p_no)?;

        let result = EvalResult {
            id: req.id.clone(),
            score,
            k: cfg.k,
            mode: cfg.injection.label().to_string(),
        };
        let trace = EvaluationTrace {
            id: req.id.clone(),
            target_aspect: target.id,
            k: cfg.k,
            pool_mode: cfg.pool_mode,
            injection: cfg.injection,
            threshold: cfg.threshold,
            pool_similarities,
            auxiliaries,
            target_probs: (p_yes, p_no),
            score,
        };
        Ok((result, trace))
    }

    /// Evaluate a batch. Output order is input order regardless of
    /// parallelism; distinct prompts hit the backend once per run.
    pub fn evaluate_batch(&self, requests: &[EvalRequest]) -> Result<BatchOutcome> {
        let embed_cache = EmbeddingCache::new();
        let embeddings = self.prepare_embeddings(&embed_cache)?;
        let prob_cache: ProbCache = Mutex::new(HashMap::new());

        let slots: Vec<Mutex<Option<std::result::Result<(EvalResult, EvaluationTrace), ItemError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.parallelism.min(requests.len().max(1));

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= requests.len() {
                        break;
                    }
                    let outcome = self
                        .evaluate_one(&requests[i], &embeddings, Some(&prob_cache))
                        .map_err(|e| ItemError {
                            id: requests[i].id.clone(),
                            backend: matches!(e, Error::Backend(_) | Error::FixtureMiss(_)),
                            message: e.to_string(),
                        });
                    *slots[i].lock().unwrap() = Some(outcome);
                });
            }
        });

        let mut results = Vec::new();
        let mut traces = Vec::new();
        let mut errors = Vec::new();
        for slot in slots {
            match slot.into_inner().unwrap().expect("every slot is filled") {
                Ok((result, trace)) => {
                    results.push(result);
                    traces.push(trace);
                }
                Err(err) => match self.config.failure_policy {
                    FailurePolicy::Abort => {
                        let message = format!("item '{}' failed: {}", err.id, err.message);
                        return Err(if err.backend {
                            Error::Backend(message)
                        } else {
                            Error::Validation(message)
                        });
                    }
                    FailurePolicy::Skip => errors.push(err),
                },
            }
        }
        Ok(BatchOutcome {
            results,
            traces,
            errors,
        })
    }
}

/// Independent consistency check of a trace against the scoring formula,
/// the top-k selection rule, and the verbalizer threshold rule.
pub fn verify_trace(trace: &EvaluationTrace, verbalizer: &TemplateCatalog) -> Result<()> {
    let fail = |msg: String| Err(Error::Validation(format!("trace '{}': {msg}", trace.id)));

    if trace.auxiliaries.len() > trace.k {
        return fail(format!(
            "{} auxiliaries exceed k = {}",
            trace.auxiliaries.len(),
            trace.k
        ));
    }
    let (p_yes, p_no) = trace.target_probs;
    if p_yes + p_no == 0.0 {
        return fail("target probabilities sum to zero".into());
    }
    if (trace.score.value() - combine(p_yes, p_no)).abs() > 1e-12 {
        return fail(format!(
            "score {} disagrees with target probabilities ({p_yes}, {p_no})",
            trace.score
        ));
    }

    // re-derive the selected set from the recorded similarities
    if !trace.pool_similarities.is_empty() {
        let mut ranked = trace.pool_similarities.clone();
        ranked.sort_by(|(ida, sa), (idb, sb)| {
            sb.partial_cmp(sa).unwrap().then_with(|| ida.cmp(idb))
        });
        let expected: Vec<&AspectId> = ranked.iter().take(trace.k).map(|(id, _)| id).collect();
        let actual: Vec<&AspectId> = trace.auxiliaries.iter().map(|a| &a.aspect_id).collect();
        if expected[..actual.len()] != actual[..] || actual.len() != expected.len() {
            return fail(format!("selected set {actual:?} is not the top-k {expected:?}"));
        }
    }

    for aux in &trace.auxiliaries {
        if let Some((y, n)) = aux.probs {
            if y + n == 0.0 {
                return fail(format!("auxiliary '{}' probabilities sum to zero", aux.aspect_id));
            }
            if (aux.score.value() - combine(y, n)).abs() > 1e-12 {
                return fail(format!(
                    "auxiliary '{}' score disagrees with its probabilities",
                    aux.aspect_id
                ));
            }
        }
        let expected =
            verbalizer.verbalize(&aux.aspect_id, aux.score, trace.threshold)?;
        if expected != aux.verbalization {
            return fail(format!(
                "auxiliary '{}' verbalization '{}' should be '{expected}'",
                aux.aspect_id, aux.verbalization
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ChoiceProbResponse, MockBackend, RecordingBackend};
    use crate::domain::NlgTask;

    /// Scripted test double: choice probabilities keyed by a substring of
    /// the prompt, embeddings keyed by a substring of the definition.
    struct ScriptedBackend {
        probs: Vec<(&'static str, (f64, f64))>,
        vectors: Vec<(&'static str, Vec<f64>)>,
    }

    impl Backend for ScriptedBackend {
        fn provider_id(&self) -> String {
            "scripted".into()
        }

        fn choice_prob(&self, req: &ChoiceProbRequest) -> Result<ChoiceProbResponse> {
            for (needle, (y, n)) in &self.probs {
                if req.input.contains(needle) {
                    return Ok(ChoiceProbResponse { probs: vec![*y, *n] });
                }
            }
            Err(Error::Backend(format!("unscripted prompt: {}", req.input)))
        }

        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            texts
                .iter()
                .map(|t| {
                    self.vectors
                        .iter()
                        .find(|(needle, _)| t.contains(needle))
                        .map(|(_, v)| v.clone())
                        .ok_or_else(|| Error::Backend(format!("unscripted text: {t}")))
                })
                .collect()
        }
    }

    fn aspect(name: &str, seen: bool) -> Aspect {
        Aspect {
            id: AspectId::new(name, NlgTask::DialogueTurn),
            name: name.to_string(),
            nlg_task: NlgTask::DialogueTurn,
            definition: format!("{name} definition text"),
            seen,
        }
    }

    fn catalog() -> AspectCatalog {
        AspectCatalog::new(vec![
            aspect("coherence", true),
            aspect("naturalness", true),
            aspect("groundedness", true),
        ])
        .unwrap()
    }

    fn request(id: &str) -> EvalRequest {
        EvalRequest {
            id: id.into(),
            output: "Sure, happy to help with that.".into(),
            sources: vec!["Can you help me?".into()],
            target_aspect: AspectId::new("coherence", NlgTask::DialogueTurn),
            context_id: None,
            ratings: BTreeMap::new(),
        }
    }

    fn engine<B: Backend>(backend: B, config: EngineConfig) -> Engine<B> {
        Engine::new(
            backend,
            catalog(),
            TemplateSet::default_set(),
            TemplateCatalog::default_catalog(),
            config,
        )
        .unwrap()
    }

    /// Backend scripted for the worked example: the naturalness auxiliary
    /// gets (0.8, 0.2) and the enriched coherence target gets (0.6, 0.2);
    /// embeddings rank naturalness above groundedness.
    fn worked_example_backend() -> ScriptedBackend {
        ScriptedBackend {
            probs: vec![
                ("(naturalness)", (0.8, 0.2)),
                ("(coherence)", (0.6, 0.2)),
            ],
            vectors: vec![
                ("coherence", vec![1.0, 0.0]),
                ("naturalness", vec![0.9, 0.1]),
                ("groundedness", vec![0.0, 1.0]),
            ],
        }
    }

    #[test]
    fn score_formula_cases() {
        for (y, n, expected) in [(0.3, 0.3, 0.5), (0.9, 0.1, 0.9), (0.2, 0.6, 0.25)] {
            assert!((score_from_probs(y, n).unwrap().value() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn both_zero_is_a_hard_error() {
        assert!(matches!(score_from_probs(0.0, 0.0), Err(Error::Backend(_))));
    }

    #[test]
    fn subnormal_but_positive_sum_is_accepted() {
        let s = score_from_probs(1e-300, 3e-300).unwrap();
        assert!((s.value() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_p_yes_for_fixed_p_no() {
        let mut last = -1.0;
        for i in 1..=20 {
            let s = score_from_probs(i as f64 / 20.0, 0.3).unwrap().value();
            assert!(s > last);
            last = s;
        }
    }

    #[test]
    fn worked_example_end_to_end() {
        let cfg = EngineConfig::default();
        let eng = engine(worked_example_backend(), cfg);
        let req = request("r1");
        let cache = EmbeddingCache::new();
        let embeddings = eng.prepare_embeddings(&cache).unwrap();
        let (result, trace) = eng.evaluate_one(&req, &embeddings, None).unwrap();

        assert_eq!(trace.auxiliaries.len(), 1);
        let aux = &trace.auxiliaries[0];
        assert_eq!(aux.aspect_id.as_str(), "naturalness@dialogue-turn");
        assert!((aux.score.value() - 0.8).abs() < 1e-12);
        assert_eq!(aux.verbalization, "The response is natural.");
        assert!((result.score.value() - 0.75).abs() < 1e-12);
        assert_eq!(trace.target_probs, (0.6, 0.2));
        verify_trace(&trace, &eng.verbalizer).unwrap();
    }

    #[test]
    fn enriched_prompt_carries_the_verbalization() {
        let target = catalog()
            .require(&AspectId::new("coherence", NlgTask::DialogueTurn))
            .unwrap()
            .clone();
        let prompt = boolean_prompt(
            "out",
            &["src".into()],
            &target,
            &TemplateSet::default_set(),
            Some("The response is natural."),
        )
        .unwrap();
        assert!(prompt.contains("Auxiliary evaluations:\nThe response is natural."));
    }

    #[test]
    fn k_zero_is_bit_identical_to_bare_score() {
        let cfg = EngineConfig {
            k: 0,
            ..EngineConfig::default()
        };
        let eng = engine(MockBackend::new(5), cfg);
        let req = request("r1");
        let (result, trace) = eng.evaluate_one(&req, &[], None).unwrap();
        let target = eng.catalog.require(&req.target_aspect).unwrap();
        let bare = score_boolean(
            &req.output,
            &req.sources,
            target,
            &eng.backend,
            &eng.templates,
        )
        .unwrap();
        assert_eq!(result.score.value().to_bits(), bare.value().to_bits());
        assert!(trace.auxiliaries.is_empty());
        assert!(trace.pool_similarities.is_empty());
    }

    #[test]
    fn ground_truth_mode_verbalizes_the_rating_without_backend_calls() {
        let cfg = EngineConfig {
            injection: InjectionMode::GroundTruth,
            ..EngineConfig::default()
        };
        let backend = RecordingBackend::new(worked_example_backend());
        let eng = engine(backend, cfg);
        let mut req = request("r1");
        req.ratings.insert(
            AspectId::new("naturalness", NlgTask::DialogueTurn),
            UnitScore::new(0.2).unwrap(),
        );
        let cache = EmbeddingCache::new();
        let embeddings = eng.prepare_embeddings(&cache).unwrap();
        let (_, trace) = eng.evaluate_one(&req, &embeddings, None).unwrap();
        assert_eq!(trace.auxiliaries[0].verbalization, "The response is unnatural.");
        assert_eq!(trace.auxiliaries[0].probs, None);
        // only the target was scored through the backend
        assert_eq!(eng.backend.choice_prob_count(), 1);
        verify_trace(&trace, &eng.verbalizer).unwrap();
    }

    #[test]
    fn ground_truth_mode_missing_rating_errors() {
        let cfg = EngineConfig {
            injection: InjectionMode::GroundTruth,
            ..EngineConfig::default()
        };
        let eng = engine(worked_example_backend(), cfg);
        let cache = EmbeddingCache::new();
        let embeddings = eng.prepare_embeddings(&cache).unwrap();
        let err = eng.evaluate_one(&request("r1"), &embeddings, None).unwrap_err();
        assert!(err.to_string().contains("naturalness"));
    }

    #[test]
    fn random_results_mode_is_deterministic_and_backend_free_for_auxiliaries() {
        let cfg = EngineConfig {
            injection: InjectionMode::RandomResults { seed: 11 },
            ..EngineConfig::default()
        };
        let backend = RecordingBackend::new(worked_example_backend());
        let eng = engine(backend, cfg.clone());
        let cache = EmbeddingCache::new();
        let embeddings = eng.prepare_embeddings(&cache).unwrap();
        let (_, first) = eng.evaluate_one(&request("r1"), &embeddings, None).unwrap();
        assert_eq!(eng.backend.choice_prob_count(), 1);
        let (_, second) = eng.evaluate_one(&request("r1"), &embeddings, None).unwrap();
        assert_eq!(first, second);
        verify_trace(&first, &eng.verbalizer).unwrap();
    }

    #[test]
    fn batch_preserves_input_order_and_caches_duplicate_prompts() {
        let cfg = EngineConfig::default();
        let backend = RecordingBackend::new(worked_example_backend());
        let eng = engine(backend, cfg);
        // r1 and r2 are identical texts; r3 differs only in id
        let reqs = vec![request("r1"), request("r2"), request("r3")];
        let outcome = eng.evaluate_batch(&reqs).unwrap();
        assert_eq!(
            outcome.results.iter().map(|r| r.id.clone()).collect::<Vec<_>>(),
            vec!["r1", "r2", "r3"]
        );
        // one auxiliary prompt + one enriched target prompt, each sent once
        assert_eq!(eng.backend.choice_prob_count(), 2);
    }

    #[test]
    fn skip_mode_records_per_item_errors() {
        let cfg = EngineConfig {
            failure_policy: FailurePolicy::Skip,
            ..EngineConfig::default()
        };
        let eng = engine(worked_example_backend(), cfg);
        let mut bad = request("bad");
        bad.target_aspect = AspectId("missing@dialogue-turn".into());
        let reqs = vec![request("r1"), bad, request("r3")];
        let outcome = eng.evaluate_batch(&reqs).unwrap();
        assert_eq!(outcome.results.len(), 2);
        assert_eq!(outcome.errors.len(), 1);
        assert_eq!(outcome.errors[0].id, "bad");
    }

    #[test]
    fn abort_mode_fails_the_batch() {
        let eng = engine(worked_example_backend(), EngineConfig::default());
        let mut bad = request("bad");
        bad.target_aspect = AspectId("missing@dialogue-turn".into());
        assert!(eng.evaluate_batch(&[request("r1"), bad]).is_err());
    }

    #[test]
    fn parallelism_does_not_change_output() {
        let serial = engine(MockBackend::new(3), EngineConfig::default());
        let reqs: Vec<EvalRequest> = (0..12)
            .map(|i| {
                let mut r = request(&format!("r{i}"));
                r.output = format!("candidate output number {i}");
                r
            })
            .collect();
        let base = serial.evaluate_batch(&reqs).unwrap();
        let parallel = engine(
            MockBackend::new(3),
            EngineConfig {
                parallelism: 8,
                ..EngineConfig::default()
            },
        );
        let out = parallel.evaluate_batch(&reqs).unwrap();
        assert_eq!(base.results, out.results);
        assert_eq!(base.traces, out.traces);
    }

    #[test]
    fn trace_verifier_rejects_tampering() {
        let eng = engine(worked_example_backend(), EngineConfig::default());
        let cache = EmbeddingCache::new();
        let embeddings = eng.prepare_embeddings(&cache).unwrap();
        let (_, trace) = eng.evaluate_one(&request("r1"), &embeddings, None).unwrap();

        let mut wrong_score = trace.clone();
        wrong_score.score = UnitScore::new(0.1).unwrap();
        assert!(verify_trace(&wrong_score, &eng.verbalizer).is_err());

        let mut wrong_selection = trace.clone();
        wrong_selection.auxiliaries[0].aspect_id =
            AspectId::new("groundedness", NlgTask::DialogueTurn);
        assert!(verify_trace(&wrong_selection, &eng.verbalizer).is_err());

        let mut wrong_verbalization = trace;
        wrong_verbalization.auxiliaries[0].verbalization = "The response is unnatural.".into();
        assert!(verify_trace(&wrong_verbalization, &eng.verbalizer).is_err());
    }

    #[test]
    fn seen_pool_mode_restricts_candidates() {
        let mut aspects = vec![
            aspect("coherence", true),
            aspect("naturalness", false),
            aspect("groundedness", true),
        ];
        aspects[2].definition = "groundedness definition text".into();
        let cat = AspectCatalog::new(aspects).unwrap();
        let cfg = EngineConfig {
            pool_mode: PoolMode::Seen,
            ..EngineConfig::default()
        };
        let eng = Engine::new(
            worked_example_backend(),
            cat,
            TemplateSet::default_set(),
            TemplateCatalog::default_catalog(),
            cfg,
        )
        .unwrap();
        let cache = EmbeddingCache::new();
        let embeddings = eng.prepare_embeddings(&cache).unwrap();
        // naturalness is unseen here, so groundedness must be picked even
        // though its similarity is lower — but its prompt is unscripted,
        // which is fine because GroundTruth injection never queries it
        let eng = Engine {
            config: EngineConfig {
                injection: InjectionMode::GroundTruth,
                pool_mode: PoolMode::Seen,
                ..EngineConfig::default()
            },
            ..eng
        };
        let mut req = request("r1");
        req.ratings.insert(
            AspectId::new("groundedness", NlgTask::DialogueTurn),
            UnitScore::new(0.9).unwrap(),
        );
        let (_, trace) = eng.evaluate_one(&req, &embeddings, None).unwrap();
        assert_eq!(
            trace.auxiliaries[0].aspect_id.as_str(),
            "groundedness@dialogue-turn"
        );
    }
}
