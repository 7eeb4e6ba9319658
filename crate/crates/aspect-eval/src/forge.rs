//! Task forging: derive the four evaluation task forms from human-rating
//! data, assemble unified instructions, and produce stage-1 and
//! auxiliary-enriched stage-2 training files plus inference request files.
//!
//! Derivation rules:
//! - Scoring bins the unit score with `floor(y * K) + 1`, the `y = 1`
//!   endpoint assigned to `K` (equal-width bins).
//! - Comparison pairs with tied scores are skipped unless NOTA is enabled;
//!   pairs closer than `min_gap` are skipped.
//! - Ranking triples require pairwise-distinct scores.
//! - Boolean QA labels Yes exactly when `score > threshold`.
//!
//! Candidate presentation order is shuffled by the seeded rng so label
//! positions are uniform; reruns with the same seed are byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{
    Aspect, AspectCatalog, AspectId, CandidateGroup, EvalRequest, HumanRatingRow, InstructionTask,
    Label, RatingRecord, Stage, TaskType, UnitScore,
};
use crate::error::{Error, Result};
use crate::fileio::{read_jsonl, write_jsonl};
use crate::ingest::group_by_context;
use crate::verbalizer::TemplateCatalog;

/// Instruction layout for one task type: description, protocol, and the
/// named payload slots the rendered record must fill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionTemplate {
    pub task_type: TaskType,
    pub task_description: String,
    pub evaluation_protocol: String,
    pub slots: Vec<String>,
}

/// Stage-2 records carry this extra payload slot; it is permitted by every
/// template without being listed in `slots`.
pub const AUXILIARY_SLOT: &str = "auxiliary_evaluations";

/// One template per task type.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TaskType, InstructionTemplate>,
}

impl TemplateSet {
    pub fn new(templates: Vec<InstructionTemplate>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for t in templates {
            if map.insert(t.task_type, t.clone()).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate instruction template for task type {}",
                    t.task_type
                )));
            }
        }
        Ok(TemplateSet { templates: map })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_jsonl(path)?)
    }

    pub fn default_set() -> Self {
        let templates = include_str!("../data/instruction_templates.jsonl")
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).expect("built-in templates are well-formed"))
            .collect();
        Self::new(templates).expect("built-in templates are unique per task type")
    }

    pub fn get(&self, task_type: TaskType) -> Result<&InstructionTemplate> {
        self.templates.get(&task_type).ok_or_else(|| {
            Error::Validation(format!("no instruction template for task type {task_type}"))
        })
    }
}

fn slot_header(slot: &str) -> String {
    let text = slot.replace('_', " ");
    let mut chars = text.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => text,
    }
}

/// Resolve `{placeholder}` markers in the evaluation protocol.
fn resolve_protocol(protocol: &str, substitutions: &BTreeMap<String, String>) -> Result<String> {
    let mut out = protocol.to_string();
    for (key, value) in substitutions {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    if let Some(start) = out.find('{') {
        let end = out[start..].find('}').map(|e| start + e + 1).unwrap_or(out.len());
        return Err(Error::UnresolvedSlot(out[start..end].to_string()));
    }
    Ok(out)
}

/// Instruction header: task description, aspect definition, evaluation
/// protocol, in that order. Byte-deterministic for fixed inputs.
pub fn instruction_header(
    template: &InstructionTemplate,
    aspect: &Aspect,
    substitutions: &BTreeMap<String, String>,
) -> Result<String> {
    let protocol = resolve_protocol(&template.evaluation_protocol, substitutions)?;
    Ok(format!(
        "{}\n\nEvaluation aspect ({}): {}\n\n{}",
        template.task_description, aspect.name, aspect.definition, protocol
    ))
}

/// Full rendering: instruction header followed by every payload text under
/// its slot header. The payload must cover the template slots exactly; the
/// auxiliary slot is permitted on top of them.
pub fn assemble_instruction(
    template: &InstructionTemplate,
    aspect: &Aspect,
    payload: &BTreeMap<String, String>,
    substitutions: &BTreeMap<String, String>,
) -> Result<String> {
    for key in payload.keys() {
        if key != AUXILIARY_SLOT && !template.slots.contains(key) {
            return Err(Error::UnexpectedPayload(key.clone()));
        }
    }
    let mut text = instruction_header(template, aspect, substitutions)?;
    for slot in &template.slots {
        let value = payload
            .get(slot)
            .ok_or_else(|| Error::UnresolvedSlot(slot.clone()))?;
        text.push_str(&format!("\n\n{}:\n{}", slot_header(slot), value));
    }
    if let Some(aux) = payload.get(AUXILIARY_SLOT) {
        text.push_str(&format!("\n\n{}:\n{}", slot_header(AUXILIARY_SLOT), aux));
    }
    Ok(text)
}

/// Render a derived task record back into one prompt string.
pub fn render_prompt(task: &InstructionTask, template: &InstructionTemplate) -> Result<String> {
    let mut text = task.instruction.clone();
    for slot in &template.slots {
        let value = task
            .payloads
            .get(slot)
            .ok_or_else(|| Error::UnresolvedSlot(slot.clone()))?;
        text.push_str(&format!("\n\n{}:\n{}", slot_header(slot), value));
    }
    if let Some(aux) = task.payloads.get(AUXILIARY_SLOT) {
        text.push_str(&format!("\n\n{}:\n{}", slot_header(AUXILIARY_SLOT), aux));
    }
    Ok(text)
}

/// Train/test assignment of whole source datasets. Datasets never appear
/// on both sides.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn validate(&self) -> Result<()> {
        for name in &self.train {
            if self.test.contains(name) {
                return Err(Error::Validation(format!(
                    "dataset '{name}' is assigned to both train and test"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForgeConfig {
    /// Likert levels K for scoring tasks.
    pub likert_levels: u32,
    /// Boolean-QA / verbalizer threshold delta.
    pub boolean_threshold: UnitScore,
    /// Minimum score gap for comparison pairs; closer pairs are skipped.
    pub min_gap: f64,
    /// Emit NOTA comparison labels on exact ties instead of skipping.
    pub allow_nota: bool,
    pub seed: u64,
    /// Per-task-type instance caps; absent means unlimited.
    #[serde(default)]
    pub quotas: BTreeMap<TaskType, usize>,
    pub split: SplitManifest,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            likert_levels: 5,
            boolean_threshold: UnitScore::new(0.5).unwrap(),
            min_gap: 0.0,
            allow_nota: false,
            seed: 0,
            quotas: BTreeMap::new(),
            split: SplitManifest::default(),
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.likert_levels < 2 {
            return Err(Error::Validation(format!(
                "likert_levels must be >= 2, got {}",
                self.likert_levels
            )));
        }
        if !(0.0..=1.0).contains(&self.min_gap) {
            return Err(Error::Validation(format!(
                "min_gap must lie in [0,1], got {}",
                self.min_gap
            )));
        }
        self.split.validate()
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

fn joined_sources(record: &RatingRecord) -> String {
    record.source_texts.join("\n")
}

fn require_rating(record: &RatingRecord, aspect: &Aspect) -> Result<UnitScore> {
    record.rating(&aspect.id).ok_or_else(|| {
        Error::Validation(format!(
            "record '{}' has no rating for aspect '{}'",
            record.record_id, aspect.id
        ))
    })
}

/// Map a unit score onto the discrete scale [1, K].
pub fn likert_bin(score: UnitScore, levels: u32) -> u32 {
    ((score.value() * levels as f64).floor() as u32 + 1).min(levels)
}

pub fn derive_scoring(
    record: &RatingRecord,
    aspect: &Aspect,
    levels: u32,
    templates: &TemplateSet,
) -> Result<InstructionTask> {
    let score = require_rating(record, aspect)?;
    let template = templates.get(TaskType::Scoring)?;
    let subs = BTreeMap::from([("levels".to_string(), levels.to_string())]);
    let task = InstructionTask {
        task_id: format!("{}:{}:scoring", record.record_id, aspect.id),
        stage: Stage::Stage1,
        task_type: TaskType::Scoring,
        aspect_id: aspect.id.clone(),
        instruction: instruction_header(template, aspect, &subs)?,
        payloads: BTreeMap::from([
            ("source".to_string(), joined_sources(record)),
            ("output".to_string(), record.output_text.clone()),
        ]),
        label: Label::Score(likert_bin(score, levels)),
    };
    task.validate()?;
    Ok(task)
}

pub fn derive_boolean_qa(
    record: &RatingRecord,
    aspect: &Aspect,
    threshold: UnitScore,
    templates: &TemplateSet,
) -> Result<InstructionTask> {
    let score = require_rating(record, aspect)?;
    let template = templates.get(TaskType::BooleanQA)?;
    let task = InstructionTask {
        task_id: format!("{}:{}:boolean_qa", record.record_id, aspect.id),
        stage: Stage::Stage1,
        task_type: TaskType::BooleanQA,
        aspect_id: aspect.id.clone(),
        instruction: instruction_header(template, aspect, &BTreeMap::new())?,
        payloads: BTreeMap::from([
            ("source".to_string(), joined_sources(record)),
            ("output".to_string(), record.output_text.clone()),
        ]),
        // boundary score == threshold is negative
        label: Label::YesNo(score.value() > threshold.value()),
    };
    task.validate()?;
    Ok(task)
}

/// Derive one comparison task from a specific candidate pair. Returns
/// `None` when the pair is skipped (tie without NOTA, or gap below
/// `min_gap`).
fn derive_comparison_pair<R: Rng>(
    first: &RatingRecord,
    second: &RatingRecord,
    aspect: &Aspect,
    cfg: &ForgeConfig,
    templates: &TemplateSet,
    rng: &mut R,
) -> Result<Option<InstructionTask>> {
    let score_a = require_rating(first, aspect)?;
    let score_b = require_rating(second, aspect)?;
    let tied = score_a.value() == score_b.value();
    if tied && !cfg.allow_nota {
        return Ok(None);
    }
    if !tied && (score_a.value() - score_b.value()).abs() < cfg.min_gap {
        return Ok(None);
    }
    // uniform presentation order, decided by the shared rng
    let swap: bool = rng.gen();
    let (shown_a, shown_b) = if swap { (second, first) } else { (first, second) };
    let label = if tied {
        Label::Nota
    } else {
        let sa = require_rating(shown_a, aspect)?;
        let sb = require_rating(shown_b, aspect)?;
        Label::Choice(if sa.value() > sb.value() { 0 } else { 1 })
    };
    let template = templates.get(TaskType::Comparison)?;
    let task = InstructionTask {
        task_id: format!(
            "{}+{}:{}:comparison",
            first.record_id, second.record_id, aspect.id
        ),
        stage: Stage::Stage1,
        task_type: TaskType::Comparison,
        aspect_id: aspect.id.clone(),
        instruction: instruction_header(template, aspect, &BTreeMap::new())?,
        payloads: BTreeMap::from([
            ("source".to_string(), joined_sources(shown_a)),
            ("output_a".to_string(), shown_a.output_text.clone()),
            ("output_b".to_string(), shown_b.output_text.clone()),
        ]),
        label,
    };
    task.validate()?;
    Ok(Some(task))
}

/// Sample one comparison task from a candidate group.
pub fn derive_comparison<R: Rng>(
    group: &CandidateGroup,
    aspect: &Aspect,
    cfg: &ForgeConfig,
    templates: &TemplateSet,
    rng: &mut R,
) -> Result<Option<InstructionTask>> {
    let rated: Vec<&RatingRecord> = group
        .records
        .iter()
        .filter(|r| r.rating(&aspect.id).is_some())
        .collect();
    if rated.len() < 2 {
        return Err(Error::Validation(format!(
            "context '{}' has {} candidates rated on '{}', need 2",
            group.context_id,
            rated.len(),
            aspect.id
        )));
    }
    let pair: Vec<&&RatingRecord> = rated.choose_multiple(rng, 2).collect();
    derive_comparison_pair(pair[0], pair[1], aspect, cfg, templates, rng)
}

fn derive_ranking_triple<R: Rng>(
    triple: [&RatingRecord; 3],
    aspect: &Aspect,
    templates: &TemplateSet,
    rng: &mut R,
) -> Result<Option<InstructionTask>> {
    let scores: Vec<f64> = triple
        .iter()
        .map(|r| require_rating(r, aspect).map(|s| s.value()))
        .collect::<Result<Vec<_>>>()?;
    // ties make the permutation ambiguous; skip
    if scores[0] == scores[1] || scores[0] == scores[2] || scores[1] == scores[2] {
        return Ok(None);
    }
    let mut presented = [0usize, 1, 2];
    presented.shuffle(rng);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        scores[presented[b]]
            .partial_cmp(&scores[presented[a]])
            .unwrap()
    });
    let template = templates.get(TaskType::Ranking)?;
    let task = InstructionTask {
        task_id: format!(
            "{}+{}+{}:{}:ranking",
            triple[0].record_id, triple[1].record_id, triple[2].record_id, aspect.id
        ),
        stage: Stage::Stage1,
        task_type: TaskType::Ranking,
        aspect_id: aspect.id.clone(),
        instruction: instruction_header(template, aspect, &BTreeMap::new())?,
        payloads: BTreeMap::from([
            ("source".to_string(), joined_sources(triple[0])),
            ("output_a".to_string(), triple[presented[0]].output_text.clone()),
            ("output_b".to_string(), triple[presented[1]].output_text.clone()),
            ("output_c".to_string(), triple[presented[2]].output_text.clone()),
        ]),
        label: Label::Ranking(order),
    };
    task.validate()?;
    Ok(Some(task))
}

/// Sample one ranking task from a candidate group. Triples with tied
/// scores are skipped.
pub fn derive_ranking<R: Rng>(
    group: &CandidateGroup,
    aspect: &Aspect,
    templates: &TemplateSet,
    rng: &mut R,
) -> Result<Option<InstructionTask>> {
    let rated: Vec<&RatingRecord> = group
        .records
        .iter()
        .filter(|r| r.rating(&aspect.id).is_some())
        .collect();
    if rated.len() < 3 {
        return Err(Error::Validation(format!(
            "context '{}' has {} candidates rated on '{}', need 3",
            group.context_id,
            rated.len(),
            aspect.id
        )));
    }
    let chosen: Vec<&&RatingRecord> = rated.choose_multiple(rng, 3).collect();
    derive_ranking_triple([chosen[0], chosen[1], chosen[2]], aspect, templates, rng)
}

/// Turn a stage-1 task into its stage-2 counterpart by verbalizing the
/// ground-truth scores of every non-target aspect in `group_ratings`
/// (catalog order, single-space separated) into the auxiliary slot.
pub fn enrich_with_auxiliary(
    task: &InstructionTask,
    group_ratings: &BTreeMap<AspectId, UnitScore>,
    verbalizer: &TemplateCatalog,
    threshold: UnitScore,
    catalog: &AspectCatalog,
) -> Result<InstructionTask> {
    if task.stage != Stage::Stage1 {
        return Err(Error::Validation(format!(
            "task '{}' is not a stage1 task",
            task.task_id
        )));
    }
    if !group_ratings.contains_key(&task.aspect_id) {
        return Err(Error::Validation(format!(
            "task '{}': target aspect '{}' absent from group ratings",
            task.task_id, task.aspect_id
        )));
    }
    let mut auxiliaries: Vec<(&AspectId, UnitScore)> = group_ratings
        .iter()
        .filter(|(id, _)| **id != task.aspect_id)
        .map(|(id, s)| (id, *s))
        .collect();
    auxiliaries.sort_by_key(|(id, _)| catalog.position(id).unwrap_or(usize::MAX));
    let statements = auxiliaries
        .into_iter()
        .map(|(id, score)| verbalizer.verbalize(id, score, threshold))
        .collect::<Result<Vec<_>>>()?
        .join(" ");
    let mut enriched = task.clone();
    enriched.stage = Stage::Stage2;
    enriched.payloads.insert(AUXILIARY_SLOT.to_string(), statements);
    enriched.validate()?;
    Ok(enriched)
}

/// One ingested source dataset, named so the split manifest can address it.
#[derive(Debug, Clone)]
pub struct SourceDataset {
    pub name: String,
    pub records: Vec<RatingRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForgeManifest {
    pub seed: u64,
    pub config_hash: String,
    pub train_datasets: Vec<String>,
    pub test_datasets: Vec<String>,
    /// (aspect, task type) -> instance count in the stage-1 file.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub stage1_total: usize,
    pub inference_total: usize,
    pub warnings: Vec<String>,
}

/// The forged artifact set, before writing to disk.
#[derive(Debug, Clone)]
pub struct TaskCollection {
    pub stage1: Vec<InstructionTask>,
    pub stage2: Vec<InstructionTask>,
    pub inference: Vec<EvalRequest>,
    pub human: Vec<HumanRatingRow>,
    pub manifest: ForgeManifest,
}

impl TaskCollection {
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        write_jsonl(dir.join("stage1.jsonl"), &self.stage1)?;
        write_jsonl(dir.join("stage2.jsonl"), &self.stage2)?;
        write_jsonl(dir.join("inference.jsonl"), &self.inference)?;
        write_jsonl(dir.join("human.jsonl"), &self.human)?;
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).expect("serializable");
        std::fs::write(&manifest_path, json + "\n")
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))
    }
}

/// Build the full training mixture: enumerate every derivable task from
/// the train-side datasets, cap per-type counts at the quotas, shuffle the
/// mixture, and pair each stage-1 record with its enriched stage-2
/// counterpart. Test-side datasets become inference requests plus a
/// human-ratings file.
pub fn build_training_mix(
    sources: &[SourceDataset],
    cfg: &ForgeConfig,
    catalog: &AspectCatalog,
    templates: &TemplateSet,
    verbalizer: &TemplateCatalog,
) -> Result<TaskCollection> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for source in sources {
        let in_train = cfg.split.train.contains(&source.name);
        let in_test = cfg.split.test.contains(&source.name);
        if !in_train && !in_test {
            return Err(Error::Validation(format!(
                "dataset '{}' is not assigned to train or test in the split manifest",
                source.name
            )));
        }
    }

    // stage-1 candidates per task type, in deterministic enumeration order;
    // each keeps the ratings map used for stage-2 enrichment
    let mut per_type: BTreeMap<TaskType, Vec<(InstructionTask, BTreeMap<AspectId, UnitScore>)>> =
        TaskType::ALL.iter().map(|t| (*t, Vec::new())).collect();
    let mut inference = Vec::new();
    let mut human = Vec::new();

    for source in sources {
        if cfg.split.test.contains(&source.name) {
            for record in &source.records {
                for (aspect_id, score) in &record.ratings {
                    catalog.require(aspect_id)?;
                    let id = format!("{}:{}:{}", source.name, record.record_id, aspect_id);
                    inference.push(EvalRequest {
                        id: id.clone(),
                        output: record.output_text.clone(),
                        sources: record.source_texts.clone(),
                        target_aspect: aspect_id.clone(),
                        context_id: Some(record.context_id.clone()),
                        ratings: record.ratings.clone(),
                    });
                    human.push(HumanRatingRow {
                        id,
                        aspect_id: aspect_id.clone(),
                        human: score.value(),
                        context_id: Some(record.context_id.clone()),
                    });
                }
            }
            continue;
        }

        let groups = group_by_context(&source.records)?;
        for aspect in catalog.iter() {
            for group in &groups {
                let rated: Vec<&RatingRecord> = group
                    .records
                    .iter()
                    .filter(|r| r.rating(&aspect.id).is_some())
                    .collect();
                for record in &rated {
                    let scoring = derive_scoring(record, aspect, cfg.likert_levels, templates)?;
                    per_type
                        .get_mut(&TaskType::Scoring)
                        .unwrap()
                        .push((scoring, record.ratings.clone()));
                    let qa = derive_boolean_qa(record, aspect, cfg.boolean_threshold, templates)?;
                    per_type
                        .get_mut(&TaskType::BooleanQA)
                        .unwrap()
                        .push((qa, record.ratings.clone()));
                }
                for i in 0..rated.len() {
                    for j in (i + 1)..rated.len() {
                        if let Some(task) = derive_comparison_pair(
                            rated[i], rated[j], aspect, cfg, templates, &mut rng,
                        )? {
                            per_type
                                .get_mut(&TaskType::Comparison)
                                .unwrap()
                                .push((task, rated[i].ratings.clone()));
                        }
                    }
                }
                for i in 0..rated.len() {
                    for j in (i + 1)..rated.len() {
                        for l in (j + 1)..rated.len() {
                            if let Some(task) = derive_ranking_triple(
                                [rated[i], rated[j], rated[l]],
                                aspect,
                                templates,
                                &mut rng,
                            )? {
                                per_type
                                    .get_mut(&TaskType::Ranking)
                                    .unwrap()
                                    .push((task, rated[i].ratings.clone()));
                            }
                        }
                    }
                }
            }
        }
    }

    // apply quotas, then shuffle the mixture
    let mut mixture = Vec::new();
    for task_type in TaskType::ALL {
        let mut tasks = per_type.remove(&task_type).unwrap();
        if let Some(&quota) = cfg.quotas.get(&task_type) {
            if quota > tasks.len() {
                warnings.push(format!(
                    "quota {quota} for {task_type} exceeds the {} derivable instances",
                    tasks.len()
                ));
            } else {
                tasks.shuffle(&mut rng);
                tasks.truncate(quota);
            }
        }
        mixture.extend(tasks);
    }
    mixture.shuffle(&mut rng);

    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut stage1 = Vec::with_capacity(mixture.len());
    let mut stage2 = Vec::with_capacity(mixture.len());
    for (task, ratings) in &mixture {
        *counts
            .entry(task.aspect_id.0.clone())
            .or_default()
            .entry(task.task_type.to_string())
            .or_default() += 1;
        stage2.push(enrich_with_auxiliary(
            task,
            ratings,
            verbalizer,
            cfg.boolean_threshold,
            catalog,
        )?);
        stage1.push(task.clone());
    }

    let manifest = ForgeManifest {
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        train_datasets: cfg.split.train.clone(),
        test_datasets: cfg.split.test.clone(),
        counts,
        stage1_total: stage1.len(),
        inference_total: inference.len(),
        warnings,
    };
    Ok(TaskCollection {
        stage1,
        stage2,
        inference,
        human,
        manifest,
    })
}
