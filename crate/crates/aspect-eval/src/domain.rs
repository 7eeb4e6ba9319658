//! Shared vocabulary: scores, aspects, rating records, and instruction tasks.
//!
//! Everything here is immutable after construction and safe to share across
//! threads. Validation lives with the types; no module below this one knows
//! about prompts, backends, or statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A score normalized to the unit interval. Construction rejects NaN,
/// infinities, and anything outside [0,1]; there is no silent clamping.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct UnitScore(f64);

impl UnitScore {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && (0.0..=1.0).contains(&value) {
            Ok(UnitScore(value))
        } else {
            Err(Error::ScoreOutOfRange { value })
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for UnitScore {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        UnitScore::new(v)
    }
}

impl From<UnitScore> for f64 {
    fn from(s: UnitScore) -> f64 {
        s.0
    }
}

impl fmt::Display for UnitScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The NLG task family an aspect belongs to. Aspects with identical names
/// under different task families are distinct aspects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NlgTask {
    DialogueTurn,
    DialogueLevel,
    Summarization,
    Data2text,
    Other,
}

impl fmt::Display for NlgTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NlgTask::DialogueTurn => "dialogue-turn",
            NlgTask::DialogueLevel => "dialogue-level",
            NlgTask::Summarization => "summarization",
            NlgTask::Data2text => "data2text",
            NlgTask::Other => "other",
        };
        f.write_str(s)
    }
}

/// Stable aspect identifier. The `name@nlg_task` convention (e.g.
/// `naturalness@dialogue-turn`) is this project's own; sources use bare
/// names that the ingest schema remaps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AspectId(pub String);

impl AspectId {
    pub fn new(name: &str, task: NlgTask) -> Self {
        AspectId(format!("{name}@{task}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AspectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A named evaluation dimension with its natural-language definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aspect {
    pub id: AspectId,
    pub name: String,
    pub nlg_task: NlgTask,
    pub definition: String,
    pub seen: bool,
}

/// Ordered collection of aspects with unique ids. Catalog order is the
/// order aspects appear in the source file; auxiliary verbalizations are
/// concatenated in this order.
#[derive(Debug, Clone, Default)]
pub struct AspectCatalog {
    aspects: Vec<Aspect>,
    index: HashMap<AspectId, usize>,
}

/// One issue found while validating a catalog.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CatalogIssue {
    pub aspect_id: String,
    pub message: String,
}

impl AspectCatalog {
    pub fn new(aspects: Vec<Aspect>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, a) in aspects.iter().enumerate() {
            if index.insert(a.id.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate aspect id '{}' in catalog",
                    a.id
                )));
            }
        }
        Ok(AspectCatalog { aspects, index })
    }

    /// Load from a newline-delimited file, one JSON aspect per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut aspects = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let aspect: Aspect = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            aspects.push(aspect);
        }
        let report = validate_aspects(&aspects);
        if !report.is_empty() {
            return Err(Error::Validation(format!(
                "invalid catalog {}: {}",
                path.display(),
                report
                    .iter()
                    .map(|i| i.message.clone())
                    .collect::<Vec<_>>()
                    .join("; ")
            )));
        }
        Self::new(aspects)
    }

    /// Parse the built-in default catalog shipped with the crate.
    pub fn default_catalog() -> Self {
        let aspects = include_str!("../data/aspects.jsonl")
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).expect("built-in catalog is well-formed"))
            .collect();
        Self::new(aspects).expect("built-in catalog has unique ids")
    }

    pub fn get(&self, id: &AspectId) -> Option<&Aspect> {
        self.index.get(id).map(|&i| &self.aspects[i])
    }

    pub fn require(&self, id: &AspectId) -> Result<&Aspect> {
        self.get(id).ok_or_else(|| Error::UnknownAspect(id.0.clone()))
    }

    /// Look up by bare name. Fails loudly when the name is ambiguous across
    /// NLG tasks; (name, nlg_task) is the identity key.
    pub fn by_name(&self, name: &str) -> Result<&Aspect> {
        let matches: Vec<&Aspect> = self.aspects.iter().filter(|a| a.name == name).collect();
        match matches.len() {
            0 => Err(Error::UnknownAspect(name.to_string())),
            1 => Ok(matches[0]),
            n => Err(Error::AmbiguousAspect {
                name: name.to_string(),
                count: n,
            }),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Aspect> {
        self.aspects.iter()
    }

    /// Position of an aspect in catalog order, used to sort auxiliary
    /// verbalizations deterministically.
    pub fn position(&self, id: &AspectId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.aspects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aspects.is_empty()
    }
}

/// Report duplicate ids and empty definitions. An empty report means the
/// catalog is valid; aspects sharing a name across NLG tasks are distinct
/// and not flagged.
pub fn validate_aspects(aspects: &[Aspect]) -> Vec<CatalogIssue> {
    let mut issues = Vec::new();
    let mut seen_ids: HashMap<&str, usize> = HashMap::new();
    for a in aspects {
        *seen_ids.entry(a.id.as_str()).or_default() += 1;
        if a.definition.trim().is_empty() {
            issues.push(CatalogIssue {
                aspect_id: a.id.0.clone(),
                message: format!("aspect '{}' has an empty definition", a.id),
            });
        }
    }
    for (id, count) in seen_ids {
        if count > 1 {
            issues.push(CatalogIssue {
                aspect_id: id.to_string(),
                message: format!("duplicate aspect id '{id}' ({count} occurrences)"),
            });
        }
    }
    issues.sort_by(|a, b| a.aspect_id.cmp(&b.aspect_id).then(a.message.cmp(&b.message)));
    issues
}

/// Reject anything outside [0,1]; kept as a named entry point because
/// callers often hold a raw f64 from parsed input.
pub fn clamp_unit(value: f64) -> Result<UnitScore> {
    UnitScore::new(value)
}

/// One human-rated system output with its context and per-aspect scores.
/// Missing ratings are absent map entries, never sentinel numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub record_id: String,
    pub context_id: String,
    pub system_id: String,
    pub output_text: String,
    /// Additional texts (sources, dialogue context), order preserved
    /// verbatim from input.
    pub source_texts: Vec<String>,
    pub ratings: BTreeMap<AspectId, UnitScore>,
    /// Original annotation range, retained for provenance.
    pub raw_scale: (f64, f64),
}

impl RatingRecord {
    pub fn rating(&self, aspect: &AspectId) -> Option<UnitScore> {
        self.ratings.get(aspect).copied()
    }
}

/// Records sharing one context (e.g. several summaries of one document).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGroup {
    pub context_id: String,
    pub records: Vec<RatingRecord>,
}

impl CandidateGroup {
    pub fn new(context_id: String, records: Vec<RatingRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation(format!(
                "candidate group '{context_id}' has no records"
            )));
        }
        let sources = &records[0].source_texts;
        for r in &records {
            if r.context_id != context_id {
                return Err(Error::Validation(format!(
                    "record '{}' does not share context '{}'",
                    r.record_id, context_id
                )));
            }
            if &r.source_texts != sources {
                return Err(Error::Validation(format!(
                    "records in context '{context_id}' disagree on source texts"
                )));
            }
        }
        Ok(CandidateGroup {
            context_id,
            records,
        })
    }
}

/// The four derived evaluation task forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskType {
    Scoring,
    Comparison,
    Ranking,
    BooleanQA,
}

impl TaskType {
    pub const ALL: [TaskType; 4] = [
        TaskType::Scoring,
        TaskType::Comparison,
        TaskType::Ranking,
        TaskType::BooleanQA,
    ];
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskType::Scoring => "scoring",
            TaskType::Comparison => "comparison",
            TaskType::Ranking => "ranking",
            TaskType::BooleanQA => "boolean_qa",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
    Inference,
}

/// Task-type-specific target label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Label {
    /// Discrete Likert score in [1, K].
    Score(u32),
    /// Zero-based index of the winning candidate.
    Choice(usize),
    /// Tie outcome for comparison tasks ("none of the above").
    Nota,
    /// Presented-candidate indices ordered by descending quality.
    Ranking(Vec<usize>),
    /// Yes/No answer to the Boolean question.
    YesNo(bool),
}

impl Label {
    pub fn matches(&self, task_type: TaskType) -> bool {
        match (self, task_type) {
            (Label::Score(_), TaskType::Scoring) => true,
            (Label::Choice(_) | Label::Nota, TaskType::Comparison) => true,
            (Label::Ranking(p), TaskType::Ranking) => {
                let mut sorted = p.clone();
                sorted.sort_unstable();
                p.len() == 3 && sorted == vec![0, 1, 2]
            }
            (Label::YesNo(_), TaskType::BooleanQA) => true,
            _ => false,
        }
    }
}

/// A fully assembled training or inference record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionTask {
    pub task_id: String,
    pub stage: Stage,
    pub task_type: TaskType,
    pub aspect_id: AspectId,
    pub instruction: String,
    /// Named payload texts ("output", "source", "auxiliary_evaluations", ...).
    pub payloads: BTreeMap<String, String>,
    pub label: Label,
}

impl InstructionTask {
    /// Shape checks: label matches the task type, and the auxiliary payload
    /// is present exactly when the record is stage-2.
    pub fn validate(&self) -> Result<()> {
        if !self.label.matches(self.task_type) {
            return Err(Error::Validation(format!(
                "task '{}': label {:?} does not fit task type {}",
                self.task_id, self.label, self.task_type
            )));
        }
        let has_aux = self.payloads.contains_key("auxiliary_evaluations");
        match self.stage {
            Stage::Stage1 if has_aux => Err(Error::Validation(format!(
                "stage1 task '{}' carries an auxiliary_evaluations payload",
                self.task_id
            ))),
            Stage::Stage2 if !has_aux => Err(Error::Validation(format!(
                "stage2 task '{}' is missing the auxiliary_evaluations payload",
                self.task_id
            ))),
            _ => Ok(()),
        }
    }
}

/// One item of an evaluation request file: a text to score on one target
/// aspect. `ratings` optionally carries ground-truth scores for the
/// ground-truth injection mode and for meta-evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub id: String,
    pub output: String,
    #[serde(default)]
    pub sources: Vec<String>,
    pub target_aspect: AspectId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_id: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ratings: BTreeMap<AspectId, UnitScore>,
}

/// One row of a human-ratings file, joined with engine results on `id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanRatingRow {
    pub id: String,
    pub aspect_id: AspectId,
    pub human: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_id: Option<String>,
}
