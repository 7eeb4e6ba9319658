//! Template-based verbalizer: maps an (aspect, score) pair to a positive or
//! negative natural-language statement via threshold delta.
//!
//! The verbalizer is strictly binary. The boundary score `s == delta` maps
//! to the negative statement. Delta defaults to 0.5.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{AspectId, UnitScore};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbalizerTemplate {
    pub aspect_id: AspectId,
    pub pos_text: String,
    pub neg_text: String,
}

impl VerbalizerTemplate {
    fn validate(&self) -> Result<()> {
        if self.pos_text.trim().is_empty() || self.neg_text.trim().is_empty() {
            return Err(Error::Validation(format!(
                "verbalizer template for '{}' has an empty statement",
                self.aspect_id
            )));
        }
        if self.pos_text == self.neg_text {
            return Err(Error::Validation(format!(
                "verbalizer template for '{}' has identical positive and negative statements",
                self.aspect_id
            )));
        }
        Ok(())
    }
}

/// One template per aspect id. With `generic_fallback` enabled, aspects
/// without a catalog entry verbalize through a generated template; by
/// default a missing template is an error naming the aspect.
#[derive(Debug, Clone, Default)]
pub struct TemplateCatalog {
    templates: HashMap<AspectId, VerbalizerTemplate>,
    generic_fallback: bool,
}

impl TemplateCatalog {
    pub fn new(templates: Vec<VerbalizerTemplate>) -> Result<Self> {
        let mut map = HashMap::new();
        for t in templates {
            t.validate()?;
            let id = t.aspect_id.clone();
            if map.insert(id.clone(), t).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate verbalizer template for aspect '{id}'"
                )));
            }
        }
        Ok(TemplateCatalog {
            templates: map,
            generic_fallback: false,
        })
    }

    /// Load from a newline-delimited file, one JSON template per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut templates = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: VerbalizerTemplate = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            templates.push(t);
        }
        Self::new(templates)
    }

    /// The template set shipped with the crate (dialogue, summarization,
    /// and data-to-text aspects).
    pub fn default_catalog() -> Self {
        let templates = include_str!("../data/verbalizer_templates.jsonl")
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).expect("built-in templates are well-formed"))
            .collect();
        Self::new(templates).expect("built-in templates are unique per aspect")
    }

    /// Enable a generated "good/bad" fallback for aspects without a
    /// template. Off by default; inference over arbitrary unseen aspects
    /// opts in explicitly.
    pub fn with_generic_fallback(mut self, enabled: bool) -> Self {
        self.generic_fallback = enabled;
        self
    }

    pub fn get(&self, aspect: &AspectId) -> Option<&VerbalizerTemplate> {
        self.templates.get(aspect)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    fn resolve(&self, aspect: &AspectId) -> Result<VerbalizerTemplate> {
        if let Some(t) = self.templates.get(aspect) {
            return Ok(t.clone());
        }
        if self.generic_fallback {
            let name = aspect
                .as_str()
                .split('@')
                .next()
                .unwrap_or(aspect.as_str())
                .replace('-', " ");
            return Ok(VerbalizerTemplate {
                aspect_id: aspect.clone(),
                pos_text: format!("The {name} of the text is good."),
                neg_text: format!("The {name} of the text is bad."),
            });
        }
        Err(Error::MissingTemplate(aspect.0.clone()))
    }

    /// Verbalize a score: positive statement when `score > threshold`,
    /// negative statement when `score <= threshold`.
    pub fn verbalize(
        &self,
        aspect: &AspectId,
        score: UnitScore,
        threshold: UnitScore,
    ) -> Result<String> {
        let template = self.resolve(aspect)?;
        Ok(if score.value() > threshold.value() {
            template.pos_text
        } else {
            template.neg_text
        })
    }
}
