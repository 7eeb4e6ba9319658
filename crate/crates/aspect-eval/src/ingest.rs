//! Loading heterogeneous human-rating datasets into the normalized
//! [`RatingRecord`] model.
//!
//! Each source dataset declares a [`SourceSchemaConfig`]: which input fields
//! hold the output text, sources and ids, how raw aspect names map onto
//! catalog ids, and the raw annotation scale per aspect. Scales are declared,
//! never inferred. Multi-annotator ratings (arrays in the input) are averaged
//! into a single score at ingest.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{AspectCatalog, AspectId, CandidateGroup, RatingRecord, UnitScore};
use crate::error::{Error, Result};

/// Field mappings and per-aspect scales for one source dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceSchemaConfig {
    pub record_id_field: String,
    pub context_id_field: String,
    #[serde(default)]
    pub system_id_field: Option<String>,
    pub output_field: String,
    /// Field holding the ordered list of additional texts; optional.
    #[serde(default)]
    pub sources_field: Option<String>,
    pub ratings_field: String,
    /// Raw aspect name in the input -> catalog aspect id.
    pub aspect_map: BTreeMap<String, AspectId>,
    /// Catalog aspect id -> (min, max) raw annotation scale.
    pub scales: BTreeMap<AspectId, (f64, f64)>,
}

impl SourceSchemaConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn validate(&self, catalog: &AspectCatalog) -> Result<()> {
        for id in self.aspect_map.values() {
            catalog.require(id)?;
            if !self.scales.contains_key(id) {
                return Err(Error::Validation(format!(
                    "no raw scale declared for mapped aspect '{id}'"
                )));
            }
        }
        for (id, (min, max)) in &self.scales {
            catalog.require(id)?;
            if !(min < max) {
                return Err(Error::Validation(format!(
                    "degenerate scale ({min}, {max}) for aspect '{id}'"
                )));
            }
        }
        Ok(())
    }
}

/// Affine map of a raw rating onto the unit interval.
pub fn normalize_score(raw: f64, scale: (f64, f64)) -> Result<UnitScore> {
    let (min, max) = scale;
    if !(min < max) {
        return Err(Error::Validation(format!("degenerate scale ({min}, {max})")));
    }
    if !raw.is_finite() || raw < min || raw > max {
        return Err(Error::Validation(format!(
            "rating {raw} outside declared scale ({min}, {max})"
        )));
    }
    UnitScore::new((raw - min) / (max - min))
}

/// Inverse of [`normalize_score`] for the same scale.
pub fn denormalize_score(score: UnitScore, scale: (f64, f64)) -> f64 {
    let (min, max) = scale;
    min + score.value() * (max - min)
}

fn field_str(row: &Value, field: &str, path: &str, line: usize) -> Result<String> {
    match row.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(_) => Err(Error::Record {
            path: path.to_string(),
            line,
            message: format!("field '{field}' is not a string"),
        }),
        None => Err(Error::Record {
            path: path.to_string(),
            line,
            message: format!("missing field '{field}'"),
        }),
    }
}

/// Average the raw rating(s) for one aspect; input is a number or an array
/// of numbers (one per annotator).
fn raw_rating(value: &Value, path: &str, line: usize, aspect: &str) -> Result<f64> {
    let bad = || Error::Record {
        path: path.to_string(),
        line,
        message: format!("rating for '{aspect}' is not a number or array of numbers"),
    };
    match value {
        Value::Number(n) => n.as_f64().ok_or_else(bad),
        Value::Array(items) if !items.is_empty() => {
            let mut sum = 0.0;
            for item in items {
                sum += item.as_f64().ok_or_else(bad)?;
            }
            Ok(sum / items.len() as f64)
        }
        _ => Err(bad()),
    }
}

/// Load one rating dataset, normalizing every score to [0,1]. Input order
/// is preserved; errors name the offending row and field.
pub fn load_rating_dataset(
    path: impl AsRef<Path>,
    schema: &SourceSchemaConfig,
    catalog: &AspectCatalog,
) -> Result<Vec<RatingRecord>> {
    let path = path.as_ref();
    schema.validate(catalog)?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let path_str = path.display().to_string();
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(&path_str, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path_str.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        records.push(parse_row(&row, schema, &path_str, line_no)?);
    }
    log::info!("loaded {} records from {}", records.len(), path_str);
    Ok(records)
}

fn parse_row(
    row: &Value,
    schema: &SourceSchemaConfig,
    path: &str,
    line: usize,
) -> Result<RatingRecord> {
    let record_id = field_str(row, &schema.record_id_field, path, line)?;
    let context_id = field_str(row, &schema.context_id_field, path, line)?;
    let system_id = match &schema.system_id_field {
        Some(f) => field_str(row, f, path, line)?,
        None => String::new(),
    };
    let output_text = field_str(row, &schema.output_field, path, line)?;
    let source_texts = match &schema.sources_field {
        Some(f) => match row.get(f) {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_str().map(str::to_string).ok_or_else(|| Error::Record {
                        path: path.to_string(),
                        line,
                        message: format!("field '{f}' contains a non-string entry"),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            Some(Value::String(s)) => vec![s.clone()],
            None => Vec::new(),
            Some(_) => {
                return Err(Error::Record {
                    path: path.to_string(),
                    line,
                    message: format!("field '{f}' is not a list of strings"),
                })
            }
        },
        None => Vec::new(),
    };
    let raw_ratings = row
        .get(&schema.ratings_field)
        .and_then(Value::as_object)
        .ok_or_else(|| Error::Record {
            path: path.to_string(),
            line,
            message: format!("missing or non-object field '{}'", schema.ratings_field),
        })?;

    let mut ratings = BTreeMap::new();
    let mut raw_scale = (0.0, 1.0);
    for (name, value) in raw_ratings {
        let Some(aspect_id) = schema.aspect_map.get(name) else {
            // unmapped aspects are intentionally dropped, not errors
            continue;
        };
        let scale = schema.scales[aspect_id];
        let raw = raw_rating(value, path, line, name)?;
        let score = normalize_score(raw, scale).map_err(|e| Error::Record {
            path: path.to_string(),
            line,
            message: format!("field '{name}': {e}"),
        })?;
        ratings.insert(aspect_id.clone(), score);
        raw_scale = scale;
    }
    Ok(RatingRecord {
        record_id,
        context_id,
        system_id,
        output_text,
        source_texts,
        ratings,
        raw_scale,
    })
}

/// Partition records into candidate groups by context id, ordered by first
/// occurrence. Records sharing a context must agree on source texts.
pub fn group_by_context(records: &[RatingRecord]) -> Result<Vec<CandidateGroup>> {
    let mut order: Vec<String> = Vec::new();
    let mut buckets: BTreeMap<String, Vec<RatingRecord>> = BTreeMap::new();
    for r in records {
        if !buckets.contains_key(&r.context_id) {
            order.push(r.context_id.clone());
        }
        buckets.entry(r.context_id.clone()).or_default().push(r.clone());
    }
    order
        .into_iter()
        .map(|ctx| {
            let recs = buckets.remove(&ctx).unwrap();
            CandidateGroup::new(ctx, recs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::NlgTask;

    fn record(id: &str, ctx: &str, sources: &[&str]) -> RatingRecord {
        RatingRecord {
            record_id: id.into(),
            context_id: ctx.into(),
            system_id: "sys".into(),
            output_text: "out".into(),
            source_texts: sources.iter().map(|s| s.to_string()).collect(),
            ratings: BTreeMap::new(),
            raw_scale: (1.0, 5.0),
        }
    }

    #[test]
    fn normalize_bounds_and_midpoint() {
        assert_eq!(normalize_score(5.0, (1.0, 5.0)).unwrap().value(), 1.0);
        assert_eq!(normalize_score(1.0, (1.0, 5.0)).unwrap().value(), 0.0);
        assert_eq!(normalize_score(2.0, (0.0, 4.0)).unwrap().value(), 0.5);
        assert_eq!(normalize_score(3.0, (1.0, 5.0)).unwrap().value(), 0.5);
    }

    #[test]
    fn normalize_derived_value() {
        // (4.2 - 1) / (5 - 1) = 0.8
        let s = normalize_score(4.2, (1.0, 5.0)).unwrap();
        assert!((s.value() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_out_of_scale() {
        assert!(normalize_score(6.0, (1.0, 5.0)).is_err());
        assert!(normalize_score(0.5, (1.0, 5.0)).is_err());
        assert!(normalize_score(2.0, (3.0, 3.0)).is_err());
    }

    #[test]
    fn normalize_round_trips() {
        for raw in [1.0, 1.7, 3.3, 4.9, 5.0] {
            let s = normalize_score(raw, (1.0, 5.0)).unwrap();
            assert!((denormalize_score(s, (1.0, 5.0)) - raw).abs() < 1e-12);
        }
    }

    #[test]
    fn grouping_partitions_by_first_occurrence() {
        let records = vec![
            record("a", "c2", &["s2"]),
            record("b", "c1", &["s1"]),
            record("c", "c2", &["s2"]),
            record("d", "c1", &["s1"]),
        ];
        let groups = group_by_context(&records).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].context_id, "c2");
        assert_eq!(groups[1].context_id, "c1");
        assert_eq!(
            groups.iter().map(|g| g.records.len()).sum::<usize>(),
            records.len()
        );
    }

    #[test]
    fn grouping_singleton() {
        let groups = group_by_context(&[record("a", "c1", &[])]).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].records.len(), 1);
    }

    #[test]
    fn grouping_rejects_source_mismatch() {
        let err = group_by_context(&[record("a", "c1", &["s1"]), record("b", "c1", &["s2"])])
            .unwrap_err();
        assert!(err.to_string().contains("c1"));
    }

    fn test_schema() -> (SourceSchemaConfig, AspectCatalog) {
        let nat = AspectId::new("naturalness", NlgTask::DialogueTurn);
        let catalog = AspectCatalog::default_catalog();
        let schema = SourceSchemaConfig {
            record_id_field: "id".into(),
            context_id_field: "ctx".into(),
            system_id_field: Some("sys".into()),
            output_field: "response".into(),
            sources_field: Some("history".into()),
            ratings_field: "scores".into(),
            aspect_map: BTreeMap::from([("nat".to_string(), nat.clone())]),
            scales: BTreeMap::from([(nat, (1.0, 5.0))]),
        };
        (schema, catalog)
    }

    #[test]
    fn load_dataset_normalizes_and_preserves_order() {
        let (schema, catalog) = test_schema();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"r1","ctx":"c1","sys":"m1","response":"hi","history":["a","b"],"scores":{"nat":3}}"#,
                "\n",
                r#"{"id":"r2","ctx":"c1","sys":"m2","response":"yo","history":["a","b"],"scores":{"nat":[4,5]}}"#,
                "\n",
            ),
        )
        .unwrap();
        let records = load_rating_dataset(&path, &schema, &catalog).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].record_id, "r1");
        let nat = AspectId::new("naturalness", NlgTask::DialogueTurn);
        assert_eq!(records[0].rating(&nat).unwrap().value(), 0.5);
        // annotators 4 and 5 average to 4.5 -> (4.5-1)/4 = 0.875
        assert_eq!(records[1].rating(&nat).unwrap().value(), 0.875);
        assert_eq!(records[1].source_texts, vec!["a", "b"]);
    }

    #[test]
    fn load_dataset_error_names_row_and_field() {
        let (schema, catalog) = test_schema();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        std::fs::write(
            &path,
            r#"{"id":"r1","ctx":"c1","sys":"m1","history":[],"scores":{"nat":3}}"#,
        )
        .unwrap();
        let err = load_rating_dataset(&path, &schema, &catalog).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":1:"), "{msg}");
        assert!(msg.contains("response"), "{msg}");
    }

    #[test]
    fn load_dataset_rejects_rating_outside_scale() {
        let (schema, catalog) = test_schema();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        std::fs::write(
            &path,
            r#"{"id":"r1","ctx":"c1","sys":"m1","response":"hi","history":[],"scores":{"nat":9}}"#,
        )
        .unwrap();
        assert!(load_rating_dataset(&path, &schema, &catalog).is_err());
    }

    #[test]
    fn schema_requires_known_aspects_and_scales() {
        let (mut schema, catalog) = test_schema();
        schema
            .aspect_map
            .insert("bogus".into(), AspectId("bogus@other".into()));
        assert!(schema.validate(&catalog).is_err());
    }
}
