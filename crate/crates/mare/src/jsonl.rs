//! Line-delimited JSON datasets.
//!
//! One example per line:
//! `{"tokens": [...], "labels": {"0": 1, "2": 0}, "rationales": {"0": [0, 1, ...]}}`.
//! Aspect keys are decimal indices; missing keys mean "unlabelled" or "no
//! gold rationale". `rationales` may be omitted entirely.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use mare_core::data::{Dataset, MultiAspectExample};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("{path}: no examples")]
    Empty { path: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    tokens: Vec<String>,
    labels: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    rationales: BTreeMap<String, Vec<serde_json::Value>>,
}

fn schema(line: usize, field: impl Into<String>, message: impl Into<String>) -> JsonlError {
    JsonlError::Schema {
        line,
        field: field.into(),
        message: message.into(),
    }
}

fn aspect_key(line: usize, field: &str, key: &str) -> Result<usize, JsonlError> {
    key.parse::<usize>()
        .map_err(|_| schema(line, format!("{field}.{key}"), "aspect keys must be non-negative integers"))
}

fn parse_line(line: usize, text: &str) -> Result<(Record, usize), JsonlError> {
    let rec: Record = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        let field = ["tokens", "labels", "rationales"]
            .into_iter()
            .find(|f| msg.contains(&format!("`{f}`")))
            .unwrap_or("<record>");
        schema(line, field, msg)
    })?;
    let mut max_aspect = 0;
    for key in rec.labels.keys().chain(rec.rationales.keys()) {
        let field = if rec.labels.contains_key(key) { "labels" } else { "rationales" };
        max_aspect = max_aspect.max(aspect_key(line, field, key)? + 1);
    }
    Ok((rec, max_aspect))
}

fn to_example(line: usize, rec: Record, num_aspects: usize) -> Result<MultiAspectExample, JsonlError> {
    if rec.tokens.is_empty() {
        return Err(schema(line, "tokens", "must not be empty"));
    }
    let mut labels = vec![None; num_aspects];
    for (key, value) in &rec.labels {
        let a = aspect_key(line, "labels", key)?;
        if a >= num_aspects {
            return Err(schema(line, format!("labels.{key}"), format!("aspect out of range for {num_aspects} aspects")));
        }
        let v = value
            .as_u64()
            .ok_or_else(|| schema(line, format!("labels.{key}"), format!("expected a non-negative integer, got {value}")))?;
        labels[a] = Some(v as usize);
    }
    if labels.iter().all(Option::is_none) {
        return Err(schema(line, "labels", "at least one aspect must be labelled"));
    }
    let mut rationales = vec![None; num_aspects];
    for (key, values) in &rec.rationales {
        let a = aspect_key(line, "rationales", key)?;
        if a >= num_aspects {
            return Err(schema(line, format!("rationales.{key}"), format!("aspect out of range for {num_aspects} aspects")));
        }
        if values.len() != rec.tokens.len() {
            return Err(schema(
                line,
                format!("rationales.{key}"),
                format!("has {} entries for {} tokens", values.len(), rec.tokens.len()),
            ));
        }
        let bits = values
            .iter()
            .enumerate()
            .map(|(i, v)| match v.as_u64() {
                Some(b @ (0 | 1)) => Ok(b as u8),
                _ => Err(schema(line, format!("rationales.{key}[{i}]"), format!("expected 0 or 1, got {v}"))),
            })
            .collect::<Result<Vec<u8>, _>>()?;
        rationales[a] = Some(bits);
    }
    Ok(MultiAspectExample {
        tokens: rec.tokens,
        labels,
        rationales,
    })
}

/// Parses JSONL text. With `num_aspects = None` the count is the largest
/// aspect key seen plus one.
pub fn parse_jsonl(text: &str, num_aspects: Option<usize>) -> Result<Dataset, JsonlError> {
    let mut records = Vec::new();
    let mut seen = 0;
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let (rec, k) = parse_line(i + 1, raw)?;
        seen = seen.max(k);
        records.push((i + 1, rec));
    }
    let k = num_aspects.unwrap_or(seen);
    let examples = records
        .into_iter()
        .map(|(line, rec)| to_example(line, rec, k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        num_aspects: k,
        examples,
    })
}

pub fn load_jsonl(path: &Path, num_aspects: Option<usize>) -> Result<Dataset, JsonlError> {
    let io = |source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut text = String::new();
    for line in BufReader::new(File::open(path).map_err(io)?).lines() {
        text.push_str(&line.map_err(io)?);
        text.push('\n');
    }
    let ds = parse_jsonl(&text, num_aspects)?;
    if ds.examples.is_empty() {
        return Err(JsonlError::Empty {
            path: path.display().to_string(),
        });
    }
    Ok(ds)
}

fn to_record(ex: &MultiAspectExample) -> Record {
    let labels = ex
        .labels
        .iter()
        .enumerate()
        .filter_map(|(a, l)| l.map(|l| (a.to_string(), serde_json::Value::from(l))))
        .collect();
    let rationales = ex
        .rationales
        .iter()
        .enumerate()
        .filter_map(|(a, r)| {
            r.as_ref()
                .map(|r| (a.to_string(), r.iter().map(|&b| serde_json::Value::from(b)).collect()))
        })
        .collect();
    Record {
        tokens: ex.tokens.clone(),
        labels,
        rationales,
    }
}

pub fn write_jsonl(data: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    for ex in &data.examples {
        serde_json::to_writer(&mut *out, &to_record(ex))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_jsonl(data: &Dataset, path: &Path) -> Result<(), JsonlError> {
    let io = |source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_jsonl(data, &mut w).map_err(io)?;
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_record() {
        let ds = parse_jsonl(r#"{"tokens": ["a", "b"], "labels": {"1": 0}}"#, None).unwrap();
        assert_eq!(ds.num_aspects, 2);
        assert_eq!(ds.examples[0].labels, vec![None, Some(0)]);
        assert_eq!(ds.examples[0].rationales, vec![None, None]);
    }

    #[test]
    fn reports_line_and_field() {
        let text = "{\"tokens\": [\"a\"], \"labels\": {\"0\": 1}}\n{\"tokens\": [\"a\", \"b\"], \"labels\": {\"0\": 1}, \"rationales\": {\"0\": [1]}}\n";
        match parse_jsonl(text, None) {
            Err(JsonlError::Schema { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "rationales.0");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_non_binary_rationale_and_bad_keys() {
        let bad_bit = r#"{"tokens": ["a"], "labels": {"0": 1}, "rationales": {"0": [2]}}"#;
        assert!(matches!(parse_jsonl(bad_bit, None), Err(JsonlError::Schema { field, .. }) if field == "rationales.0[0]"));
        let bad_key = r#"{"tokens": ["a"], "labels": {"x": 1}}"#;
        assert!(matches!(parse_jsonl(bad_key, None), Err(JsonlError::Schema { field, .. }) if field == "labels.x"));
        let missing = r#"{"labels": {"0": 1}}"#;
        assert!(matches!(parse_jsonl(missing, None), Err(JsonlError::Schema { line: 1, .. })));
        let unlabeled = r#"{"tokens": ["a"], "labels": {}}"#;
        assert!(matches!(parse_jsonl(unlabeled, None), Err(JsonlError::Schema { field, .. }) if field == "labels"));
    }

    #[test]
    fn explicit_aspect_count_bounds_keys() {
        let text = r#"{"tokens": ["a"], "labels": {"3": 1}}"#;
        assert!(parse_jsonl(text, Some(2)).is_err());
        assert_eq!(parse_jsonl(text, Some(5)).unwrap().num_aspects, 5);
    }
}
