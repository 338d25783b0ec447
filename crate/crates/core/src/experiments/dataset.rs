use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ExperimentError, Result};
use crate::inject::{select_contexts, RankedContext};
use crate::retrieval::ContextRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StanceInstance {
    pub id: String,
    pub text: String,
    pub target: String,
    /// Index into the dataset's label scheme.
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contexts: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelScheme {
    pub labels: Vec<String>,
}

impl LabelScheme {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<StanceInstance>,
    pub scheme: LabelScheme,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    parse_dataset(&text, path)
}

struct RawLine {
    line: usize,
    id: String,
    text: String,
    target: String,
    label: String,
    contexts: Option<Vec<String>>,
}

fn string_field(
    obj: &serde_json::Map<String, Value>,
    key: &str,
) -> std::result::Result<String, String> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) if key == "id" => Ok(n.to_string()),
        Some(_) => Err(format!("field `{key}` must be a string")),
        None => Err(format!("missing field `{key}`")),
    }
}

/// JSON Lines of `{id, text, target, label}` with optional `contexts`. An
/// optional first line `{"_schema": {"labels": [...]}}` fixes the label
/// order; otherwise labels are the sorted distinct values.
pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, message: String| ExperimentError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut declared: Option<Vec<String>> = None;
    let mut raw = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| err(n, e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| err(n, "expected a JSON object".into()))?;
        if let Some(schema) = obj.get("_schema") {
            if declared.is_some() || !raw.is_empty() {
                return Err(err(n, "schema header must be the first record".into()));
            }
            let labels: Vec<String> = schema
                .get("labels")
                .and_then(|l| serde_json::from_value(l.clone()).ok())
                .ok_or_else(|| err(n, "schema needs a `labels` string array".into()))?;
            if labels.is_empty() || labels.iter().collect::<BTreeSet<_>>().len() != labels.len() {
                return Err(err(
                    n,
                    "schema labels must be non-empty and distinct".into(),
                ));
            }
            declared = Some(labels);
            continue;
        }
        let get = |k| string_field(obj, k).map_err(|m| err(n, m));
        let id = get("id")?;
        if !seen.insert(id.clone()) {
            return Err(err(n, format!("duplicate id {id:?}")));
        }
        let contexts = match obj.get("contexts") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                serde_json::from_value(v.clone())
                    .map_err(|_| err(n, "`contexts` must be a string array".into()))?,
            ),
        };
        raw.push(RawLine {
            line: n,
            id,
            text: get("text")?,
            target: get("target")?,
            label: get("label")?,
            contexts,
        });
    }
    let scheme = LabelScheme {
        labels: declared.unwrap_or_else(|| {
            raw.iter()
                .map(|r| r.label.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        }),
    };
    let instances = raw
        .into_iter()
        .map(|r| {
            let label = scheme
                .index(&r.label)
                .ok_or_else(|| err(r.line, format!("unknown label {:?}", r.label)))?;
            Ok(StanceInstance {
                id: r.id,
                text: r.text,
                target: r.target,
                label,
                contexts: r.contexts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { instances, scheme })
}

/// Replace each instance's contexts with the best `m` cached candidates for
/// its id. Instances absent from the cache get an empty list. Returns how
/// many instances had no cache entry.
pub fn attach_contexts(
    instances: &mut [StanceInstance],
    records: &[ContextRecord],
    m: usize,
) -> usize {
    let by_id: HashMap<&str, &ContextRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut missing = 0;
    for inst in instances {
        let ranked: Vec<RankedContext> = match by_id.get(inst.id.as_str()) {
            Some(r) => r
                .candidates
                .iter()
                .map(|c| RankedContext {
                    text: c.text.clone(),
                    score: c.score,
                })
                .collect(),
            None => {
                missing += 1;
                Vec::new()
            }
        };
        inst.contexts = Some(select_contexts(&ranked, m));
    }
    missing
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{ContextSource, ScoredText};

    fn parse(s: &str) -> Result<Dataset> {
        parse_dataset(s, Path::new("d.jsonl"))
    }

    #[test]
    fn two_lines_infer_scheme() {
        let d = parse(
            r#"{"id":"1","text":"a","target":"t","label":"pro"}
{"id":2,"text":"b","target":"t","label":"con"}
"#,
        )
        .unwrap();
        assert_eq!(d.scheme.labels, ["con", "pro"]);
        assert_eq!(d.instances[0].label, 1);
        assert_eq!(d.instances[1].id, "2");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let dup = "{\"id\":\"1\",\"text\":\"a\",\"target\":\"t\",\"label\":\"x\"}\n{\"id\":\"1\",\"text\":\"a\",\"target\":\"t\",\"label\":\"x\"}";
        assert!(
            matches!(parse(dup), Err(ExperimentError::Parse { line: 2, message, .. }) if message.contains("duplicate"))
        );
        let missing = "{\"id\":\"1\",\"text\":\"a\",\"label\":\"x\"}";
        assert!(
            matches!(parse(missing), Err(ExperimentError::Parse { line: 1, message, .. }) if message.contains("target"))
        );
        let unknown = "{\"_schema\":{\"labels\":[\"pro\",\"con\"]}}\n\n{\"id\":\"1\",\"text\":\"a\",\"target\":\"t\",\"label\":\"neutral\"}";
        assert!(
            matches!(parse(unknown), Err(ExperimentError::Parse { line: 3, message, .. }) if message.contains("neutral"))
        );
    }

    #[test]
    fn example_instance_round_trips() {
        let line = r#"{"_schema":{"labels":["Con","Pro"]}}
{"id":"fig1","text":"Creates a sense of school spirit.","target":"School Uniforms","label":"Pro","contexts":["school spirit is the enthusiasm and pride felt by the students of a school","a strong sense of school spirit is a positive and uplifting influence on the school and its students"]}"#;
        let d = parse(line).unwrap();
        let inst = &d.instances[0];
        assert_eq!(inst.target, "School Uniforms");
        assert_eq!(d.scheme.labels[inst.label], "Pro");
        assert_eq!(inst.contexts.as_ref().unwrap().len(), 2);
        let back: StanceInstance =
            serde_json::from_str(&serde_json::to_string(inst).unwrap()).unwrap();
        assert_eq!(&back, inst);
    }

    #[test]
    fn contexts_join_by_id() {
        let mut d = parse(
            r#"{"id":"1","text":"a","target":"t","label":"x"}
{"id":"2","text":"b","target":"t","label":"x"}"#,
        )
        .unwrap();
        let rec = ContextRecord {
            id: "1".into(),
            source: ContextSource::Causal,
            candidates: vec![
                ScoredText {
                    text: "low".into(),
                    score: 0.1,
                },
                ScoredText {
                    text: "high".into(),
                    score: 0.9,
                },
                ScoredText {
                    text: "mid".into(),
                    score: 0.5,
                },
            ],
            dataset: None,
        };
        assert_eq!(attach_contexts(&mut d.instances, &[rec], 2), 1);
        assert_eq!(d.instances[0].contexts.as_deref().unwrap(), ["high", "mid"]);
        assert_eq!(
            d.instances[1].contexts.as_deref().unwrap(),
            [] as [String; 0]
        );
    }
}
