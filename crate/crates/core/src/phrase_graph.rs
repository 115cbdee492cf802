//! Rule-based key-phrase construction from RadGraph-style annotations.
//!
//! Entities joined by `modify` relations form one graph; `located_at` and
//! `suggestive_of` never merge graphs. Each graph becomes one phrase whose
//! tokens are ordered by source position. Graphs containing a definitely
//! absent observation get a `no ` prefix, otherwise graphs with an uncertain
//! observation get `maybe `.
//!
//! The input schema, one JSON object per document:
//!
//! ```json
//! {"id": "doc-1",
//!  "entities": [{"id": "e1", "tokens": "effusion", "start": 3, "label": "OBS-DA"}],
//!  "relations": [{"source": "e1", "target": "e2", "kind": "modify"}]}
//! ```
//!
//! `id` is optional.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntityLabel {
    #[serde(rename = "ANAT-DP")]
    AnatomyPresent,
    #[serde(rename = "OBS-DP")]
    ObservationPresent,
    #[serde(rename = "OBS-DA")]
    ObservationAbsent,
    #[serde(rename = "OBS-U")]
    ObservationUncertain,
}

impl EntityLabel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ANAT-DP" => Some(Self::AnatomyPresent),
            "OBS-DP" => Some(Self::ObservationPresent),
            "OBS-DA" => Some(Self::ObservationAbsent),
            "OBS-U" => Some(Self::ObservationUncertain),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::AnatomyPresent => "ANAT-DP",
            Self::ObservationPresent => "OBS-DP",
            Self::ObservationAbsent => "OBS-DA",
            Self::ObservationUncertain => "OBS-U",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    Modify,
    LocatedAt,
    SuggestiveOf,
}

impl RelationKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "modify" => Some(Self::Modify),
            "located_at" => Some(Self::LocatedAt),
            "suggestive_of" => Some(Self::SuggestiveOf),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: String,
    pub tokens: String,
    pub token_start: usize,
    pub label: EntityLabel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub source: String,
    pub target: String,
    pub kind: RelationKind,
}

/// A connected component of entities under `modify` edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseGraph {
    /// Sorted by `token_start`.
    pub entities: Vec<Entity>,
    /// Only `modify` relations internal to this component.
    pub edges: Vec<Relation>,
}

/// The retrieval atom: a short clinically meaningful phrase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPhrase {
    pub text: String,
    pub source_graph: Option<PhraseGraph>,
}

impl KeyPhrase {
    /// A phrase with no graph provenance. Surrounding whitespace is trimmed.
    pub fn new(text: impl AsRef<str>) -> Result<Self> {
        let text = text.as_ref().trim();
        if text.is_empty() {
            return Err(Error::validation("key phrase text is empty"));
        }
        Ok(Self {
            text: text.to_owned(),
            source_graph: None,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

impl fmt::Display for KeyPhrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// One parsed annotation document.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnnotationDoc {
    pub id: Option<String>,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

/// Parses a single JSON annotation document.
///
/// Every relation endpoint must resolve to an entity in the same document.
pub fn parse_annotation(json: &str) -> Result<AnnotationDoc> {
    let value: Value = serde_json::from_str(json).map_err(|e| Error::parse("document", e))?;
    parse_annotation_value(&value)
}

pub fn parse_annotation_value(value: &Value) -> Result<AnnotationDoc> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::parse("document", "expected a JSON object"))?;

    let id = match obj.get("id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => return Err(Error::parse("id", format!("expected string, got {other}"))),
    };

    let mut entities = Vec::new();
    for (i, raw) in array_field(obj, "entities")?.iter().enumerate() {
        let ctx = format!("entities[{i}]");
        let id = str_field(raw, "id", &ctx)?;
        let tokens = str_field(raw, "tokens", &ctx)?;
        let start = raw
            .get("start")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::parse(&ctx, "missing or invalid non-negative integer `start`"))?;
        let label_str = str_field(raw, "label", &ctx)?;
        let label = EntityLabel::parse(&label_str)
            .ok_or_else(|| Error::validation(format!("{ctx}: unknown entity label `{label_str}`")))?;
        if tokens.trim().is_empty() {
            return Err(Error::validation(format!("{ctx}: empty tokens")));
        }
        entities.push(Entity {
            id,
            tokens,
            token_start: start as usize,
            label,
        });
    }

    let mut index: HashMap<&str, usize> = HashMap::with_capacity(entities.len());
    for (i, e) in entities.iter().enumerate() {
        if index.insert(e.id.as_str(), i).is_some() {
            return Err(Error::validation(format!("entities[{i}]: duplicate id `{}`", e.id)));
        }
    }

    let mut relations = Vec::new();
    for (i, raw) in array_field(obj, "relations")?.iter().enumerate() {
        let ctx = format!("relations[{i}]");
        let source = str_field(raw, "source", &ctx)?;
        let target = str_field(raw, "target", &ctx)?;
        let kind_str = str_field(raw, "kind", &ctx)?;
        let kind = RelationKind::parse(&kind_str)
            .ok_or_else(|| Error::validation(format!("{ctx}: unknown relation kind `{kind_str}`")))?;
        for endpoint in [&source, &target] {
            if !index.contains_key(endpoint.as_str()) {
                return Err(Error::validation(format!(
                    "{ctx}: relation references missing entity `{endpoint}`"
                )));
            }
        }
        if source == target {
            return Err(Error::validation(format!("{ctx}: self-relation on `{source}`")));
        }
        relations.push(Relation {
            source,
            target,
            kind,
        });
    }

    Ok(AnnotationDoc {
        id,
        entities,
        relations,
    })
}

fn array_field<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Result<&'a [Value]> {
    match obj.get(key) {
        Some(Value::Array(items)) => Ok(items),
        Some(_) => Err(Error::parse(key, "expected an array")),
        None => Err(Error::parse(key, "missing field")),
    }
}

fn str_field(raw: &Value, key: &str, ctx: &str) -> Result<String> {
    raw.get(key)
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| Error::parse(ctx, format!("missing or non-string `{key}`")))
}

/// Reads a JSON-lines annotation stream. Blank lines are skipped; errors carry
/// the 1-based line number.
pub fn read_annotation_lines<R: BufRead>(reader: R) -> Result<Vec<(usize, AnnotationDoc)>> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let doc = parse_annotation(&line).map_err(|e| match e {
            Error::Parse { context, message } => Error::Parse {
                context: format!("line {lineno}, {context}"),
                message,
            },
            Error::Validation(m) => Error::Validation(format!("line {lineno}: {m}")),
            other => other,
        })?;
        docs.push((lineno, doc));
    }
    Ok(docs)
}

/// Groups entities into connected components over `modify` edges.
///
/// Components are emitted in order of their smallest `token_start`; entities
/// inside a component are sorted by `token_start`, ties by input order.
pub fn build_graphs(entities: &[Entity], relations: &[Relation]) -> Vec<PhraseGraph> {
    let n = entities.len();
    let index: HashMap<&str, usize> = entities
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.as_str(), i))
        .collect();

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    let modify: Vec<(usize, usize, &Relation)> = relations
        .iter()
        .filter(|r| r.kind == RelationKind::Modify)
        .filter_map(|r| Some((*index.get(r.source.as_str())?, *index.get(r.target.as_str())?, r)))
        .collect();
    for &(a, b, _) in &modify {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }

    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        let k = *slot.entry(root).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[k].push(i);
    }

    for m in &mut members {
        m.sort_by_key(|&i| (entities[i].token_start, i));
    }
    members.sort_by_key(|m| (entities[m[0]].token_start, m[0]));

    members
        .into_iter()
        .map(|m| {
            let root = find(&mut parent, m[0]);
            let edges = modify
                .iter()
                .filter(|&&(a, _, _)| find(&mut parent, a) == root)
                .map(|&(_, _, r)| r.clone())
                .collect();
            PhraseGraph {
                entities: m.into_iter().map(|i| entities[i].clone()).collect(),
                edges,
            }
        })
        .collect()
}

/// Renders a graph as a phrase. Absence outranks uncertainty when both occur.
pub fn graph_to_phrase(graph: &PhraseGraph) -> Result<KeyPhrase> {
    if graph.entities.is_empty() {
        return Err(Error::validation("cannot build a phrase from an empty graph"));
    }
    let mut ordered: Vec<&Entity> = graph.entities.iter().collect();
    ordered.sort_by_key(|e| e.token_start);

    let body = ordered
        .iter()
        .map(|e| e.tokens.trim())
        .collect::<Vec<_>>()
        .join(" ");
    let has = |label| graph.entities.iter().any(|e| e.label == label);
    let prefix = if has(EntityLabel::ObservationAbsent) {
        "no "
    } else if has(EntityLabel::ObservationUncertain) {
        "maybe "
    } else {
        ""
    };

    Ok(KeyPhrase {
        text: format!("{prefix}{body}"),
        source_graph: Some(graph.clone()),
    })
}

/// Parses nothing; runs grouping and rendering on an already parsed document.
/// Duplicates are kept.
pub fn extract_radgraph_phrases(doc: &AnnotationDoc) -> Result<Vec<KeyPhrase>> {
    build_graphs(&doc.entities, &doc.relations)
        .iter()
        .map(graph_to_phrase)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(id: &str, tokens: &str, start: usize, label: EntityLabel) -> Entity {
        Entity {
            id: id.into(),
            tokens: tokens.into(),
            token_start: start,
            label,
        }
    }

    fn rel(s: &str, t: &str, kind: RelationKind) -> Relation {
        Relation {
            source: s.into(),
            target: t.into(),
            kind,
        }
    }

    use EntityLabel::*;
    use RelationKind::*;

    #[test]
    fn parse_empty_document() {
        let doc = parse_annotation(r#"{"entities": [], "relations": []}"#).unwrap();
        assert!(doc.entities.is_empty());
        assert!(doc.relations.is_empty());
    }

    #[test]
    fn parse_single_entity() {
        let doc = parse_annotation(
            r#"{"entities": [{"id": "e1", "tokens": "cardiomegaly", "start": 7, "label": "OBS-DP"}], "relations": []}"#,
        )
        .unwrap();
        assert_eq!(
            doc.entities,
            vec![ent("e1", "cardiomegaly", 7, ObservationPresent)]
        );
        assert!(doc.relations.is_empty());
    }

    #[test]
    fn parse_rejects_dangling_relation() {
        let err = parse_annotation(
            r#"{"entities": [{"id": "e1", "tokens": "a", "start": 0, "label": "OBS-DP"}],
                "relations": [{"source": "e1", "target": "e9", "kind": "modify"}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("e9")), "{err}");
    }

    #[test]
    fn parse_rejects_unknown_label_and_kind() {
        let err = parse_annotation(
            r#"{"entities": [{"id": "e1", "tokens": "a", "start": 0, "label": "OBS-X"}], "relations": []}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));

        let err = parse_annotation(
            r#"{"entities": [{"id": "e1", "tokens": "a", "start": 0, "label": "OBS-DP"},
                             {"id": "e2", "tokens": "b", "start": 1, "label": "OBS-DP"}],
                "relations": [{"source": "e1", "target": "e2", "kind": "near"}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("relations[0]")));
    }

    #[test]
    fn parse_names_malformed_record() {
        let err = parse_annotation(
            r#"{"entities": [{"id": "e1", "tokens": "a", "start": 0, "label": "OBS-DP"},
                             {"id": "e2", "start": 1, "label": "OBS-DP"}], "relations": []}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("entities[1]"), "{err}");
    }

    #[test]
    fn modify_merges() {
        let es = [
            ent("a", "mild", 0, ObservationPresent),
            ent("b", "cardiomegaly", 1, ObservationPresent),
        ];
        let gs = build_graphs(&es, &[rel("a", "b", Modify)]);
        assert_eq!(gs.len(), 1);
        assert_eq!(gs[0].entities.len(), 2);
        assert_eq!(gs[0].edges.len(), 1);
    }

    #[test]
    fn located_at_does_not_merge() {
        let es = [
            ent("a", "opacity", 0, ObservationPresent),
            ent("b", "lobe", 3, AnatomyPresent),
        ];
        let gs = build_graphs(&es, &[rel("a", "b", LocatedAt)]);
        assert_eq!(gs.len(), 2);
        assert!(gs.iter().all(|g| g.entities.len() == 1 && g.edges.is_empty()));
    }

    #[test]
    fn isolated_entities() {
        let es = [
            ent("a", "x", 2, ObservationPresent),
            ent("b", "y", 0, ObservationPresent),
            ent("c", "z", 1, ObservationPresent),
        ];
        let gs = build_graphs(&es, &[]);
        let firsts: Vec<_> = gs.iter().map(|g| g.entities[0].tokens.as_str()).collect();
        assert_eq!(firsts, ["y", "z", "x"]);
    }

    #[test]
    fn prefixes() {
        let g = |es: Vec<Entity>| PhraseGraph {
            entities: es,
            edges: vec![],
        };
        assert_eq!(
            graph_to_phrase(&g(vec![ent("a", "effusion", 0, ObservationAbsent)])).unwrap().text,
            "no effusion"
        );
        assert_eq!(
            graph_to_phrase(&g(vec![ent("a", "opacity", 0, ObservationUncertain)])).unwrap().text,
            "maybe opacity"
        );
        assert_eq!(
            graph_to_phrase(&g(vec![
                ent("b", "cardiomegaly", 3, ObservationPresent),
                ent("a", "mild", 2, ObservationPresent),
            ]))
            .unwrap()
            .text,
            "mild cardiomegaly"
        );
        // absence wins over uncertainty
        assert_eq!(
            graph_to_phrase(&g(vec![
                ent("a", "focal", 0, ObservationUncertain),
                ent("b", "consolidation", 1, ObservationAbsent),
            ]))
            .unwrap()
            .text,
            "no focal consolidation"
        );
        assert!(graph_to_phrase(&g(vec![])).is_err());
    }

    #[test]
    fn extract_composes() {
        let doc = parse_annotation(
            r#"{"entities": [
                {"id": "1", "tokens": "pleural", "start": 1, "label": "ANAT-DP"},
                {"id": "2", "tokens": "effusion", "start": 2, "label": "OBS-DA"}],
               "relations": [{"source": "2", "target": "1", "kind": "located_at"}]}"#,
        )
        .unwrap();
        let texts: Vec<_> = extract_radgraph_phrases(&doc)
            .unwrap()
            .into_iter()
            .map(|p| p.text)
            .collect();
        assert_eq!(texts, ["pleural", "no effusion"]);

        assert!(extract_radgraph_phrases(&AnnotationDoc::default()).unwrap().is_empty());
    }

    #[test]
    fn two_modify_pairs_in_order() {
        let es = [
            ent("c", "small", 5, ObservationPresent),
            ent("d", "atelectasis", 6, ObservationPresent),
            ent("a", "mild", 0, ObservationPresent),
            ent("b", "edema", 1, ObservationPresent),
        ];
        let doc = AnnotationDoc {
            id: None,
            entities: es.to_vec(),
            relations: vec![rel("a", "b", Modify), rel("c", "d", Modify)],
        };
        let texts: Vec<_> = extract_radgraph_phrases(&doc)
            .unwrap()
            .into_iter()
            .map(|p| p.text)
            .collect();
        assert_eq!(texts, ["mild edema", "small atelectasis"]);
    }

    #[test]
    fn read_lines_reports_line_number() {
        let input = "{\"entities\": [], \"relations\": []}\n\n{not json}\n";
        let err = read_annotation_lines(input.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
