//! Reading MQuAKE-T-style source files into [`SourceRecord`]s, then cleaning
//! and deduplicating them.
//!
//! Accepted field spellings (first match wins):
//!
//! | record field           | source keys                                |
//! |------------------------|--------------------------------------------|
//! | question variants      | `questions` (array) or `question` (string) |
//! | final answer           | `new_answer`, `answer`                     |
//! | final answer aliases   | `new_answer_alias`, `answer_alias`         |
//! | hop chain              | `new_single_hops`, `single_hops`           |
//! | edits                  | `requested_rewrite`                        |
//!
//! Every other key is kept in `extras`. Hops and rewrite entries keep their own
//! unmapped keys too, so emitting a parsed file loses nothing.

use crate::model::{self, EditSpec, FactTriple, HopStep, Rule, SourceRecord, Violation};
use crate::scoring::normalize;
use serde_json::{Map, Value};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed dataset at line {line}, column {column}: {message}")]
    Malformed {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("case {case_index}: missing required field `{field}`")]
    MissingField { case_index: usize, field: String },

    #[error("case {case_index}: field `{field}` {problem}")]
    InvalidField {
        case_index: usize,
        field: String,
        problem: String,
    },
}

/// Reads and parses a source dataset file.
pub fn parse_source(path: &Path) -> Result<Vec<SourceRecord>, IngestError> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => IngestError::NotFound(path.to_path_buf()),
        _ => IngestError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    parse_bytes(&bytes)
}

/// Parses dataset bytes: a JSON array of case objects.
pub fn parse_bytes(bytes: &[u8]) -> Result<Vec<SourceRecord>, IngestError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| IngestError::Malformed {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    parse_value(value)
}

/// Parses an already-decoded dataset value.
pub fn parse_value(value: Value) -> Result<Vec<SourceRecord>, IngestError> {
    let Value::Array(cases) = value else {
        return Err(IngestError::Malformed {
            line: 1,
            column: 1,
            message: "expected a top-level array of case objects".into(),
        });
    };
    let width = ordinal_width(cases.len());
    cases
        .into_iter()
        .enumerate()
        .map(|(i, case)| match case {
            Value::Object(obj) => parse_case(i, width, obj),
            _ => Err(invalid(i, "<case>", "must be an object")),
        })
        .collect()
}

fn ordinal_width(n: usize) -> usize {
    n.to_string().len().max(6)
}

fn invalid(case_index: usize, field: &str, problem: &str) -> IngestError {
    IngestError::InvalidField {
        case_index,
        field: field.to_string(),
        problem: problem.to_string(),
    }
}

fn missing(case_index: usize, field: &str) -> IngestError {
    IngestError::MissingField {
        case_index,
        field: field.to_string(),
    }
}

/// Removes the first present key among `keys`. Later spellings stay in the map (and end up in extras).
fn take_first(obj: &mut Map<String, Value>, keys: &[&str]) -> Option<Value> {
    keys.iter().find_map(|k| obj.shift_remove(*k))
}

fn as_text(v: Value, case: usize, field: &str) -> Result<String, IngestError> {
    match v {
        Value::String(s) => Ok(s),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(invalid(case, field, "must be a string")),
    }
}

fn as_text_list(v: Value, case: usize, field: &str) -> Result<Vec<String>, IngestError> {
    match v {
        Value::Array(items) => items
            .into_iter()
            .map(|item| as_text(item, case, field))
            .collect(),
        Value::Null => Ok(Vec::new()),
        _ => Err(invalid(case, field, "must be an array of strings")),
    }
}

fn parse_case(i: usize, width: usize, mut obj: Map<String, Value>) -> Result<SourceRecord, IngestError> {
    let case_id = match obj.shift_remove("case_id") {
        Some(Value::Null) | None => format!("{:0width$}", i + 1),
        Some(v) => as_text(v, i, "case_id")?,
    };

    let question_variants = match take_first(&mut obj, &["questions", "question"]) {
        Some(Value::String(q)) => vec![q],
        Some(v) => as_text_list(v, i, "questions")?,
        None => return Err(missing(i, "question_variants")),
    };

    let final_answer = take_first(&mut obj, &["new_answer", "answer"])
        .ok_or_else(|| missing(i, "final_answer"))
        .and_then(|v| as_text(v, i, "final_answer"))?;

    let final_answer_aliases = take_first(&mut obj, &["new_answer_alias", "answer_alias"])
        .map(|v| as_text_list(v, i, "final_answer_aliases"))
        .transpose()?
        .unwrap_or_default();

    let (hops_key, hops) = ["new_single_hops", "single_hops"]
        .iter()
        .find_map(|k| obj.shift_remove(*k).map(|v| (*k, v)))
        .ok_or_else(|| missing(i, "hop_chain"))?;
    let Value::Array(hops) = hops else {
        return Err(invalid(i, hops_key, "must be an array"));
    };
    let fallback = labelled_chain_triples(&obj, hops_key, hops.len());
    let hop_chain = hops
        .into_iter()
        .enumerate()
        .map(|(pos, h)| parse_hop(i, pos, h, fallback.as_ref().map(|t| &t[pos])))
        .collect::<Result<Vec<_>, _>>()?;

    let edits = match obj.shift_remove("requested_rewrite") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .into_iter()
            .enumerate()
            .map(|(k, e)| parse_edit(i, k, e))
            .collect::<Result<Vec<_>, _>>()?,
        Some(single @ Value::Object(_)) => vec![parse_edit(i, 0, single)?],
        Some(_) => return Err(invalid(i, "requested_rewrite", "must be an array of objects")),
    };

    Ok(SourceRecord {
        case_id,
        question_variants,
        final_answer,
        final_answer_aliases,
        hop_chain,
        edits,
        extras: obj,
    })
}

/// Labelled triples from the `orig` block, used when hops carry no triple of their own.
fn labelled_chain_triples(obj: &Map<String, Value>, hops_key: &str, n: usize) -> Option<Vec<FactTriple>> {
    let key = if hops_key == "new_single_hops" {
        "new_triples_labeled"
    } else {
        "triples_labeled"
    };
    let rows = obj.get("orig")?.get(key)?.as_array()?;
    if rows.len() != n {
        return None;
    }
    rows.iter()
        .map(|row| {
            let parts = row.as_array()?;
            match parts.as_slice() {
                [s, r, o] => Some(FactTriple::new(s.as_str()?, r.as_str()?, o.as_str()?)),
                _ => None,
            }
        })
        .collect()
}

fn parse_triple(v: Value, case: usize, field: &str) -> Result<Option<FactTriple>, IngestError> {
    let text = |v: Option<Value>, f: &str| -> Result<String, IngestError> {
        v.ok_or_else(|| missing(case, &format!("{field}.{f}")))
            .and_then(|v| as_text(v, case, &format!("{field}.{f}")))
    };
    match v {
        Value::Null => Ok(None),
        Value::Array(parts) if parts.len() == 3 => {
            let mut it = parts.into_iter();
            Ok(Some(FactTriple {
                subject: text(it.next(), "subject")?,
                relation: text(it.next(), "relation")?,
                object: text(it.next(), "object")?,
            }))
        }
        Value::Object(mut m) => Ok(Some(FactTriple {
            subject: text(m.shift_remove("subject"), "subject")?,
            relation: text(m.shift_remove("relation"), "relation")?,
            object: text(m.shift_remove("object"), "object")?,
        })),
        _ => Err(invalid(case, field, "must be a [subject, relation, object] triple")),
    }
}

/// Question text for a hop that has a triple but no question of its own.
pub fn synthesize_hop_question(triple: &FactTriple) -> String {
    format!("What is the {} of {}?", triple.relation, triple.subject)
}

fn parse_hop(
    case: usize,
    pos: usize,
    v: Value,
    fallback: Option<&FactTriple>,
) -> Result<HopStep, IngestError> {
    let field = format!("hop_chain[{pos}]");
    let Value::Object(mut m) = v else {
        return Err(invalid(case, &field, "must be an object"));
    };
    let index = match m.shift_remove("index") {
        None | Some(Value::Null) => pos + 1,
        Some(v) => v
            .as_u64()
            .map(|n| n as usize)
            .ok_or_else(|| invalid(case, &format!("{field}.index"), "must be a positive integer"))?,
    };
    let triple = match m.shift_remove("triple") {
        Some(t) => parse_triple(t, case, &format!("{field}.triple"))?,
        None => fallback.cloned(),
    };
    let question = match m.shift_remove("question") {
        Some(q) => as_text(q, case, &format!("{field}.question"))?,
        None => triple
            .as_ref()
            .map(synthesize_hop_question)
            .ok_or_else(|| missing(case, &format!("{field}.question")))?,
    };
    let answer = m
        .shift_remove("answer")
        .ok_or_else(|| missing(case, &format!("{field}.answer")))
        .and_then(|v| as_text(v, case, &format!("{field}.answer")))?;
    let answer_aliases = m
        .shift_remove("answer_alias")
        .map(|v| as_text_list(v, case, &format!("{field}.answer_alias")))
        .transpose()?
        .unwrap_or_default();
    Ok(HopStep {
        index,
        question,
        answer,
        answer_aliases,
        triple,
        extras: m,
    })
}

/// Pulls the label out of a rewrite target, which is either a string or `{"str": ..}`.
/// Whatever else the target object holds is returned for pass-through.
fn target_label(v: Value, case: usize, field: &str) -> Result<(String, Option<Map<String, Value>>), IngestError> {
    match v {
        Value::Object(mut m) => {
            let label = m
                .shift_remove("str")
                .ok_or_else(|| missing(case, &format!("{field}.str")))
                .and_then(|v| as_text(v, case, &format!("{field}.str")))?;
            Ok((label, Some(m)))
        }
        other => Ok((as_text(other, case, field)?, None)),
    }
}

fn parse_edit(case: usize, k: usize, v: Value) -> Result<EditSpec, IngestError> {
    let field = format!("requested_rewrite[{k}]");
    let Value::Object(mut m) = v else {
        return Err(invalid(case, &field, "must be an object"));
    };
    let subject = m
        .shift_remove("subject")
        .ok_or_else(|| missing(case, &format!("{field}.subject")))
        .and_then(|v| as_text(v, case, &format!("{field}.subject")))?;
    let relation = take_first(&mut m, &["relation", "relation_id"])
        .ok_or_else(|| missing(case, &format!("{field}.relation")))
        .and_then(|v| as_text(v, case, &format!("{field}.relation")))?;
    let (old_object, old_rest) = m
        .shift_remove("target_true")
        .ok_or_else(|| missing(case, &format!("{field}.target_true")))
        .and_then(|v| target_label(v, case, &format!("{field}.target_true")))?;
    let (new_object, new_rest) = m
        .shift_remove("target_new")
        .ok_or_else(|| missing(case, &format!("{field}.target_new")))
        .and_then(|v| target_label(v, case, &format!("{field}.target_new")))?;
    // Residual target objects (e.g. entity ids) travel in extras under the original key.
    for (key, rest) in [("target_true", old_rest), ("target_new", new_rest)] {
        if let Some(rest) = rest.filter(|r| !r.is_empty()) {
            m.insert(key.into(), Value::Object(rest));
        }
    }
    Ok(EditSpec {
        subject,
        relation,
        old_object,
        new_object,
        extras: m,
    })
}

fn emit_edit(e: &EditSpec) -> Value {
    let mut out = Map::new();
    out.insert("subject".into(), e.subject.clone().into());
    out.insert("relation".into(), e.relation.clone().into());
    for (key, label) in [("target_true", &e.old_object), ("target_new", &e.new_object)] {
        let mut target = match e.extras.get(key) {
            Some(Value::Object(rest)) => rest.clone(),
            _ => Map::new(),
        };
        target.insert("str".into(), label.clone().into());
        out.insert(key.into(), Value::Object(target));
    }
    for (k, v) in &e.extras {
        if k != "target_true" && k != "target_new" {
            out.insert(k.clone(), v.clone());
        }
    }
    Value::Object(out)
}

fn emit_hop(h: &HopStep) -> Value {
    let mut out = Map::new();
    out.insert("index".into(), h.index.into());
    out.insert("question".into(), h.question.clone().into());
    out.insert("answer".into(), h.answer.clone().into());
    out.insert("answer_alias".into(), h.answer_aliases.clone().into());
    if let Some(t) = &h.triple {
        out.insert(
            "triple".into(),
            serde_json::json!({"subject": t.subject, "relation": t.relation, "object": t.object}),
        );
    }
    out.extend(h.extras.clone());
    Value::Object(out)
}

/// Renders a record in the preferred source spelling; [`parse_value`] reads it back unchanged.
pub fn record_to_value(r: &SourceRecord) -> Value {
    let mut out = Map::new();
    out.insert("case_id".into(), r.case_id.clone().into());
    out.insert("questions".into(), r.question_variants.clone().into());
    out.insert("new_answer".into(), r.final_answer.clone().into());
    out.insert("new_answer_alias".into(), r.final_answer_aliases.clone().into());
    out.insert(
        "new_single_hops".into(),
        Value::Array(r.hop_chain.iter().map(emit_hop).collect()),
    );
    out.insert(
        "requested_rewrite".into(),
        Value::Array(r.edits.iter().map(emit_edit).collect()),
    );
    out.extend(r.extras.clone());
    Value::Object(out)
}

/// Writes records as a source dataset file (pretty JSON, trailing newline).
pub fn emit_source(records: &[SourceRecord], path: &Path) -> Result<(), crate::Error> {
    let value = Value::Array(records.iter().map(record_to_value).collect());
    let mut text = serde_json::to_string_pretty(&value).expect("JSON values always serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| crate::Error::io(path, e))
}

/// Why a record was removed during cleaning.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropped {
    pub case_id: String,
    pub reasons: Vec<Violation>,
}

fn trim_in_place(s: &mut String) {
    let t = s.trim();
    if t.len() != s.len() {
        *s = t.to_string();
    }
}

fn trim_all(s: &mut [String]) {
    s.iter_mut().for_each(trim_in_place);
}

fn trim_record(r: &mut SourceRecord) {
    trim_in_place(&mut r.case_id);
    trim_all(&mut r.question_variants);
    trim_in_place(&mut r.final_answer);
    trim_all(&mut r.final_answer_aliases);
    for h in &mut r.hop_chain {
        trim_in_place(&mut h.question);
        trim_in_place(&mut h.answer);
        trim_all(&mut h.answer_aliases);
        if let Some(t) = &mut h.triple {
            trim_in_place(&mut t.subject);
            trim_in_place(&mut t.relation);
            trim_in_place(&mut t.object);
        }
    }
    for e in &mut r.edits {
        trim_in_place(&mut e.subject);
        trim_in_place(&mut e.relation);
        trim_in_place(&mut e.old_object);
        trim_in_place(&mut e.new_object);
    }
}

/// Trims every text field, then drops records that fail validation or reuse
/// an earlier case id. Extras are never touched.
pub fn clean_with_report(records: Vec<SourceRecord>) -> (Vec<SourceRecord>, Vec<Dropped>) {
    let mut kept = Vec::with_capacity(records.len());
    let mut dropped = Vec::new();
    let mut ids = HashSet::new();
    for mut r in records {
        trim_record(&mut r);
        let mut reasons = model::validate(&r);
        if ids.contains(&r.case_id) {
            reasons.push(Violation::new(
                "case_id",
                Rule::DuplicateCaseId,
                format!("{:?} already used", r.case_id),
            ));
        } else if reasons.is_empty() {
            ids.insert(r.case_id.clone());
        }
        if reasons.is_empty() {
            kept.push(r);
        } else {
            let joined: Vec<String> = reasons.iter().map(ToString::to_string).collect();
            tracing::warn!(case_id = %r.case_id, "dropping record: {}", joined.join("; "));
            dropped.push(Dropped {
                case_id: r.case_id,
                reasons,
            });
        }
    }
    (kept, dropped)
}

pub fn clean(records: Vec<SourceRecord>) -> Vec<SourceRecord> {
    clean_with_report(records).0
}

/// Key under which two records count as duplicates.
pub fn dedupe_key(r: &SourceRecord) -> String {
    format!("{}\u{1f}{}", normalize(r.primary_question()), r.final_answer)
}

/// Case ids removed by [`dedupe`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DedupeReport {
    pub dropped: Vec<String>,
}

/// Drops records whose key repeats an earlier record's key. First occurrence wins.
pub fn dedupe(records: Vec<SourceRecord>) -> (Vec<SourceRecord>, DedupeReport) {
    let mut seen = HashSet::new();
    let mut report = DedupeReport::default();
    let kept = records
        .into_iter()
        .filter_map(|r| {
            if seen.insert(dedupe_key(&r)) {
                Some(r)
            } else {
                tracing::debug!(case_id = %r.case_id, "dropping duplicate");
                report.dropped.push(r.case_id);
                None
            }
        })
        .collect();
    (kept, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::london;
    use serde_json::json;

    fn raw_case() -> Value {
        json!({
            "case_id": 7,
            "questions": ["Who is the head of government of the country where London is located?"],
            "answer": "Boris Johnson",
            "answer_alias": ["BoJo"],
            "new_answer": "Rishi Sunak",
            "new_answer_alias": ["Sunak"],
            "single_hops": [],
            "new_single_hops": [
                {"question": "Where is London located?", "cloze": "London is located in", "answer": "United Kingdom", "answer_alias": ["UK"]},
                {"question": "Who is the head of government of the United Kingdom?", "answer": "Rishi Sunak", "answer_alias": ["Sunak"]}
            ],
            "requested_rewrite": [{
                "prompt": "The head of government of {} is",
                "relation_id": "P6",
                "subject": "United Kingdom",
                "target_true": {"str": "Boris Johnson", "id": "Q180589"},
                "target_new": {"str": "Rishi Sunak", "id": "Q7297486"}
            }],
            "orig": {
                "new_triples_labeled": [
                    ["London", "country", "United Kingdom"],
                    ["United Kingdom", "head of government", "Rishi Sunak"]
                ]
            },
            "cf_flag": 1.50
        })
    }

    #[test]
    fn parses_one_case() {
        // json! goes through f64, so spell the number out in the source text
        let text = format!("[{}]", raw_case()).replace("\"cf_flag\":1.5", "\"cf_flag\":1.50");
        assert!(text.contains("1.50"));
        let records = parse_bytes(text.as_bytes()).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.case_id, "7");
        assert_eq!(r.hop_chain.len(), 2);
        assert_eq!(r.final_answer, "Rishi Sunak");
        assert_eq!(r.final_answer_aliases, vec!["Sunak"]);
        assert_eq!(r.hop_chain[0].answer_aliases, vec!["UK"]);
        assert_eq!(r.hop_chain[0].extras["cloze"], "London is located in");
        assert_eq!(
            r.hop_chain[1].triple,
            Some(FactTriple::new("United Kingdom", "head of government", "Rishi Sunak"))
        );
        assert_eq!(r.edits[0].old_object, "Boris Johnson");
        assert_eq!(r.edits[0].new_object, "Rishi Sunak");
        assert_eq!(r.edits[0].relation, "P6");
        // pre-edit fields and unknown fields survive as extras
        assert_eq!(r.extras["answer"], "Boris Johnson");
        assert_eq!(r.extras["single_hops"], json!([]));
        assert_eq!(r.extras["cf_flag"].to_string(), "1.50");
        assert!(model::validate(r).is_empty());
    }

    #[test]
    fn empty_array_is_empty() {
        assert!(parse_bytes(b"[]").unwrap().is_empty());
    }

    #[test]
    fn missing_answer_names_final_answer() {
        let mut case = raw_case();
        case.as_object_mut().unwrap().shift_remove("new_answer");
        case.as_object_mut().unwrap().shift_remove("answer");
        let err = parse_value(json!([raw_case(), case])).unwrap_err();
        match err {
            IngestError::MissingField { case_index, field } => {
                assert_eq!(case_index, 1);
                assert_eq!(field, "final_answer");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_syntax_reports_position() {
        let err = parse_bytes(b"[\n  {\"question\": }\n]").unwrap_err();
        match err {
            IngestError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_bytes(b"{}"), Err(IngestError::Malformed { .. })));
    }

    #[test]
    fn missing_file_is_reported() {
        let err = parse_source(Path::new("/definitely/not/here.json")).unwrap_err();
        assert!(matches!(err, IngestError::NotFound(_)));
    }

    #[test]
    fn fallback_spellings_and_synthesized_ids() {
        let case = json!({
            "question": "Q?",
            "answer": "B",
            "single_hops": [
                {"answer": "A", "triple": ["X", "r1", "A"]},
                {"question": "What about A?", "answer": "B"}
            ]
        });
        let r = parse_value(json!([case.clone(), case])).unwrap();
        assert_eq!(r[0].case_id, "000001");
        assert_eq!(r[1].case_id, "000002");
        assert_eq!(r[0].question_variants, vec!["Q?"]);
        assert_eq!(r[0].hop_chain[0].question, "What is the r1 of X?");
        assert!(r[0].edits.is_empty());
    }

    #[test]
    fn emitted_records_parse_back_identically() {
        let original = parse_value(json!([raw_case()])).unwrap();
        let again = parse_value(Value::Array(original.iter().map(record_to_value).collect())).unwrap();
        assert_eq!(original, again);
        // target ids are carried along
        let v = record_to_value(&original[0]);
        assert_eq!(v["requested_rewrite"][0]["target_new"]["id"], "Q7297486");
    }

    #[test]
    fn clean_trims_and_drops() {
        let mut padded = london();
        padded.final_answer = "  Rishi Sunak ".into();
        padded.hop_chain[1].answer = "Rishi Sunak  ".into();
        let mut broken = london();
        broken.case_id = "000002".into();
        broken.hop_chain[1].triple.as_mut().unwrap().subject = "France".into();
        let (kept, dropped) = clean_with_report(vec![padded, broken]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].final_answer, "Rishi Sunak");
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].case_id, "000002");
        assert_eq!(dropped[0].reasons[0].rule, model::Rule::ChainDisconnected);
    }

    #[test]
    fn clean_drops_repeated_case_ids() {
        let (kept, dropped) = clean_with_report(vec![london(), london()]);
        assert_eq!(kept.len(), 1);
        assert_eq!(dropped[0].reasons[0].rule, model::Rule::DuplicateCaseId);
    }

    #[test]
    fn clean_leaves_extras_alone() {
        let mut r = london();
        r.extras.insert("note".into(), json!("  padded  "));
        let kept = clean(vec![r]);
        assert_eq!(kept[0].extras["note"], "  padded  ");
    }

    #[test]
    fn dedupe_first_wins() {
        let a = london();
        let mut b = london();
        b.case_id = "b".into();
        b.question_variants = vec!["Something else?".into()];
        let mut a2 = london();
        a2.case_id = "a2".into();
        a2.question_variants = vec!["  who is the HEAD of government of the country where London is located".into()];
        let (kept, report) = dedupe(vec![a.clone(), b.clone(), a2]);
        assert_eq!(kept, vec![a, b]);
        assert_eq!(report.dropped, vec!["a2"]);

        let (kept, report) = dedupe(kept.clone());
        assert_eq!(kept.len(), 2);
        assert!(report.dropped.is_empty());
    }
}
