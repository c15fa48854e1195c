//! Editable triple store and chain walking.
//!
//! The store is a functional map `(subject, relation) -> object`. Keys are
//! compared on normalized text; objects keep their original spelling.
//! Every operation returns a new store, so a store is never mutated once built.

use crate::model::{EditSpec, FactTriple, SourceRecord};
use crate::scoring::{is_correct, normalize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Original,
    Edited,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreEntry {
    pub object: String,
    pub provenance: Provenance,
}

type Key = (String, String);

fn key(subject: &str, relation: &str) -> Key {
    (normalize(subject), normalize(relation))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripleStore {
    entries: BTreeMap<Key, StoreEntry>,
}

/// Two records disagreeing on the object of one key; the later one was kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conflict {
    pub subject: String,
    pub relation: String,
    pub previous: String,
    pub replacement: String,
    pub case_id: String,
}

impl TripleStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, subject: &str, relation: &str) -> Option<&str> {
        self.entry(subject, relation).map(|e| e.object.as_str())
    }

    pub fn entry(&self, subject: &str, relation: &str) -> Option<&StoreEntry> {
        self.entries.get(&key(subject, relation))
    }

    /// Returns the replaced object when the key already held a different one.
    fn insert(&mut self, t: &FactTriple, provenance: Provenance) -> Option<String> {
        let entry = StoreEntry {
            object: t.object.clone(),
            provenance,
        };
        self.entries
            .insert(key(&t.subject, &t.relation), entry)
            .filter(|old| normalize(&old.object) != normalize(&t.object))
            .map(|old| old.object)
    }

    /// Store holding exactly the given triples, all marked original. Later triples win on conflict.
    pub fn from_triples<'a, I>(triples: I) -> Self
    where
        I: IntoIterator<Item = &'a FactTriple>,
    {
        let mut store = Self::new();
        for t in triples {
            store.insert(t, Provenance::Original);
        }
        store
    }

    /// A new store with every edit applied, whether or not the pre-edit fact was present.
    pub fn apply_edits(&self, edits: &[EditSpec]) -> TripleStore {
        let mut next = self.clone();
        for e in edits {
            let t = FactTriple::new(&e.subject, &e.relation, &e.new_object);
            next.insert(&t, Provenance::Edited);
        }
        next
    }
}

/// Builds the store from every hop triple of every record.
pub fn build_store(records: &[SourceRecord]) -> (TripleStore, Vec<Conflict>) {
    let mut store = TripleStore::new();
    let mut conflicts = Vec::new();
    for r in records {
        for t in r.hop_chain.iter().filter_map(|h| h.triple.as_ref()) {
            if let Some(previous) = store.insert(t, Provenance::Original) {
                tracing::warn!(
                    case_id = %r.case_id,
                    subject = %t.subject,
                    relation = %t.relation,
                    "conflicting fact: {previous:?} replaced by {:?}",
                    t.object
                );
                conflicts.push(Conflict {
                    subject: t.subject.clone(),
                    relation: t.relation.clone(),
                    previous,
                    replacement: t.object.clone(),
                    case_id: r.case_id.clone(),
                });
            }
        }
    }
    (store, conflicts)
}

pub fn apply_edits(store: &TripleStore, edits: &[EditSpec]) -> TripleStore {
    store.apply_edits(edits)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WalkError {
    #[error("empty relation chain")]
    EmptyChain,

    #[error("hop {hop}: no fact for ({subject}, {relation})")]
    Unresolvable {
        /// 1-based.
        hop: usize,
        subject: String,
        relation: String,
    },
}

/// Follows `relations` from `start`, one lookup per hop, and returns the entity reached.
pub fn walk_chain<S: AsRef<str>>(
    store: &TripleStore,
    start: &str,
    relations: &[S],
) -> Result<String, WalkError> {
    if relations.is_empty() {
        return Err(WalkError::EmptyChain);
    }
    let mut current = start.to_string();
    for (i, rel) in relations.iter().enumerate() {
        let rel = rel.as_ref();
        match store.lookup(&current, rel) {
            Some(next) => current = next.to_string(),
            None => {
                return Err(WalkError::Unresolvable {
                    hop: i + 1,
                    subject: current,
                    relation: rel.to_string(),
                })
            }
        }
    }
    Ok(current)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("record {case_id} is not checkable: hop {hop} has no triple")]
pub struct NotCheckable {
    pub case_id: String,
    pub hop: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Consistency {
    pub passed: bool,
    pub expected: String,
    /// What the walk reached, if it got to the end.
    pub found: Option<String>,
    pub diagnostic: String,
}

/// Walks the record's own relation chain over `store` plus the record's edits and
/// compares the result with the record's final answer and aliases.
pub fn check_consistency(record: &SourceRecord, store: &TripleStore) -> Result<Consistency, NotCheckable> {
    let triples = record.chain_triples().ok_or_else(|| NotCheckable {
        case_id: record.case_id.clone(),
        hop: record
            .hop_chain
            .iter()
            .position(|h| h.triple.is_none())
            .map_or(0, |p| p + 1),
    })?;
    let Some(first) = triples.first() else {
        return Err(NotCheckable {
            case_id: record.case_id.clone(),
            hop: 0,
        });
    };
    let edited = store.apply_edits(&record.edits);
    let relations: Vec<&str> = triples.iter().map(|t| t.relation.as_str()).collect();
    let expected = record.final_answer.clone();
    Ok(match walk_chain(&edited, &first.subject, &relations) {
        Ok(found) => {
            let passed = is_correct(&found, &record.final_answer, &record.final_answer_aliases);
            let diagnostic = if passed {
                format!("chain reaches {found:?}")
            } else {
                format!("expected {expected:?}, chain reaches {found:?}")
            };
            Consistency {
                passed,
                expected,
                found: Some(found),
                diagnostic,
            }
        }
        Err(e) => Consistency {
            passed: false,
            expected,
            found: None,
            diagnostic: e.to_string(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    NotCheckable,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::NotCheckable => "NOT-CHECKABLE",
        })
    }
}

/// One line of an oracle check run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckRow {
    pub case_id: String,
    pub status: CheckStatus,
    pub expected: String,
    pub found: String,
    pub diagnostic: String,
}

/// Checks every record against a store built from all of them.
pub fn check_dataset(records: &[SourceRecord]) -> Vec<CheckRow> {
    let (store, _) = build_store(records);
    records
        .iter()
        .map(|r| match check_consistency(r, &store) {
            Ok(c) => CheckRow {
                case_id: r.case_id.clone(),
                status: if c.passed {
                    CheckStatus::Pass
                } else {
                    CheckStatus::Fail
                },
                expected: c.expected,
                found: c.found.unwrap_or_default(),
                diagnostic: c.diagnostic,
            },
            Err(e) => CheckRow {
                case_id: r.case_id.clone(),
                status: CheckStatus::NotCheckable,
                expected: r.final_answer.clone(),
                found: String::new(),
                diagnostic: e.to_string(),
            },
        })
        .collect()
}

/// Human-readable listing plus a summary count block.
pub fn render_check(rows: &[CheckRow]) -> String {
    let mut out = String::new();
    let mut counts = [0usize; 3];
    for r in rows {
        counts[r.status as usize] += 1;
        out.push_str(&format!("{}\t{}\t{}\n", r.case_id, r.status, r.diagnostic));
    }
    out.push_str(&format!(
        "\ntotal: {}\npass: {}\nfail: {}\nnot-checkable: {}\n",
        rows.len(),
        counts[0],
        counts[1],
        counts[2]
    ));
    out
}

/// CSV with columns `case_id,status,expected,found`.
pub fn write_check_csv(rows: &[CheckRow], path: &std::path::Path) -> Result<(), crate::Error> {
    let write = || -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["case_id", "status", "expected", "found"])?;
        for r in rows {
            w.write_record([
                r.case_id.as_str(),
                &r.status.to_string(),
                &r.expected,
                &r.found,
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| crate::Error::io(path, std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::london;
    use proptest::prelude::*;

    fn uk_store() -> TripleStore {
        TripleStore::from_triples(&[FactTriple::new(
            "United Kingdom",
            "head_of_government",
            "Boris Johnson",
        )])
    }

    fn uk_edit() -> EditSpec {
        EditSpec::new("United Kingdom", "head_of_government", "Boris Johnson", "Rishi Sunak")
    }

    #[test]
    fn empty_inputs() {
        let (store, conflicts) = build_store(&[]);
        assert!(store.is_empty());
        assert!(conflicts.is_empty());
        let s = uk_store();
        assert_eq!(s.apply_edits(&[]), s);
    }

    #[test]
    fn one_record_two_triples() {
        let (store, conflicts) = build_store(&[london()]);
        assert_eq!(store.len(), 2);
        assert!(conflicts.is_empty());
        let e = store.entry("London", "country").unwrap();
        assert_eq!(e.provenance, Provenance::Original);
    }

    #[test]
    fn edit_replaces_head_of_government() {
        let before = uk_store();
        let after = before.apply_edits(&[uk_edit()]);
        assert_eq!(after.lookup("United Kingdom", "head_of_government"), Some("Rishi Sunak"));
        assert_eq!(after.entry("united kingdom", "head_of_government").unwrap().provenance, Provenance::Edited);
        // the input store is untouched
        assert_eq!(before.lookup("United Kingdom", "head_of_government"), Some("Boris Johnson"));
        assert_eq!(
            walk_chain(&after, "UK", &["head_of_government"]),
            Err(WalkError::Unresolvable {
                hop: 1,
                subject: "UK".into(),
                relation: "head_of_government".into()
            })
        );
        assert_eq!(
            walk_chain(&after, "United Kingdom", &["head_of_government"]).unwrap(),
            "Rishi Sunak"
        );
    }

    #[test]
    fn edits_apply_to_absent_keys() {
        let s = TripleStore::new().apply_edits(&[uk_edit()]);
        assert_eq!(s.lookup("United Kingdom", "head_of_government"), Some("Rishi Sunak"));
    }

    #[test]
    fn keys_match_on_normalized_text() {
        let s = uk_store();
        assert_eq!(s.lookup("  the united KINGDOM.", "Head_of_Government"), Some("Boris Johnson"));
    }

    #[test]
    fn walk_errors() {
        let s = uk_store();
        let empty: [&str; 0] = [];
        assert_eq!(walk_chain(&s, "United Kingdom", &empty), Err(WalkError::EmptyChain));
        assert!(matches!(
            walk_chain(&s, "France", &["capital"]),
            Err(WalkError::Unresolvable { hop: 1, .. })
        ));
    }

    #[test]
    fn consistency_pass_fail_and_not_checkable() {
        let r = london();
        let (store, _) = build_store(std::slice::from_ref(&r));
        let c = check_consistency(&r, &store).unwrap();
        assert!(c.passed, "{c:?}");

        let mut bad = r.clone();
        bad.final_answer = "xq7 zz".into();
        bad.final_answer_aliases.clear();
        let c = check_consistency(&bad, &store).unwrap();
        assert!(!c.passed);
        assert_eq!(c.expected, "xq7 zz");
        assert_eq!(c.found.as_deref(), Some("Rishi Sunak"));
        assert!(c.diagnostic.contains("xq7 zz") && c.diagnostic.contains("Rishi Sunak"));

        let mut bare = r.clone();
        bare.hop_chain[1].triple = None;
        assert_eq!(
            check_consistency(&bare, &store),
            Err(NotCheckable {
                case_id: r.case_id.clone(),
                hop: 2
            })
        );
    }

    #[test]
    fn edits_override_stale_store_facts() {
        // store built from a pre-edit chain; the record's edit must win during the check
        let mut r = london();
        let mut stale = r.clone();
        stale.hop_chain[1].triple.as_mut().unwrap().object = "Boris Johnson".into();
        let (store, _) = build_store(&[stale]);
        assert!(check_consistency(&r, &store).unwrap().passed);
        r.edits.clear();
        assert!(!check_consistency(&r, &store).unwrap().passed);
    }

    #[test]
    fn check_rendering_counts() {
        let mut bad = london();
        bad.case_id = "2".into();
        bad.final_answer = "nobody".into();
        bad.final_answer_aliases.clear();
        let mut bare = london();
        bare.case_id = "3".into();
        bare.hop_chain[0].triple = None;
        let rows = check_dataset(&[london(), bad, bare]);
        let statuses: Vec<CheckStatus> = rows.iter().map(|r| r.status).collect();
        assert_eq!(statuses, vec![CheckStatus::Pass, CheckStatus::Fail, CheckStatus::NotCheckable]);
        let text = render_check(&rows);
        assert!(text.contains("2\tFAIL\t"));
        assert!(text.contains("pass: 1\nfail: 1\nnot-checkable: 1"));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("check.csv");
        write_check_csv(&rows, &p).unwrap();
        let csv = std::fs::read_to_string(&p).unwrap();
        assert!(csv.starts_with("case_id,status,expected,found\n"));
        assert!(csv.contains("3,NOT-CHECKABLE,Rishi Sunak,\n"));
    }

    fn arb_store() -> impl Strategy<Value = Vec<FactTriple>> {
        proptest::collection::vec(("e[0-4]", "r[0-2]", "e[0-4]"), 0..12).prop_map(|v| {
            v.into_iter()
                .map(|(s, r, o)| FactTriple::new(s, r, o))
                .collect()
        })
    }

    fn arb_edit() -> impl Strategy<Value = EditSpec> {
        ("e[0-4]", "r[0-2]", "e[0-4]", "e[5-6]").prop_map(|(s, r, o, n)| EditSpec::new(s, r, o, n))
    }

    proptest! {
        #[test]
        fn edited_keys_never_return_old_object(triples in arb_store(), edits in proptest::collection::vec(arb_edit(), 1..4)) {
            let s = TripleStore::from_triples(&triples).apply_edits(&edits);
            for e in &edits {
                let got = s.lookup(&e.subject, &e.relation).unwrap();
                prop_assert_ne!(got, e.old_object.as_str());
            }
        }

        #[test]
        fn editing_twice_is_editing_once(triples in arb_store(), edit in arb_edit()) {
            let s = TripleStore::from_triples(&triples);
            let once = s.apply_edits(std::slice::from_ref(&edit));
            prop_assert_eq!(once.apply_edits(std::slice::from_ref(&edit)), once);
        }

        #[test]
        fn walks_compose_at_any_split(
            chain in proptest::collection::vec("r[0-3]", 1..6),
            split in 0usize..6,
        ) {
            // a store where every (e_i, r) resolves, so walks never fail
            let triples: Vec<FactTriple> = (0..8)
                .flat_map(|i| (0..4).map(move |r| FactTriple::new(format!("e{i}"), format!("r{r}"), format!("e{}", (i * 3 + r + 1) % 8))))
                .collect();
            let s = TripleStore::from_triples(&triples);
            let j = split.min(chain.len());
            let whole = walk_chain(&s, "e0", &chain).unwrap();
            let mid = if j == 0 { "e0".to_string() } else { walk_chain(&s, "e0", &chain[..j]).unwrap() };
            let rest = if j == chain.len() { mid } else { walk_chain(&s, &mid, &chain[j..]).unwrap() };
            prop_assert_eq!(whole, rest);
        }
    }
}
