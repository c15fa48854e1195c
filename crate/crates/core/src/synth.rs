//! Seeded generator of raw multi-hop edit cases in the source JSON layout.
//!
//! Every case gets its own entities, so chains never collide across cases and
//! the edited chain walk always reproduces the post-edit answer. Key spellings,
//! target encodings and triple placement vary from case to case.

use crate::datasetgen::below;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

/// (relation label, phrase used in questions)
const RELATIONS: &[(&str, &str)] = &[
    ("capital", "capital"),
    ("head_of_state", "head of state"),
    ("official_language", "official language"),
    ("currency", "currency"),
    ("founder", "founder"),
    ("place_of_birth", "place of birth"),
    ("employer", "employer"),
    ("spouse", "spouse"),
    ("headquarters", "headquarters"),
    ("country_of_citizenship", "country of citizenship"),
    ("continent", "continent"),
    ("author", "author"),
];

const STEMS: &[&str] = &[
    "Avar", "Belor", "Corvin", "Dunmere", "Elsar", "Farrow", "Galen", "Hestia", "Istra", "Jorvik",
    "Kestrel", "Lumen", "Marrow", "Nerin", "Orla", "Pellam", "Quill", "Rowan", "Sable", "Tamsin",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub min_hops: usize,
    pub max_hops: usize,
    /// Every n-th case carries no triples at all (0 disables).
    pub untripled_every: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 100,
            seed: 7,
            min_hops: 2,
            max_hops: 4,
            untripled_every: 0,
        }
    }
}

impl SynthConfig {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            ..Self::default()
        }
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[below(rng, items.len() as u64) as usize]
}

fn coin(rng: &mut ChaCha8Rng) -> bool {
    below(rng, 2) == 1
}

fn entity(rng: &mut ChaCha8Rng, case: usize, slot: usize) -> String {
    format!("{} {}-{}", pick(rng, STEMS), case, slot)
}

fn initials(name: &str) -> String {
    name.split_whitespace()
        .filter_map(|w| w.chars().next())
        .collect::<String>()
        + "."
}

fn target(rng: &mut ChaCha8Rng, label: &str, id: usize) -> Value {
    if coin(rng) {
        json!({"str": label, "id": format!("Q{id}")})
    } else {
        json!(label)
    }
}

/// One raw case. `case` seeds entity names and must be unique within a corpus.
pub fn synth_case(rng: &mut ChaCha8Rng, case: usize, config: &SynthConfig) -> Value {
    let span = (config.max_hops - config.min_hops + 1) as u64;
    let n = config.min_hops + below(rng, span) as usize;

    // entities[0] is the start; entities[k] answers hop k
    let entities: Vec<String> = (0..=n).map(|slot| entity(rng, case, slot)).collect();
    let mut relations = Vec::with_capacity(n);
    while relations.len() < n {
        let r = *pick(rng, RELATIONS);
        if relations.last() != Some(&r) {
            relations.push(r);
        }
    }
    let edited = below(rng, n as u64) as usize;
    let old_object = format!("{} {}-old", pick(rng, STEMS), case);

    let triples: Vec<[&str; 3]> = (0..n)
        .map(|k| [entities[k].as_str(), relations[k].0, entities[k + 1].as_str()])
        .collect();
    let untripled = config.untripled_every > 0 && case.is_multiple_of(config.untripled_every);
    let inline_triples = !untripled && coin(rng);

    let hops: Vec<Value> = (0..n)
        .map(|k| {
            let answer = &entities[k + 1];
            let mut hop = json!({
                "question": format!("What is the {} of {}?", relations[k].1, entities[k]),
                "cloze": format!("The {} of {} is", relations[k].1, entities[k]),
                "answer": answer,
                "answer_alias": [initials(answer)],
            });
            if inline_triples {
                hop["triple"] = json!(triples[k]);
            }
            hop
        })
        .collect();

    // the pre-edit answer diverges from the edited hop onwards
    let pre_answer = if edited + 1 == n {
        old_object.clone()
    } else {
        format!("{} {}-pre", pick(rng, STEMS), case)
    };

    let nested = (0..n).fold(entities[0].clone(), |inner, k| {
        format!("the {} of {}", relations[k].1, inner)
    });
    let final_answer = &entities[n];
    let questions = vec![
        format!("What is {nested}?"),
        format!("Tell me {nested}."),
        format!("Which entity is {nested}?"),
    ];

    let mut aliases = vec![initials(final_answer)];
    if coin(rng) {
        aliases.push(final_answer.to_uppercase());
    }

    let rewrite = {
        let mut e = json!({
            "prompt": format!("The {} of {{}} is", relations[edited].1),
            "subject": entities[edited],
            "relation": relations[edited].0,
            "relation_id": format!("P{}", 100 + edited),
            "target_true": target(rng, &old_object, case * 10 + 1),
            "target_new": target(rng, &entities[edited + 1], case * 10 + 2),
        });
        if coin(rng) {
            e.as_object_mut().unwrap().shift_remove("relation_id");
        }
        e
    };

    let mut obj = serde_json::Map::new();
    if coin(rng) {
        obj.insert("case_id".into(), json!(case));
    } else {
        obj.insert("case_id".into(), json!(format!("{case:06}")));
    }
    if coin(rng) {
        obj.insert("questions".into(), json!(questions));
    } else {
        obj.insert("question".into(), json!(questions[0]));
    }
    obj.insert("answer".into(), json!(pre_answer));
    obj.insert("answer_alias".into(), json!([initials(&pre_answer)]));
    obj.insert("new_answer".into(), json!(final_answer));
    obj.insert("new_answer_alias".into(), json!(aliases));
    obj.insert("new_single_hops".into(), Value::Array(hops));
    obj.insert("requested_rewrite".into(), json!([rewrite]));
    if !untripled {
        obj.insert("orig".into(), json!({ "new_triples_labeled": triples }));
    }
    obj.insert("difficulty".into(), json!(below(rng, 5)));
    Value::Object(obj)
}

/// A corpus of `config.count` raw cases. Same config, same bytes.
pub fn synth_corpus(config: &SynthConfig) -> Value {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Value::Array(
        (1..=config.count)
            .map(|case| synth_case(&mut rng, case, config))
            .collect(),
    )
}

/// The corpus as the bytes of a source file.
pub fn synth_corpus_bytes(config: &SynthConfig) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&synth_corpus(config)).expect("corpus serializes");
    out.push(b'\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest;
    use crate::model::validate;

    #[test]
    fn corpus_parses_and_validates() {
        let cfg = SynthConfig {
            untripled_every: 5,
            ..SynthConfig::new(60, 3)
        };
        let records = ingest::parse_bytes(&synth_corpus_bytes(&cfg)).unwrap();
        assert_eq!(records.len(), 60);
        for r in &records {
            assert!(validate(r).is_empty(), "{}: {:?}", r.case_id, validate(r));
            assert!((2..=4).contains(&r.hop_chain.len()));
            assert_ne!(r.question_variants[0], r.hop_chain[0].question);
            assert_eq!(r.edits.len(), 1);
            let e = &r.edits[0];
            assert!(r.hop_chain.iter().any(|h| h.answer == e.new_object));
        }
        let untripled = records.iter().filter(|r| r.chain_triples().is_none()).count();
        assert_eq!(untripled, 12);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = synth_corpus_bytes(&SynthConfig::new(20, 9));
        assert_eq!(a, synth_corpus_bytes(&SynthConfig::new(20, 9)));
        assert_ne!(a, synth_corpus_bytes(&SynthConfig::new(20, 10)));
    }
}
