use crate::model::{EditSpec, Extras, FactTriple, HopStep, SourceRecord};

pub(crate) const LONDON_QUESTION: &str =
    "Who is the head of government of the country where London is located?";

/// Two-hop case built around the UK head-of-government change.
pub(crate) fn london() -> SourceRecord {
    SourceRecord {
        case_id: "000001".into(),
        question_variants: vec![LONDON_QUESTION.into()],
        final_answer: "Rishi Sunak".into(),
        final_answer_aliases: vec!["Sunak".into()],
        hop_chain: vec![
            HopStep::new(1, "Where is London located?", "United Kingdom")
                .with_triple(FactTriple::new("London", "country", "United Kingdom")),
            HopStep::new(2, "Who is the head of government of the United Kingdom?", "Rishi Sunak")
                .with_triple(FactTriple::new(
                    "United Kingdom",
                    "head_of_government",
                    "Rishi Sunak",
                )),
        ],
        edits: vec![EditSpec::new(
            "United Kingdom",
            "head_of_government",
            "Boris Johnson",
            "Rishi Sunak",
        )],
        extras: Extras::new(),
    }
}
