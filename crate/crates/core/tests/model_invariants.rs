mod common;

use common::checks;
use plo_core::prompts::{validate_cues, CueFixtures, CueVerdict};
use plo_core::space::CompositionSpace;
use proptest::prelude::*;

#[test]
fn prompt_lengths_follow_the_context_length() {
    checks::prompt_lengths();
}

#[test]
fn frozen_weights_are_bitwise_unchanged_after_ten_steps() {
    checks::frozen_weights_unchanged();
}

#[test]
fn zero_cross_attention_reduces_the_vlm_to_raw_similarity() {
    checks::zero_ca_vlm();
}

#[test]
fn zero_cross_attention_reduces_the_llm_to_raw_similarity() {
    checks::zero_ca_llm();
}

#[test]
fn probabilities_normalize_and_hard_scores_factor() {
    for seed in 0..4 {
        checks::probabilities(seed);
    }
}

#[test]
fn tape_softmax_rows_sum_to_one() {
    checks::tape_softmax_rows(9);
}

const STATES: [&str; 3] = ["wet", "old", "red"];
const OBJECTS: [&str; 2] = ["dog", "cup"];

fn tiny_space() -> CompositionSpace {
    CompositionSpace::new(
        STATES.iter().map(|s| s.to_string()).collect(),
        OBJECTS.iter().map(|s| s.to_string()).collect(),
        vec![0, 1, 2, 5],
        vec![3],
        vec![4],
    )
    .unwrap()
}

/// One fixture section, possibly damaged in one of several ways.
fn section() -> impl Strategy<Value = (usize, u8, usize)> {
    (0usize..6, 0u8..7, 0usize..6)
}

proptest! {
    #[test]
    fn repaired_cues_always_end_with_the_template(
        n in 1usize..6,
        sections in proptest::collection::vec(section(), 0..10),
    ) {
        let sp = tiny_space();
        let mut text = String::new();
        for (pair, damage, len) in sections {
            let (s, o) = sp.pair(pair);
            let name = format!("{} {}", STATES[s], OBJECTS[o]);
            let mut cues: Vec<String> = (1..n).map(|i| format!("a photo of clue {i}")).collect();
            cues.push(format!("a photo of {name}"));
            match damage {
                0 => {}
                1 => cues.truncate(len.min(cues.len())),
                2 => cues.push("a photo of something extra".into()),
                3 => cues[0] = "the photo shows".into(),
                4 => *cues.last_mut().unwrap() = "a photo of something else".into(),
                5 => cues.insert(0, "a photo of a stray line".into()),
                _ => {
                    text.push_str(&format!("## {name}\nnot a cue line\n"));
                    continue;
                }
            }
            text.push_str(&format!("## {name}\n"));
            for c in cues {
                text.push_str(&format!("- {c}\n"));
            }
            text.push('\n');
        }
        text.push_str("## unknown thing\n- a photo of unknown thing\n");
        let f = CueFixtures::parse(&text, &sp, n).unwrap();
        prop_assert_eq!(f.sequences.len(), sp.num_pairs());
        for seq in &f.sequences {
            let (s, o) = sp.pair(seq.pair);
            prop_assert_eq!(seq.cues.len(), n);
            prop_assert_eq!(validate_cues(&seq.cues, STATES[s], OBJECTS[o], n), CueVerdict::Accepted);
        }
    }
}
