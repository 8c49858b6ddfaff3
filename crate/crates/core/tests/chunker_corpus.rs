mod common;

use proptest::prelude::*;
use streamexec_core::replay::{chunk_fragments, fidelity_check};
use streamexec_core::{Chunker, TokenEvent};

#[test]
fn corpus_is_large_enough() {
    assert!(common::corpus().len() >= 50);
}

#[test]
fn corpus_reconstructs_under_every_fragmentation() {
    for (name, program) in common::corpus() {
        let report = fidelity_check(&program, 6);
        assert!(report.ok, "{name}: {:?}", report.runs);
    }
}

#[test]
fn corpus_chunks_align_with_statements() {
    for (name, program) in common::corpus() {
        let chunks = fidelity_check(&program, 1).chunks;
        if let Err(e) = common::check_alignment(&program, &chunks) {
            panic!("{name}: {e}");
        }
    }
}

#[test]
fn chunk_timestamps_are_ordered() {
    for (name, program) in common::corpus() {
        let mut chunker = Chunker::new();
        let mut chunks = Vec::new();
        for (k, ch) in program.chars().enumerate() {
            chunks.extend(chunker.feed(&TokenEvent::new(ch.to_string(), k as f64)));
        }
        chunks.extend(chunker.finish());
        for (k, c) in chunks.iter().enumerate() {
            assert_eq!(c.index, k + 1, "{name}");
            assert!(c.detected_at >= c.gen_complete_at, "{name}: {c:?}");
            assert!(c.token_count >= 1, "{name}: {c:?}");
        }
        let tokens: usize = chunks.iter().map(|c| c.token_count).sum();
        assert_eq!(tokens, program.chars().count(), "{name}");
    }
}

fn split_at_cuts(text: &str, cuts: &[usize]) -> Vec<String> {
    let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).collect();
    let mut pts: Vec<usize> = cuts
        .iter()
        .filter(|_| !bounds.is_empty())
        .map(|c| bounds[c % bounds.len()])
        .collect();
    pts.push(0);
    pts.push(text.len());
    pts.sort_unstable();
    pts.dedup();
    pts.windows(2)
        .map(|w| text[w[0]..w[1]].to_string())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fragmentation_does_not_change_chunks(
        idx in 0usize..1000,
        cuts in proptest::collection::vec(0usize..10_000, 0..40),
    ) {
        let corpus = common::corpus();
        let (_, program) = &corpus[idx % corpus.len()];
        let whole = chunk_fragments(std::slice::from_ref(program));
        let pieces = chunk_fragments(&split_at_cuts(program, &cuts));
        let a: Vec<_> = whole.iter().map(|c| (&c.text, c.byte_span.clone())).collect();
        let b: Vec<_> = pieces.iter().map(|c| (&c.text, c.byte_span.clone())).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn arbitrary_text_reconstructs(text in "[a-z =:()\\[\\]'\"#\\\\\n ]{0,80}") {
        let chunks = chunk_fragments(&split_at_cuts(&text, &[3, 7, 11, 19]));
        let rebuilt: String = chunks.iter().map(|c| c.text.as_str()).collect();
        prop_assert_eq!(rebuilt, text);
    }
}
