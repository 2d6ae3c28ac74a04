mod common;

use std::collections::HashMap;

use bugsynth::annotator::{annotate, build_call_vocabulary, BugType};
use bugsynth::corpus::FunctionRecord;
use bugsynth::tokenizer::TokenKind;
use common::{records, sequences, JAVA_FIXTURES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: &[&str] = &["get", "put", "size", "hasNodes", "hasEdges", "append", "max", "min", "parse", "clear"];

/// Generated functions whose call counts are tallied while they are written.
fn call_fixture(n: usize, seed: u64) -> (Vec<FunctionRecord>, HashMap<String, u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut pick = |rng: &mut ChaCha8Rng| {
        let name = NAMES[rng.gen_range(0..NAMES.len())];
        *counts.entry(name.to_string()).or_default() += 1;
        name
    };
    let records = (0..n)
        .map(|i| {
            let mut body = String::new();
            for _ in 0..rng.gen_range(1..4) {
                let stmt = match rng.gen_range(0..4) {
                    0 => format!("s = s + {}(k);", pick(&mut rng)),
                    1 => format!("s = s + xs.{}(k);", pick(&mut rng)),
                    2 => format!("xs.{}(k, s);", pick(&mut rng)),
                    _ => {
                        let outer = pick(&mut rng);
                        format!("s = s + {outer}({}(k));", pick(&mut rng))
                    }
                };
                body.push_str(&stmt);
                body.push(' ');
            }
            // the declared name and the field access are not calls
            let source = format!("int size{i}(List<Integer> xs, int k) {{ int s = xs.length; {body}return s; }}");
            FunctionRecord::new(format!("calls-{i}"), source)
        })
        .collect();
    (records, counts)
}

#[test]
fn call_vocabulary_matches_generated_counts() {
    let (recs, expected) = call_fixture(10_000, 4);
    let seqs = sequences(&recs);
    let vocab = build_call_vocabulary(&seqs, None);
    assert_eq!(vocab.len(), expected.len());
    for (name, count) in &expected {
        assert_eq!(vocab.count(name), Some(*count), "{name}");
    }
    let ranked: Vec<u64> = vocab.names.iter().map(|(_, c)| *c).collect();
    assert!(ranked.windows(2).all(|w| w[0] >= w[1]));

    let top = build_call_vocabulary(&seqs, Some(3));
    assert_eq!(top.names, vocab.names[..3].to_vec());
}

#[test]
fn apimisuse_candidates_are_vocabulary_plus_local_calls() {
    let recs = records(JAVA_FIXTURES);
    let seqs = sequences(&recs);
    let vocab = build_call_vocabulary(&seqs, None);
    for seq in &seqs {
        let local: Vec<&str> = seq
            .tokens()
            .iter()
            .filter(|t| t.kind == TokenKind::CallName)
            .map(|t| t.text.as_str())
            .collect();
        for target in annotate(seq, BugType::ApiMisuse, Some(&vocab)) {
            let original = &seq.tokens()[target.token_index].text;
            assert!(!target.candidates.contains(original));
            for name in vocab.names.iter().map(|(n, _)| n.as_str()).chain(local.iter().copied()) {
                if name != original {
                    assert!(target.candidates.iter().any(|c| c == name), "{name} missing");
                }
            }
        }
    }
}

#[test]
fn every_target_has_the_kind_its_bug_type_requires() {
    let recs = records(JAVA_FIXTURES);
    for seq in sequences(&recs) {
        for bug_type in [BugType::BorWeak, BugType::BorStrong, BugType::VarMisuse, BugType::ApiMisuse] {
            let vocab = build_call_vocabulary([&seq], None);
            for target in annotate(&seq, bug_type, Some(&vocab)) {
                let token = &seq.tokens()[target.token_index];
                let kind = match bug_type {
                    BugType::BorWeak | BugType::BorStrong => TokenKind::BinaryOperator,
                    BugType::VarMisuse => TokenKind::Identifier,
                    BugType::ApiMisuse => TokenKind::CallName,
                };
                assert_eq!(token.kind, kind, "{bug_type:?} at {}", token.text);
                assert!(!target.candidates.contains(&token.text));
            }
        }
    }
}
