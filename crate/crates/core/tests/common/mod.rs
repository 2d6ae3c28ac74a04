#![allow(dead_code)]

use bugsynth::annotator::{annotate_function, build_call_vocabulary, AnnotatedFunction, BugType, CallVocabulary};
use bugsynth::corpus::FunctionRecord;
use bugsynth::tokenizer::{tokenize, train_bpe, Grammar, SubtokenModel, TokenSequence};

/// Hand-written Java functions with variables, calls and every operator class.
pub const JAVA_FIXTURES: &[&str] = &[
    "int sumRange(int[] xs, int lo, int hi) { int acc = 0; for (int i = lo; i < hi; i++) { acc = acc + xs[i]; } return acc; }",
    "boolean inside(int x, int lo, int hi) { return lo <= x && x < hi; }",
    "int maxOf(List<Integer> items) { int best = items.get(0); for (int v : items) { best = Math.max(best, v); } return best; }",
    "String joinAll(List<String> parts, String sep) { StringBuilder sb = new StringBuilder(); for (String p : parts) { if (sb.length() > 0) sb.append(sep); sb.append(p); } return sb.toString(); }",
    "int mask(int flags, int bit) { return (flags >> bit) & 1; }",
    "boolean isEmpty(String s) { return s == null || s.isEmpty(); }",
    "int clamp(int v, int lo, int hi) { if (v < lo) return lo; if (v > hi) return hi; return v; }",
    "double mean(double[] xs) { double total = 0; for (int i = 0; i < xs.length; i++) total = total + xs[i]; return total / xs.length; }",
    "int countMatches(List<String> words, String key) { int n = 0; for (String w : words) { if (w.equals(key)) n = n + 1; } return n; }",
    "int hash(int a, int b) { int h = a * 31 + b; return h ^ (h >>> 16); }",
    "boolean contains(Map<String, Integer> m, String k) { return m.containsKey(k) && m.get(k) != null; }",
    "int gcd(int a, int b) { while (b != 0) { int t = a % b; a = b; b = t; } return a; }",
];

pub fn records(sources: &[&str]) -> Vec<FunctionRecord> {
    sources
        .iter()
        .enumerate()
        .map(|(i, s)| FunctionRecord::new(format!("fx-{i}"), *s))
        .collect()
}

pub fn sequences(records: &[FunctionRecord]) -> Vec<TokenSequence> {
    records
        .iter()
        .map(|r| tokenize(&r.source, Grammar::Java).expect("fixture parses"))
        .collect()
}

pub fn annotate_all(
    records: &[FunctionRecord],
    seqs: &[TokenSequence],
    bug_type: BugType,
    vocab: Option<&CallVocabulary>,
) -> Vec<AnnotatedFunction> {
    records
        .iter()
        .zip(seqs)
        .map(|(r, s)| annotate_function(r.clone(), s.clone(), bug_type, vocab))
        .collect()
}

/// Tokenizer, call vocabulary and annotations for `records`.
pub struct Prepared {
    pub model: SubtokenModel,
    pub vocab: CallVocabulary,
    pub seqs: Vec<TokenSequence>,
}

impl Prepared {
    pub fn new(records: &[FunctionRecord], merges: usize) -> Self {
        let seqs = sequences(records);
        let (model, _) = train_bpe(&seqs, merges).expect("bpe");
        let vocab = build_call_vocabulary(&seqs, None);
        Prepared { model, vocab, seqs }
    }

    pub fn annotate(&self, records: &[FunctionRecord], bug_type: BugType) -> Vec<AnnotatedFunction> {
        annotate_all(records, &sequences(records), bug_type, Some(&self.vocab))
    }
}
