//! Small generated corpora for experiments that must run on one CPU core.
//!
//! Every generator is deterministic in its seed and emits functions that the
//! Java grammar accepts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::FunctionRecord;
use crate::tokenizer::TokenSequence;

const NAMES: &[&str] = &[
    "total", "count", "acc", "sum", "value", "res", "tmp", "best", "score", "width", "height", "depth", "size",
    "offset", "cursor", "level", "weight", "delta", "amount", "span",
];
const VERBS: &[&str] = &["compute", "scan", "collect", "measure", "reduce", "fold", "check", "update", "walk", "rank"];
const NOUNS: &[&str] = &["Items", "Rows", "Nodes", "Values", "Edges", "Keys", "Cells", "Marks", "Slots", "Runs"];

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty pool")
}

fn fn_name<R: Rng + ?Sized>(rng: &mut R, i: usize) -> String {
    format!("{}{}{}", pick(rng, VERBS), pick(rng, NOUNS), i)
}

/// Distinct local names.
fn locals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<&'static str> {
    let mut pool = NAMES.to_vec();
    pool.shuffle(rng);
    pool.truncate(n);
    pool
}

/// Functions whose only binary operators are `<`, `+` and `&&`, so `>` never
/// occurs in correct code.
pub fn planted_corpus(n: usize, seed: u64) -> Vec<FunctionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let v = locals(&mut rng, 3);
            let (s, t, u) = (v[0], v[1], v[2]);
            let mut body = vec![format!("int {s} = 0;"), format!("int {t} = {};", rng.gen_range(0..9))];
            let k = rng.gen_range(2..=4);
            for _ in 0..k {
                body.push(match rng.gen_range(0..5) {
                    0 => format!("for (int i = 0; i < n; i++) {{ {s} = {s} + a[i]; }}"),
                    1 => format!("if ({s} < k && k < n) {{ {s} = {s} + {}; }}", rng.gen_range(1..9)),
                    2 => format!("while ({t} < n) {{ {t} = {t} + {}; }}", rng.gen_range(1..4)),
                    3 => format!("int {u}{} = {s} + k;", rng.gen_range(0..99)),
                    _ => format!("if ({t} < {s}) {{ {t} = {s}; }}"),
                });
            }
            body.push(format!("return {s} + {t};"));
            FunctionRecord::new(
                format!("planted-{i}"),
                format!("int {}(int[] a, int n, int k) {{ {} }}", fn_name(&mut rng, i), body.join(" ")),
            )
        })
        .collect()
}

/// Statement `kind` (0..8) of the contextual corpus over locals `s`, `t`,
/// `m`, `c`.
fn context_statement(kind: usize, v: &[&str]) -> String {
    let (s, t, m, c) = (v[0], v[1], v[2], v[3]);
    match kind {
        0 => format!("for (int i = 0; i < n; i++) {{ {s} = {s} + a[i]; }}"),
        1 => format!("if (p == null) return {s};"),
        2 => "if (k >= n) return -1;".to_string(),
        3 => format!("{t} = {t} * 2;"),
        4 => format!("{m} = {m} - 1;"),
        5 => format!("if (q != null && {c} > 0) {{ {s} = {s} % {c}; }}"),
        6 => format!("if ({m} <= 0 || q == null) return 0;"),
        _ => format!("{c} = {c} / 10;"),
    }
}

fn context_function<R: Rng + ?Sized>(rng: &mut R, i: usize, id: String, kinds: &[usize]) -> FunctionRecord {
    let v = locals(rng, 4);
    let mut body = vec![
        format!("int {} = 0;", v[0]),
        format!("int {} = 1;", v[1]),
        format!("int {} = n;", v[2]),
        format!("int {} = k;", v[3]),
    ];
    body.extend(kinds.iter().map(|&k| context_statement(k, &v)));
    body.push(format!("return {};", v[0]));
    FunctionRecord::new(
        id,
        format!(
            "int {}(int[] a, int n, int k, Object p, Object q) {{ {} }}",
            fn_name(rng, i),
            body.join(" ")
        ),
    )
}

/// Functions in which each operator is fixed by its surrounding context:
/// loop bounds use `<`, null checks `==`/`!=`, guards `>=` and `<=`,
/// accumulation `+`, decrements `-`, scaling `*`/`/`, remainders `%`, and
/// conditions join with `&&` or `||`. No bitwise or shift operators occur.
pub fn contextual_corpus(n: usize, seed: u64) -> Vec<FunctionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut kinds: Vec<usize> = (0..8).collect();
            kinds.shuffle(&mut rng);
            let take = rng.gen_range(2..=4);
            context_function(&mut rng, i, format!("ctx-{i}"), &kinds[..take])
        })
        .collect()
}

/// Contextual functions with a single statement each. Small enough to be
/// memorized by a one-layer model.
pub fn short_contextual_corpus(n: usize, seed: u64) -> Vec<FunctionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let kind = rng.gen_range(0..8);
            context_function(&mut rng, i, format!("short-{i}"), &[kind])
        })
        .collect()
}

/// Functions with one identical token layout. The `lo < hi` comparison sits
/// at the same absolute position in every function; the other two
/// comparisons are `<` or `>` at random.
pub fn fixed_layout_corpus(n: usize, seed: u64) -> Vec<FunctionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let op = |rng: &mut ChaCha8Rng| if rng.gen::<bool>() { "<" } else { ">" };
            let (o1, o2) = (op(&mut rng), op(&mut rng));
            let d: Vec<u32> = (0..5).map(|_| rng.gen_range(1..10)).collect();
            FunctionRecord::new(
                format!("fixed-{i}"),
                format!(
                    "int f(int a, int b, int lo, int hi) {{ int s = {}; if (a {o1} b) s = s + {}; \
                     if (lo < hi) s = s + {}; if (b {o2} a) s = s + {}; return s + {}; }}",
                    d[0], d[1], d[2], d[3], d[4]
                ),
            )
        })
        .collect()
}

/// Prepends `count` filler declarations right after the opening brace.
pub fn prepend_filler(source: &str, count: usize) -> String {
    let brace = source.find('{').expect("function body");
    let filler: String = (0..count).map(|j| format!(" int pad{j} = {j};")).collect();
    format!("{}{}{}", &source[..=brace], filler, &source[brace + 1..])
}

/// Index of the first token whose text is `text`.
pub fn first_index(seq: &TokenSequence, text: &str) -> Option<usize> {
    seq.tokens().iter().position(|t| t.text == text)
}
