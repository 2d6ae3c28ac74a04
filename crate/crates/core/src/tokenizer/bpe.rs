//! Byte-pair subtoken model over grammar tokens.
//!
//! Words are grammar tokens; the alphabet is characters, except that operator
//! and punctuation symbols are atomic and never split or merged.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::lexer::{is_symbol, SYMBOLS};
use super::{TokenSequence, CLS, EOS, MASK, PAD, UNK};
use crate::error::{Error, Result};

/// Rendering of an unknown subtoken when decoding.
pub const UNK_GLYPH: char = '\u{FFFD}';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub eos: u32,
    pub mask: u32,
}

impl Default for SpecialIds {
    fn default() -> Self {
        SpecialIds {
            pad: 0,
            unk: 1,
            cls: 2,
            eos: 3,
            mask: 4,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    merges: Vec<(String, String)>,
    vocab: BTreeMap<String, u32>,
    special: SpecialIds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct SubtokenModel {
    merges: Vec<(String, String)>,
    vocab: HashMap<String, u32>,
    special: SpecialIds,
    ranks: HashMap<(String, String), usize>,
    id_to_token: Vec<String>,
}

impl From<SubtokenModel> for ModelFile {
    fn from(m: SubtokenModel) -> Self {
        ModelFile {
            merges: m.merges,
            vocab: m.vocab.into_iter().collect(),
            special: m.special,
        }
    }
}

impl TryFrom<ModelFile> for SubtokenModel {
    type Error = String;

    fn try_from(f: ModelFile) -> Result<Self, String> {
        let n = f.vocab.len();
        let mut id_to_token = vec![None; n];
        for (tok, &id) in &f.vocab {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| format!("vocabulary id {id} out of range"))?;
            if slot.replace(tok.clone()).is_some() {
                return Err(format!("duplicate vocabulary id {id}"));
            }
        }
        let id_to_token = id_to_token
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or("vocabulary ids are not contiguous")?;
        let s = f.special;
        let ids = [s.pad, s.unk, s.cls, s.eos, s.mask];
        if ids.iter().collect::<HashSet<_>>().len() != ids.len() {
            return Err("special ids are not distinct".into());
        }
        Ok(SubtokenModel::assemble(
            f.merges,
            f.vocab.into_iter().collect(),
            f.special,
            id_to_token,
        ))
    }
}

/// Outcome of BPE training besides the model itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeReport {
    pub merges: usize,
    pub requested: usize,
    /// Training stopped early because no adjacent pair was left to merge.
    pub exhausted: bool,
}

/// Subtoken ids of a token sequence and, per token, the span of ids it produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtokenEncoding {
    pub ids: Vec<u32>,
    pub spans: Vec<Range<usize>>,
}

impl SubtokenEncoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.spans.len()
    }

    /// Id position of the first subtoken of every token.
    pub fn first_subtokens(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.start).collect()
    }

    /// Replaces the span of `token` with `new_ids`, shifting later spans.
    pub fn splice(&self, token: usize, new_ids: &[u32]) -> SubtokenEncoding {
        let span = self.spans[token].clone();
        let mut ids = Vec::with_capacity(self.ids.len() + new_ids.len());
        ids.extend_from_slice(&self.ids[..span.start]);
        ids.extend_from_slice(new_ids);
        ids.extend_from_slice(&self.ids[span.end..]);
        let shift = new_ids.len() as isize - span.len() as isize;
        let spans = self
            .spans
            .iter()
            .enumerate()
            .map(|(i, s)| match i.cmp(&token) {
                std::cmp::Ordering::Less => s.clone(),
                std::cmp::Ordering::Equal => span.start..span.start + new_ids.len(),
                std::cmp::Ordering::Greater => {
                    (s.start as isize + shift) as usize..(s.end as isize + shift) as usize
                }
            })
            .collect();
        SubtokenEncoding { ids, spans }
    }
}

impl SubtokenModel {
    fn assemble(
        merges: Vec<(String, String)>,
        vocab: HashMap<String, u32>,
        special: SpecialIds,
        id_to_token: Vec<String>,
    ) -> Self {
        let ranks = merges
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, p)| (p, i))
            .collect();
        SubtokenModel {
            merges,
            vocab,
            special,
            ranks,
            id_to_token,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, subtoken: &str) -> Option<u32> {
        self.vocab.get(subtoken).copied()
    }

    pub fn subtoken(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Subtoken ids of a single grammar token.
    pub fn encode_token(&self, text: &str) -> Vec<u32> {
        match text {
            CLS => return vec![self.special.cls],
            EOS => return vec![self.special.eos],
            MASK => return vec![self.special.mask],
            _ => {}
        }
        if let Some(&id) = self.vocab.get(text) {
            return vec![id];
        }
        if is_symbol(text) {
            return vec![self.special.unk];
        }
        let mut symbols: Vec<String> = text.chars().map(String::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            symbols = merge_pair(&symbols, l, r);
        }
        symbols
            .iter()
            .map(|s| self.vocab.get(s).copied().unwrap_or(self.special.unk))
            .collect()
    }

    /// Encodes token texts where the first and last entries are the sentinels.
    pub fn encode_texts<S: AsRef<str>>(&self, texts: &[S]) -> SubtokenEncoding {
        let mut ids = Vec::new();
        let mut spans = Vec::with_capacity(texts.len());
        for t in texts {
            let start = ids.len();
            ids.extend(self.encode_token(t.as_ref()));
            spans.push(start..ids.len());
        }
        SubtokenEncoding { ids, spans }
    }

    pub fn encode(&self, seq: &TokenSequence) -> SubtokenEncoding {
        let mut ids = Vec::new();
        let mut spans = Vec::with_capacity(seq.len());
        for t in seq.tokens() {
            let start = ids.len();
            ids.extend(self.encode_token(&t.text));
            spans.push(start..ids.len());
        }
        SubtokenEncoding { ids, spans }
    }

    /// Token texts of an encoding. Unknown subtokens render as [`UNK_GLYPH`].
    pub fn decode(&self, encoding: &SubtokenEncoding) -> Result<Vec<String>> {
        for &id in &encoding.ids {
            if id as usize >= self.id_to_token.len() {
                return Err(Error::UnknownId(id));
            }
        }
        Ok(encoding
            .spans
            .iter()
            .map(|span| {
                encoding.ids[span.clone()]
                    .iter()
                    .map(|&id| {
                        if id == self.special.unk {
                            UNK_GLYPH.to_string()
                        } else {
                            self.id_to_token[id as usize].clone()
                        }
                    })
                    .collect::<String>()
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn merge_pair(symbols: &[String], l: &str, r: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == l && symbols[i + 1] == r {
            out.push(format!("{l}{r}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Symbol-id view used during training.
struct Table {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Table {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.index.get(s) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(s.to_string());
        self.index.insert(s.to_string(), id);
        id
    }
}

type Pair = (u32, u32);

struct PairQueue {
    counts: HashMap<Pair, u64>,
    order: BTreeSet<(Reverse<u64>, String, String)>,
}

impl PairQueue {
    fn adjust(&mut self, table: &Table, pair: Pair, delta: i64) {
        let old = self.counts.get(&pair).copied().unwrap_or(0);
        let new = (old as i64 + delta) as u64;
        let (l, r) = (&table.names[pair.0 as usize], &table.names[pair.1 as usize]);
        if old > 0 {
            self.order.remove(&(Reverse(old), l.clone(), r.clone()));
        }
        if new > 0 {
            self.order.insert((Reverse(new), l.clone(), r.clone()));
            self.counts.insert(pair, new);
        } else {
            self.counts.remove(&pair);
        }
    }
}

/// Learns byte-pair merges over the non-sentinel tokens of `corpus`.
///
/// Pairs are ranked by count, ties broken by the lexicographically smallest
/// `(left, right)`. Training stops after `min_merges` merges or when no
/// adjacent pair is left.
pub fn train_bpe(corpus: &[TokenSequence], min_merges: usize) -> Result<(SubtokenModel, BpeReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut freqs: BTreeMap<&str, u64> = BTreeMap::new();
    let mut alphabet: BTreeSet<char> = (0x21u8..=0x7e).map(char::from).collect();
    for seq in corpus {
        for t in &seq.tokens()[1..seq.len() - 1] {
            if is_symbol(&t.text) {
                continue;
            }
            alphabet.extend(t.text.chars());
            *freqs.entry(t.text.as_str()).or_default() += 1;
        }
    }

    let special = SpecialIds::default();
    let mut vocab_order: Vec<String> = [PAD, UNK, CLS, EOS, MASK]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut seen: HashSet<String> = vocab_order.iter().cloned().collect();
    for s in SYMBOLS.iter().map(|s| s.to_string()).chain(alphabet.iter().map(|c| c.to_string())) {
        if seen.insert(s.clone()) {
            vocab_order.push(s);
        }
    }

    let mut table = Table {
        names: Vec::new(),
        index: HashMap::new(),
    };
    let mut words: Vec<(Vec<u32>, u64)> = freqs
        .iter()
        .map(|(w, &c)| {
            let syms = w
                .chars()
                .map(|ch| table.intern(&ch.to_string()))
                .collect();
            (syms, c)
        })
        .collect();

    let mut queue = PairQueue {
        counts: HashMap::new(),
        order: BTreeSet::new(),
    };
    let mut where_: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in words.iter().enumerate() {
        for w in syms.windows(2) {
            queue.adjust(&table, (w[0], w[1]), *c as i64);
            where_.entry((w[0], w[1])).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    while merges.len() < min_merges {
        let Some((_, l, r)) = queue.order.iter().next().cloned() else {
            break;
        };
        let (a, b) = (table.index[&l], table.index[&r]);
        let merged = table.intern(&format!("{l}{r}"));
        let mut affected: Vec<usize> = where_
            .remove(&(a, b))
            .unwrap_or_default()
            .into_iter()
            .collect();
        affected.sort_unstable();
        for wi in affected {
            let (syms, c) = &mut words[wi];
            let c = *c as i64;
            if !syms.windows(2).any(|w| (w[0], w[1]) == (a, b)) {
                continue;
            }
            for w in syms.windows(2) {
                queue.adjust(&table, (w[0], w[1]), -c);
            }
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            *syms = next;
            for w in syms.windows(2) {
                queue.adjust(&table, (w[0], w[1]), c);
                where_.entry((w[0], w[1])).or_default().insert(wi);
            }
        }
        let name = format!("{l}{r}");
        if seen.insert(name.clone()) {
            vocab_order.push(name);
        }
        merges.push((l, r));
    }

    let vocab = vocab_order
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect();
    let report = BpeReport {
        merges: merges.len(),
        requested: min_merges,
        exhausted: merges.len() < min_merges,
    };
    Ok((
        SubtokenModel::assemble(merges, vocab, special, vocab_order),
        report,
    ))
}
