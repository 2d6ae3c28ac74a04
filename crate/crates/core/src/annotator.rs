//! Preprocessing-time annotation of mutation targets and their replacement
//! candidates, so that mutation during training is a cheap random draw.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::FunctionRecord;
use crate::error::{Error, Result};
use crate::tokenizer::{Binding, TokenKind, TokenSequence, BINARY_OPERATORS};

pub const RELATIONAL: &[&str] = &["==", "!=", "<", ">", "<=", ">="];
pub const ARITHMETIC: &[&str] = &["+", "-", "*", "/", "%"];
pub const CONDITIONAL: &[&str] = &["&&", "||"];
pub const BITWISE: &[&str] = &["&", "|", "^", "<<", ">>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BugType {
    BorWeak,
    BorStrong,
    VarMisuse,
    ApiMisuse,
}

impl BugType {
    pub const ALL: [BugType; 4] = [
        BugType::BorWeak,
        BugType::BorStrong,
        BugType::VarMisuse,
        BugType::ApiMisuse,
    ];

    /// Bug types that share target positions (and hence location masks).
    pub fn family(self) -> &'static str {
        match self {
            BugType::BorWeak | BugType::BorStrong => "bor",
            BugType::VarMisuse => "varmisuse",
            BugType::ApiMisuse => "apimisuse",
        }
    }

    pub fn eligible_kind(self) -> TokenKind {
        match self {
            BugType::BorWeak | BugType::BorStrong => TokenKind::BinaryOperator,
            BugType::VarMisuse => TokenKind::Identifier,
            BugType::ApiMisuse => TokenKind::CallName,
        }
    }
}

impl fmt::Display for BugType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BugType::BorWeak => "bor-weak",
            BugType::BorStrong => "bor-strong",
            BugType::VarMisuse => "varmisuse",
            BugType::ApiMisuse => "apimisuse",
        })
    }
}

impl FromStr for BugType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "bor-weak" => Ok(BugType::BorWeak),
            "bor-strong" | "bor" => Ok(BugType::BorStrong),
            "varmisuse" | "var-misuse" => Ok(BugType::VarMisuse),
            "apimisuse" | "api-misuse" => Ok(BugType::ApiMisuse),
            other => Err(Error::InvalidArgument(format!("unknown bug type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BorMode {
    Weak,
    Strong,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationTarget {
    #[serde(rename = "index")]
    pub token_index: usize,
    pub bug_type: BugType,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedFunction {
    pub record: FunctionRecord,
    pub sequence: TokenSequence,
    pub targets: Vec<MutationTarget>,
}

impl AnnotatedFunction {
    /// `{0} ∪ target positions`, ascending: the pointer's candidate locations.
    pub fn location_mask(&self) -> Vec<usize> {
        let mut m: Vec<usize> = std::iter::once(0)
            .chain(self.targets.iter().map(|t| t.token_index))
            .collect();
        m.sort_unstable();
        m.dedup();
        m
    }

    pub fn to_record(&self) -> AnnotatedRecord {
        AnnotatedRecord {
            id: self.record.id.clone(),
            tokens: self.sequence.texts(),
            kinds: Some(self.sequence.tokens().iter().map(|t| t.kind).collect()),
            targets: self.targets.clone(),
        }
    }
}

/// One line of an annotated dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedRecord {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kinds: Option<Vec<TokenKind>>,
    pub targets: Vec<MutationTarget>,
}

/// Call names seen in a training split, ranked by frequency.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallVocabulary {
    /// `(name, count)`, descending count then ascending name.
    pub names: Vec<(String, u64)>,
}

impl CallVocabulary {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn count(&self, name: &str) -> Option<u64> {
        self.names.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }
}

pub fn operator_class(op: &str) -> Option<&'static [&'static str]> {
    [RELATIONAL, ARITHMETIC, CONDITIONAL, BITWISE]
        .into_iter()
        .find(|class| class.contains(&op))
}

pub fn annotate_bor(seq: &TokenSequence, mode: BorMode) -> Vec<MutationTarget> {
    let bug_type = match mode {
        BorMode::Weak => BugType::BorWeak,
        BorMode::Strong => BugType::BorStrong,
    };
    seq.tokens()
        .iter()
        .filter(|t| t.kind == TokenKind::BinaryOperator)
        .filter_map(|t| {
            let pool: &[&str] = match mode {
                BorMode::Weak => BINARY_OPERATORS,
                BorMode::Strong => operator_class(&t.text)?,
            };
            let candidates: Vec<String> = pool
                .iter()
                .filter(|op| **op != t.text)
                .map(|op| op.to_string())
                .collect();
            (!candidates.is_empty()).then(|| MutationTarget {
                token_index: t.index,
                bug_type,
                candidates,
            })
        })
        .collect()
}

/// Every variable use becomes a target whose candidates are the other
/// variables declared anywhere in the function, parameters included.
pub fn annotate_varmisuse(seq: &TokenSequence) -> Vec<MutationTarget> {
    let mut declared: Vec<&str> = Vec::new();
    for t in seq.tokens() {
        if t.binding == Binding::Declaration && !declared.contains(&t.text.as_str()) {
            declared.push(&t.text);
        }
    }
    seq.tokens()
        .iter()
        .filter(|t| t.binding == Binding::Use)
        .filter_map(|t| {
            let candidates: Vec<String> = declared
                .iter()
                .filter(|d| **d != t.text)
                .map(|d| d.to_string())
                .collect();
            (!candidates.is_empty()).then(|| MutationTarget {
                token_index: t.index,
                bug_type: BugType::VarMisuse,
                candidates,
            })
        })
        .collect()
}

/// Candidates are the vocabulary names plus the calls occurring in this
/// function, minus the original name.
pub fn annotate_apimisuse(seq: &TokenSequence, vocab: &CallVocabulary) -> Vec<MutationTarget> {
    let calls: Vec<&str> = seq
        .tokens()
        .iter()
        .filter(|t| t.kind == TokenKind::CallName)
        .map(|t| t.text.as_str())
        .collect();
    if calls.is_empty() {
        return Vec::new();
    }
    let mut pool: Vec<&str> = Vec::with_capacity(vocab.len() + calls.len());
    let mut seen = HashSet::new();
    for name in vocab.names.iter().map(|(n, _)| n.as_str()).chain(calls.iter().copied()) {
        if seen.insert(name) {
            pool.push(name);
        }
    }
    seq.tokens()
        .iter()
        .filter(|t| t.kind == TokenKind::CallName)
        .filter_map(|t| {
            let candidates: Vec<String> = pool
                .iter()
                .filter(|n| **n != t.text)
                .map(|n| n.to_string())
                .collect();
            (!candidates.is_empty()).then(|| MutationTarget {
                token_index: t.index,
                bug_type: BugType::ApiMisuse,
                candidates,
            })
        })
        .collect()
}

pub fn build_call_vocabulary<'a>(
    train: impl IntoIterator<Item = &'a TokenSequence>,
    top_k: Option<usize>,
) -> CallVocabulary {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for seq in train {
        for t in seq.tokens() {
            if t.kind == TokenKind::CallName {
                *counts.entry(t.text.as_str()).or_default() += 1;
            }
        }
    }
    let mut names: Vec<(String, u64)> = counts
        .into_iter()
        .map(|(n, c)| (n.to_string(), c))
        .collect();
    names.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(k) = top_k {
        names.truncate(k);
    }
    CallVocabulary { names }
}

pub fn annotate(seq: &TokenSequence, bug_type: BugType, vocab: Option<&CallVocabulary>) -> Vec<MutationTarget> {
    match bug_type {
        BugType::BorWeak => annotate_bor(seq, BorMode::Weak),
        BugType::BorStrong => annotate_bor(seq, BorMode::Strong),
        BugType::VarMisuse => annotate_varmisuse(seq),
        BugType::ApiMisuse => annotate_apimisuse(seq, vocab.unwrap_or(&CallVocabulary::default())),
    }
}

pub fn annotate_function(
    record: FunctionRecord,
    sequence: TokenSequence,
    bug_type: BugType,
    vocab: Option<&CallVocabulary>,
) -> AnnotatedFunction {
    let targets = annotate(&sequence, bug_type, vocab);
    AnnotatedFunction {
        record,
        sequence,
        targets,
    }
}
