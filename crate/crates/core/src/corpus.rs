//! Ingestion, deduplication, splitting and length filtering of function corpora.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::SubtokenEncoding;

/// A likely-correct function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub id: String,
    pub source: String,
    #[serde(default = "default_language")]
    pub language: String,
}

fn default_language() -> String {
    "java".to_string()
}

impl FunctionRecord {
    pub fn new(id: impl Into<String>, source: impl Into<String>) -> Self {
        FunctionRecord {
            id: id.into(),
            source: source.into(),
            language: default_language(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub records: Vec<FunctionRecord>,
    /// `(line number, reason)` of skipped lines, 1-based.
    pub malformed: Vec<(usize, String)>,
}

/// Reads a JSONL corpus. In strict mode the first malformed line is an error;
/// otherwise malformed lines are skipped and reported.
pub fn load_corpus(path: impl AsRef<Path>, strict: bool) -> Result<LoadReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, strict)
}

pub fn parse_corpus(text: &str, strict: bool) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<FunctionRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(|r| {
                if r.source.trim().is_empty() {
                    Err("empty \"source\"".to_string())
                } else if !ids.insert(r.id.clone()) {
                    Err(format!("duplicate id {:?}", r.id))
                } else {
                    Ok(r)
                }
            });
        match parsed {
            Ok(r) => report.records.push(r),
            Err(reason) if strict => {
                return Err(Error::MalformedLine {
                    line: line_no,
                    reason,
                })
            }
            Err(reason) => report.malformed.push((line_no, reason)),
        }
    }
    Ok(report)
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[FunctionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Source text with every whitespace run collapsed to one space and trimmed.
pub fn normalize_whitespace(source: &str) -> String {
    source.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn normalized_hash(source: &str) -> u64 {
    let mut h = DefaultHasher::new();
    normalize_whitespace(source).hash(&mut h);
    h.finish()
}

/// Drops exact duplicates under whitespace normalization, keeping first occurrences.
pub fn dedup(records: Vec<FunctionRecord>) -> Vec<FunctionRecord> {
    let mut seen = HashSet::new();
    records
        .into_iter()
        .filter(|r| seen.insert((normalized_hash(&r.source), normalize_whitespace(&r.source))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub seed: u64,
    pub train: Vec<FunctionRecord>,
    pub validate: Vec<FunctionRecord>,
    pub test: Vec<FunctionRecord>,
}

/// Id-only view of a split, as written to disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub validate: Vec<String>,
    pub test: Vec<String>,
}

impl CorpusSplit {
    pub fn manifest(&self) -> SplitManifest {
        let ids = |rs: &[FunctionRecord]| rs.iter().map(|r| r.id.clone()).collect();
        SplitManifest {
            seed: self.seed,
            train: ids(&self.train),
            validate: ids(&self.validate),
            test: ids(&self.test),
        }
    }
}

/// Seeded shuffle-and-cut. Validation and test receive `floor(n * ratio)`
/// records; the remainder goes to training.
pub fn split_corpus(records: &[FunctionRecord], ratios: (f64, f64, f64), seed: u64) -> Result<CorpusSplit> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = records.len();
    let n_val = (n as f64 * va).floor() as usize;
    let n_test = (n as f64 * te).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok(CorpusSplit {
        seed,
        validate: pick(&order[..n_val]),
        test: pick(&order[n_val..n_val + n_test]),
        train: pick(&order[n_val + n_test..]),
    })
}

#[derive(Debug, Clone, Default)]
pub struct FilterReport {
    pub kept: Vec<FunctionRecord>,
    pub too_long: usize,
    pub failed: usize,
}

impl FilterReport {
    pub fn kept_fraction(&self) -> f64 {
        let total = self.kept.len() + self.too_long + self.failed;
        if total == 0 {
            0.0
        } else {
            self.kept.len() as f64 / total as f64
        }
    }
}

/// Keeps records whose encoding, sentinels included, has at most
/// `max_subtokens` ids. Records that fail to encode are dropped and counted.
pub fn filter_by_length<F>(records: &[FunctionRecord], mut encode: F, max_subtokens: usize) -> FilterReport
where
    F: FnMut(&FunctionRecord) -> Result<SubtokenEncoding>,
{
    let mut report = FilterReport::default();
    for r in records {
        match encode(r) {
            Ok(enc) if enc.len() <= max_subtokens => report.kept.push(r.clone()),
            Ok(_) => report.too_long += 1,
            Err(_) => report.failed += 1,
        }
    }
    report
}
