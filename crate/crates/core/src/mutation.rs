//! Fixed (non-learned) mutation: uniform target, uniform replacement.
//! Also the example types shared by static datasets and dynamic training.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotator::{AnnotatedFunction, BugType, MutationTarget};
use crate::error::{Error, Result};
use crate::tokenizer::{SubtokenEncoding, SubtokenModel, TokenSequence};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mutant {
    pub source_id: String,
    pub target_index: usize,
    pub original: String,
    pub replacement: String,
    pub mutated_sequence: TokenSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Mutant,
}

/// An encoded function ready for the detector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source_id: String,
    /// Token texts, sentinels included.
    pub tokens: Vec<String>,
    pub encoding: SubtokenEncoding,
    pub label: Label,
    /// 0 (the CLS token) for real examples.
    pub gold_location: usize,
    /// Candidate bug locations, ascending, always containing 0.
    pub location_mask: Vec<usize>,
}

impl Example {
    pub fn real(function: &AnnotatedFunction, encoding: SubtokenEncoding) -> Self {
        Example {
            source_id: function.record.id.clone(),
            tokens: function.sequence.texts(),
            encoding,
            label: Label::Real,
            gold_location: 0,
            location_mask: function.location_mask(),
        }
    }

    /// `encoding` must be the encoding of the unmutated function; the mutated
    /// token's span is re-encoded.
    pub fn from_mutant(
        function: &AnnotatedFunction,
        mutant: &Mutant,
        encoding: &SubtokenEncoding,
        replacement_ids: &[u32],
    ) -> Self {
        Example {
            source_id: function.record.id.clone(),
            tokens: mutant.mutated_sequence.texts(),
            encoding: encoding.splice(mutant.target_index, replacement_ids),
            label: Label::Mutant,
            gold_location: mutant.target_index,
            location_mask: function.location_mask(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if !self.location_mask.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "location mask of {} lacks the CLS index",
                self.source_id
            )));
        }
        if !self.location_mask.contains(&self.gold_location) {
            return Err(Error::GoldOutsideMask {
                gold: self.gold_location,
            });
        }
        match (self.label, self.gold_location) {
            (Label::Real, 0) => Ok(()),
            (Label::Mutant, g) if g != 0 => Ok(()),
            _ => Err(Error::InvalidArgument(format!(
                "label {:?} inconsistent with gold location {}",
                self.label, self.gold_location
            ))),
        }
    }
}

/// Picks a target uniformly among the function's annotated targets.
pub fn sample_target<'a, R: Rng + ?Sized>(
    function: &'a AnnotatedFunction,
    rng: &mut R,
) -> Result<&'a MutationTarget> {
    function.targets.choose(rng).ok_or(Error::NoTargets)
}

/// Replaces the target token with a candidate drawn uniformly.
pub fn mutate<R: Rng + ?Sized>(function: &AnnotatedFunction, target: &MutationTarget, rng: &mut R) -> Mutant {
    let replacement = target
        .candidates
        .choose(rng)
        .expect("annotated targets have candidates")
        .clone();
    mutant_with(function, target, replacement)
}

pub fn mutant_with(function: &AnnotatedFunction, target: &MutationTarget, replacement: String) -> Mutant {
    let original = function.sequence.tokens()[target.token_index].text.clone();
    debug_assert_ne!(original, replacement);
    Mutant {
        source_id: function.record.id.clone(),
        target_index: target.token_index,
        original,
        mutated_sequence: function.sequence.with_replacement(target.token_index, &replacement),
        replacement,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Multiplicity {
    Once,
    Thrice,
}

impl Multiplicity {
    pub fn count(self) -> usize {
        match self {
            Multiplicity::Once => 1,
            Multiplicity::Thrice => 3,
        }
    }
}

impl TryFrom<u32> for Multiplicity {
    type Error = Error;

    fn try_from(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Multiplicity::Once),
            3 => Ok(Multiplicity::Thrice),
            _ => Err(Error::InvalidArgument(format!("multiplicity must be 1 or 3, got {n}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExampleSet {
    pub bug_type: Option<BugType>,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExampleRecord {
    source_id: String,
    label: Label,
    gold_location: usize,
    tokens: Vec<String>,
    #[serde(default)]
    mask: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bug_type: Option<BugType>,
}

impl ExampleSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn n_mutants(&self) -> usize {
        self.examples.iter().filter(|e| e.label == Label::Mutant).count()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for e in &self.examples {
            let rec = ExampleRecord {
                source_id: e.source_id.clone(),
                label: e.label,
                gold_location: e.gold_location,
                tokens: e.tokens.clone(),
                mask: e.location_mask.clone(),
                bug_type: self.bug_type,
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads an example file and re-encodes its tokens with `model`. A missing
    /// mask defaults to `{0, gold}`.
    pub fn load(path: impl AsRef<Path>, model: &SubtokenModel) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut set = ExampleSet::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExampleRecord = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if set.bug_type.is_none() {
                set.bug_type = rec.bug_type;
            }
            let mut mask = rec.mask;
            if mask.is_empty() {
                mask = vec![0, rec.gold_location];
            }
            mask.sort_unstable();
            mask.dedup();
            let example = Example {
                encoding: model.encode_texts(&rec.tokens),
                source_id: rec.source_id,
                tokens: rec.tokens,
                label: rec.label,
                gold_location: rec.gold_location,
                location_mask: mask,
            };
            example.check().map_err(|e| Error::MalformedLine {
                line: i + 1,
                reason: e.to_string(),
            })?;
            set.examples.push(example);
        }
        Ok(set)
    }
}

/// Static dataset: per function with targets, up to `multiplicity` distinct
/// mutants, each paired with a copy of the unmutated function.
pub fn generate_static<R: Rng + ?Sized>(
    corpus: &[AnnotatedFunction],
    bug_type: BugType,
    multiplicity: Multiplicity,
    model: &SubtokenModel,
    rng: &mut R,
) -> ExampleSet {
    let mut examples = Vec::new();
    for function in corpus {
        if function.targets.is_empty() {
            continue;
        }
        let space: usize = function.targets.iter().map(|t| t.candidates.len()).sum();
        let wanted = multiplicity.count().min(space);
        let mut chosen: HashSet<(usize, String)> = HashSet::new();
        let mut mutants = Vec::with_capacity(wanted);
        while mutants.len() < wanted {
            let target = sample_target(function, rng).expect("non-empty targets");
            let m = mutate(function, target, rng);
            if chosen.insert((m.target_index, m.replacement.clone())) {
                mutants.push(m);
            }
        }
        let encoding = model.encode(&function.sequence);
        for m in mutants {
            let ids = model.encode_token(&m.replacement);
            examples.push(Example::from_mutant(function, &m, &encoding, &ids));
            examples.push(Example::real(function, encoding.clone()));
        }
    }
    ExampleSet {
        bug_type: Some(bug_type),
        examples,
    }
}
