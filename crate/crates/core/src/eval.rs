//! Classification and localization metrics, cross-evaluation tables and the
//! paired real-bug benchmark loader.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotator::{annotate, BugType, CallVocabulary};
use crate::detector::{Detector, Prediction};
use crate::error::{Error, Result};
use crate::mutation::{Example, ExampleSet, Label};
use crate::tokenizer::{tokenize, Grammar, SubtokenModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classification_accuracy: f64,
    /// Over buggy examples only; 0 when there are none.
    pub localization_accuracy: f64,
    pub n_examples: usize,
    pub n_buggy: usize,
}

pub fn classification_accuracy(predictions: &[Prediction], labels: &[Label]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p.is_buggy == (**l == Label::Mutant))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub accuracy: f64,
    pub n_buggy: usize,
    /// Real examples passed in and skipped.
    pub excluded: usize,
}

/// Exact-index accuracy over the `Label::Mutant` entries of `gold`.
pub fn localization_accuracy(predictions: &[Prediction], gold: &[(Label, usize)]) -> Result<Localization> {
    if predictions.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold entries",
            predictions.len(),
            gold.len()
        )));
    }
    let mut hits = 0;
    let mut n_buggy = 0;
    for (p, &(label, g)) in predictions.iter().zip(gold) {
        if label == Label::Mutant {
            n_buggy += 1;
            hits += usize::from(p.location == g);
        }
    }
    Ok(Localization {
        accuracy: if n_buggy == 0 { 0.0 } else { hits as f64 / n_buggy as f64 },
        n_buggy,
        excluded: gold.len() - n_buggy,
    })
}

pub fn report(predictions: &[Prediction], examples: &[Example]) -> Result<MetricsReport> {
    let labels: Vec<Label> = examples.iter().map(|e| e.label).collect();
    let gold: Vec<(Label, usize)> = examples.iter().map(|e| (e.label, e.gold_location)).collect();
    let loc = localization_accuracy(predictions, &gold)?;
    Ok(MetricsReport {
        classification_accuracy: classification_accuracy(predictions, &labels)?,
        localization_accuracy: loc.accuracy,
        n_examples: examples.len(),
        n_buggy: loc.n_buggy,
    })
}

pub fn predict_all(detector: &Detector, set: &ExampleSet) -> Result<Vec<Prediction>> {
    set.examples.iter().map(|e| detector.predict(e)).collect()
}

pub fn evaluate(detector: &Detector, set: &ExampleSet) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    report(&predict_all(detector, set)?, &set.examples)
}

/// A detector with the bug type it was trained for, if known.
pub struct EvalModel<'a> {
    pub name: String,
    pub detector: &'a Detector,
    pub bug_type: Option<BugType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEvalMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `cells[row][col]`.
    pub cells: Vec<Vec<MetricsReport>>,
}

impl CrossEvalMatrix {
    pub fn cell(&self, row: &str, col: &str) -> Option<&MetricsReport> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.cols.iter().position(|x| x == col)?;
        Some(&self.cells[r][c])
    }

    /// Aligned text table of classification accuracies in percent.
    pub fn to_text(&self) -> String {
        let w0 = self.rows.iter().map(String::len).max().unwrap_or(0).max(5);
        let widths: Vec<usize> = self.cols.iter().map(|c| c.len().max(7)).collect();
        let mut out = format!("{:<w0$}", "model");
        for (c, w) in self.cols.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for (r, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{row:<w0$}");
            for (cell, w) in self.cells[r].iter().zip(&widths) {
                let _ = write!(out, "  {:>w$}", format!("{:.2}%", 100.0 * cell.classification_accuracy));
            }
            out.push('\n');
        }
        out
    }
}

fn compatible(a: BugType, b: BugType) -> bool {
    a.family() == b.family()
}

pub fn cross_evaluate(models: &[EvalModel<'_>], sets: &[(String, &ExampleSet)]) -> Result<CrossEvalMatrix> {
    if models.is_empty() || sets.is_empty() {
        return Err(Error::InvalidArgument("cross evaluation needs models and test sets".into()));
    }
    if let Some((name, _)) = sets.iter().find(|(_, s)| s.is_empty()) {
        return Err(Error::InvalidArgument(format!("test set {name} is empty")));
    }
    for m in models {
        for (name, s) in sets {
            if let (Some(a), Some(b)) = (m.bug_type, s.bug_type) {
                if !compatible(a, b) {
                    return Err(Error::IncompatibleSchema(format!(
                        "model {} ({a}) cannot be scored on {name} ({b})",
                        m.name
                    )));
                }
            }
        }
    }
    let cells = models
        .iter()
        .map(|m| sets.iter().map(|(_, s)| evaluate(m.detector, s)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossEvalMatrix {
        rows: models.iter().map(|m| m.name.clone()).collect(),
        cols: sets.iter().map(|(n, _)| n.clone()).collect(),
        cells,
    })
}

#[derive(Debug, Clone, Deserialize)]
struct PairRecord {
    #[serde(default)]
    id: Option<String>,
    buggy_source: String,
    fixed_source: String,
    bug_token_index: usize,
}

#[derive(Debug, Default)]
pub struct PairedBenchmark {
    pub set: ExampleSet,
    /// One `Error::RejectedPair` per skipped line.
    pub rejected: Vec<Error>,
}

/// Reads `{buggy_source, fixed_source, bug_token_index}` lines. Token indices
/// count the leading CLS token as 0. Each accepted pair yields a mutant and
/// a real example sharing the location mask of the fixed function.
pub fn load_paired_benchmark(
    path: impl AsRef<Path>,
    model: &SubtokenModel,
    bug_type: BugType,
    vocab: Option<&CallVocabulary>,
) -> Result<PairedBenchmark> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = PairedBenchmark {
        set: ExampleSet {
            bug_type: Some(bug_type),
            examples: Vec::new(),
        },
        rejected: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let reject = |reason: String| Error::RejectedPair { index: i + 1, reason };
        let rec: PairRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                out.rejected.push(reject(e.to_string()));
                continue;
            }
        };
        let (buggy, fixed) = match (
            tokenize(&rec.buggy_source, Grammar::Java),
            tokenize(&rec.fixed_source, Grammar::Java),
        ) {
            (Ok(b), Ok(f)) => (b, f),
            (Err(e), _) | (_, Err(e)) => {
                out.rejected.push(reject(e.to_string()));
                continue;
            }
        };
        if buggy.len() != fixed.len() {
            out.rejected.push(reject(format!(
                "token counts differ ({} vs {})",
                buggy.len(),
                fixed.len()
            )));
            continue;
        }
        let diffs: Vec<usize> = (0..buggy.len())
            .filter(|&k| buggy.tokens()[k].text != fixed.tokens()[k].text)
            .collect();
        if diffs != [rec.bug_token_index] {
            out.rejected.push(reject(format!(
                "sources differ at {diffs:?}, expected exactly [{}]",
                rec.bug_token_index
            )));
            continue;
        }
        let mut mask: Vec<usize> = std::iter::once(0)
            .chain(annotate(&fixed, bug_type, vocab).iter().map(|t| t.token_index))
            .chain([rec.bug_token_index])
            .collect();
        mask.sort_unstable();
        mask.dedup();
        let id = rec.id.unwrap_or_else(|| format!("pair-{}", i + 1));
        out.set.examples.push(Example {
            source_id: id.clone(),
            tokens: buggy.texts(),
            encoding: model.encode(&buggy),
            label: Label::Mutant,
            gold_location: rec.bug_token_index,
            location_mask: mask.clone(),
        });
        out.set.examples.push(Example {
            source_id: id,
            tokens: fixed.texts(),
            encoding: model.encode(&fixed),
            label: Label::Real,
            gold_location: 0,
            location_mask: mask,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_bpe;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred(location: usize) -> Prediction {
        Prediction {
            is_buggy: location != 0,
            location,
            confidence: 1.0,
        }
    }

    #[test]
    fn accuracy_closed_forms() {
        let labels = [Label::Real, Label::Mutant, Label::Mutant, Label::Real];
        assert_eq!(classification_accuracy(&[pred(0), pred(3), pred(2), pred(0)], &labels).unwrap(), 1.0);
        assert_eq!(classification_accuracy(&[pred(0), pred(3), pred(0), pred(0)], &labels).unwrap(), 0.75);
        assert!(classification_accuracy(&[pred(0)], &labels).is_err());

        let gold = [(Label::Real, 0), (Label::Mutant, 3), (Label::Mutant, 2)];
        let perfect = localization_accuracy(&[pred(0), pred(3), pred(2)], &gold).unwrap();
        assert_eq!((perfect.accuracy, perfect.n_buggy, perfect.excluded), (1.0, 2, 1));
        let cls = localization_accuracy(&[pred(0), pred(0), pred(0)], &gold).unwrap();
        assert_eq!(cls.accuracy, 0.0);
    }

    #[test]
    fn coin_flip_classifier_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 10_000;
        let labels: Vec<Label> = (0..n).map(|i| if i % 2 == 0 { Label::Real } else { Label::Mutant }).collect();
        let preds: Vec<Prediction> = (0..n).map(|_| pred(usize::from(rng.gen::<bool>()))).collect();
        let acc = classification_accuracy(&preds, &labels).unwrap();
        // sd = 0.005; 0.015 is 3 sd
        assert!((acc - 0.5).abs() < 0.015);
    }

    #[test]
    fn uniform_localizer_matches_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let mut gold = Vec::new();
        let mut preds = Vec::new();
        let mut expected = 0.0;
        for _ in 0..n {
            let k = rng.gen_range(2..8usize);
            let g = rng.gen_range(1..k);
            gold.push((Label::Mutant, g));
            preds.push(pred(rng.gen_range(0..k)));
            expected += 1.0 / k as f64;
        }
        expected /= n as f64;
        let acc = localization_accuracy(&preds, &gold).unwrap().accuracy;
        assert!((acc - expected).abs() < 0.01, "{acc} vs {expected}");
    }

    fn write_pairs(lines: &[String]) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), lines.join("\n")).unwrap();
        f
    }

    fn pair(buggy: &str, fixed: &str, index: usize) -> String {
        serde_json::json!({"buggy_source": buggy, "fixed_source": fixed, "bug_token_index": index}).to_string()
    }

    #[test]
    fn paired_benchmark_loading() {
        let fixed = "boolean f(int a, int b) { return a < b; }";
        let seq = tokenize(fixed, Grammar::Java).unwrap();
        let (model, _) = train_bpe(&[seq.clone()], 10).unwrap();
        let lt = seq.tokens().iter().position(|t| t.text == "<").unwrap();
        let mut lines: Vec<String> = (0..50)
            .map(|_| pair("boolean f(int a, int b) { return a > b; }", fixed, lt))
            .collect();
        lines.push(pair("boolean f(int a, int b) { return b > a; }", fixed, lt));
        let file = write_pairs(&lines);
        let loaded = load_paired_benchmark(file.path(), &model, BugType::BorStrong, None).unwrap();
        assert_eq!(loaded.set.len(), 100);
        assert_eq!(loaded.set.n_mutants(), 50);
        assert_eq!(loaded.rejected.len(), 1);
        assert!(matches!(loaded.rejected[0], Error::RejectedPair { index: 51, .. }));
        for e in &loaded.set.examples {
            e.check().unwrap();
        }
        // balance identity
        let always_real: Vec<Prediction> = loaded.set.examples.iter().map(|_| pred(0)).collect();
        let r = report(&always_real, &loaded.set.examples).unwrap();
        assert_eq!(r.classification_accuracy, 0.5);
        assert_eq!(r.localization_accuracy, 0.0);
    }

    #[test]
    fn cross_eval_shape_and_errors() {
        use crate::encoder::EncoderConfig;
        let fixed = "boolean f(int a, int b) { return a < b; }";
        let seq = tokenize(fixed, Grammar::Java).unwrap();
        let (model, _) = train_bpe(&[seq.clone()], 10).unwrap();
        let lt = seq.tokens().iter().position(|t| t.text == "<").unwrap();
        let file = write_pairs(&[pair("boolean f(int a, int b) { return a > b; }", fixed, lt)]);
        let set = load_paired_benchmark(file.path(), &model, BugType::BorStrong, None).unwrap().set;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = EncoderConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            dropout: 0.0,
            max_position: 64,
            vocab_size: model.vocab_size(),
        };
        let d = Detector::new(cfg, &mut rng).unwrap();
        let models = [
            EvalModel {
                name: "w".into(),
                detector: &d,
                bug_type: Some(BugType::BorWeak),
            },
            EvalModel {
                name: "s".into(),
                detector: &d,
                bug_type: Some(BugType::BorStrong),
            },
        ];
        let sets = [("a".to_string(), &set), ("b".to_string(), &set), ("c".to_string(), &set)];
        let m = cross_evaluate(&models, &sets).unwrap();
        assert_eq!(m.cells.iter().map(Vec::len).sum::<usize>(), 6);
        assert_eq!(m.cell("s", "b").unwrap().classification_accuracy, 0.5);
        assert_eq!(m.to_text().lines().count(), 3);

        let empty = ExampleSet::default();
        assert!(cross_evaluate(&models, &[("e".to_string(), &empty)]).is_err());
        let var = EvalModel {
            name: "v".into(),
            detector: &d,
            bug_type: Some(BugType::VarMisuse),
        };
        assert!(matches!(
            cross_evaluate(&[var], &sets),
            Err(Error::IncompatibleSchema(_))
        ));
    }
}
