//! Contextual mutation with a masked-language-model encoder.
//!
//! A target token is collapsed to one `[M]` slot. The hidden state there,
//! projected by the head, is scored against every option's mean subtoken
//! embedding. Sampling uses a softmax over the candidates only; the loss
//! uses a softmax over candidates plus the original token.

use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotator::{AnnotatedFunction, MutationTarget};
use crate::encoder::{self, EncoderConfig, Mode, TOK};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tokenizer::{SubtokenEncoding, SubtokenModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mutator {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

/// One function with its target span replaced by a single mask id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedInput {
    pub source_id: String,
    pub token_index: usize,
    pub ids: Vec<u32>,
    pub mask_slot: usize,
    /// Candidates with the original removed.
    pub candidates: Vec<String>,
    pub candidate_ids: Vec<Vec<u32>>,
    pub original: String,
    pub original_ids: Vec<u32>,
}

pub type MaskedBatch = Vec<MaskedInput>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementDistribution {
    pub candidates: Vec<String>,
    pub probs: Vec<f64>,
}

impl ReplacementDistribution {
    pub fn prob(&self, token: &str) -> f64 {
        self.candidates
            .iter()
            .position(|c| c == token)
            .map_or(0.0, |i| self.probs[i])
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

/// Masks one token of an already encoded function.
pub fn mask_encoded(
    function: &AnnotatedFunction,
    encoding: &SubtokenEncoding,
    target: &MutationTarget,
    model: &SubtokenModel,
) -> MaskedInput {
    let original = function.sequence.tokens()[target.token_index].text.clone();
    let masked = encoding.splice(target.token_index, &[model.special().mask]);
    let candidates: Vec<String> = target.candidates.iter().filter(|c| **c != original).cloned().collect();
    MaskedInput {
        source_id: function.record.id.clone(),
        token_index: target.token_index,
        mask_slot: masked.spans[target.token_index].start,
        ids: masked.ids,
        candidate_ids: candidates.iter().map(|c| model.encode_token(c)).collect(),
        original_ids: model.encode_token(&original),
        candidates,
        original,
    }
}

pub fn mask_targets(items: &[(&AnnotatedFunction, &MutationTarget)], model: &SubtokenModel) -> MaskedBatch {
    items
        .iter()
        .map(|(f, t)| mask_encoded(f, &model.encode(&f.sequence), t, model))
        .collect()
}

/// Softmax over the candidates after dropping any copy of `original`.
pub fn replacement_distribution(
    candidates: &[String],
    scores: &[f64],
    original: &str,
) -> Result<ReplacementDistribution> {
    if candidates.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} candidates but {} scores",
            candidates.len(),
            scores.len()
        )));
    }
    let (kept, kept_scores): (Vec<String>, Vec<f64>) = candidates
        .iter()
        .zip(scores)
        .filter(|(c, _)| c.as_str() != original)
        .map(|(c, s)| (c.clone(), *s))
        .unzip();
    if kept.is_empty() {
        return Err(Error::NoCandidates);
    }
    Ok(ReplacementDistribution {
        candidates: kept,
        probs: softmax(&kept_scores),
    })
}

pub fn sample_replacement<R: Rng + ?Sized>(dist: &ReplacementDistribution, rng: &mut R) -> String {
    let index = WeightedIndex::new(&dist.probs).expect("normalized distribution");
    dist.candidates[index.sample(rng)].clone()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Loss and restricted distribution for one masked input.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmOutcome {
    pub loss: f64,
    pub distribution: ReplacementDistribution,
}

impl Mutator {
    /// Encoder initialized randomly; the query head starts at zero, so every
    /// initial distribution is uniform.
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut params = encoder::init_params(&config, rng)?;
        params.push_filled("mut.w", (config.hidden, config.hidden), 0.0);
        params.push_filled("mut.b", (1, config.hidden), 0.0);
        Ok(Mutator { config, params })
    }

    fn head(&self) -> usize {
        self.config.n_tensors()
    }

    fn mean_embedding(&self, ids: &[u32]) -> Array1<f64> {
        let tok = self.params.get(TOK);
        let mut e = Array1::zeros(self.config.hidden);
        for &id in ids {
            e += &tok.row(id as usize);
        }
        e / ids.len().max(1) as f64
    }

    /// Raw scores of `input.candidates`.
    pub fn candidate_scores(&self, input: &MaskedInput, mode: Mode<'_>) -> Result<Vec<f64>> {
        if input.candidates.is_empty() {
            return Err(Error::NoCandidates);
        }
        let positions: Vec<usize> = (0..input.ids.len()).collect();
        let (hidden, _) = encoder::forward(&self.config, &self.params, &input.ids, &positions, mode)?;
        let u = self.query(&hidden, input.mask_slot);
        Ok(input.candidate_ids.iter().map(|ids| u.dot(&self.mean_embedding(ids))).collect())
    }

    fn query(&self, hidden: &Array2<f64>, slot: usize) -> Array1<f64> {
        hidden.row(slot).dot(self.params.get(self.head())) + self.params.get(self.head() + 1).row(0)
    }

    /// Runs the mutator on one input. With `grads`, adds `weight * dL/dparams`.
    pub fn run(
        &self,
        input: &MaskedInput,
        positions: &[usize],
        mode: Mode<'_>,
        weight: f64,
        grads: Option<&mut ParamSet>,
    ) -> Result<MlmOutcome> {
        if input.candidates.is_empty() {
            return Err(Error::NoCandidates);
        }
        let (hidden, cache) = encoder::forward(&self.config, &self.params, &input.ids, positions, mode)?;
        let u = self.query(&hidden, input.mask_slot);
        // options: candidates, then the original last
        let option_ids: Vec<&Vec<u32>> = input.candidate_ids.iter().chain([&input.original_ids]).collect();
        let embeddings: Vec<Array1<f64>> = option_ids.iter().map(|ids| self.mean_embedding(ids)).collect();
        let scores: Vec<f64> = embeddings.iter().map(|e| u.dot(e)).collect();
        let k = input.candidates.len();
        let full = softmax(&scores);
        let loss = -full[k].ln();
        let distribution = ReplacementDistribution {
            candidates: input.candidates.clone(),
            probs: softmax(&scores[..k]),
        };
        if let Some(grads) = grads {
            let head = self.head();
            let mut du = Array1::zeros(self.config.hidden);
            for (j, e) in embeddings.iter().enumerate() {
                let ds = weight * (full[j] - if j == k { 1.0 } else { 0.0 });
                du.scaled_add(ds, e);
                let share = ds / option_ids[j].len().max(1) as f64;
                let tok = grads.get_mut(TOK);
                for &id in option_ids[j] {
                    tok.row_mut(id as usize).scaled_add(share, &u);
                }
            }
            let h = hidden.row(input.mask_slot);
            {
                let dw = grads.get_mut(head);
                for (r, &hv) in h.iter().enumerate() {
                    dw.row_mut(r).scaled_add(hv, &du);
                }
            }
            grads.get_mut(head + 1).row_mut(0).scaled_add(1.0, &du);
            let mut d_hidden = Array2::zeros(hidden.raw_dim());
            d_hidden
                .row_mut(input.mask_slot)
                .assign(&self.params.get(head).dot(&du));
            encoder::backward(&self.config, &self.params, &cache, &d_hidden, grads);
        }
        Ok(MlmOutcome { loss, distribution })
    }
}

/// Mean masked-token loss over a batch, positions unshifted.
pub fn mlm_loss(mutator: &Mutator, batch: &MaskedBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty masked batch".into()));
    }
    let mut total = 0.0;
    for input in batch {
        let positions: Vec<usize> = (0..input.ids.len()).collect();
        total += mutator.run(input, &positions, Mode::Infer, 1.0, None)?.loss;
    }
    Ok(total / batch.len() as f64)
}
