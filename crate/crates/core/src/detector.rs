//! Pointer-style bug classification and localization.
//!
//! Every token gets a bugginess score from its first subtoken's hidden state.
//! The pointer is a softmax restricted to the location mask, whose index 0
//! (the CLS token) stands for "no bug".

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::mutation::{Example, Label};
use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub scores: Vec<f64>,
    /// Zero outside the location mask.
    pub probs: Vec<f64>,
    pub prediction: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub is_buggy: bool,
    pub location: usize,
    pub confidence: f64,
}

impl Detector {
    /// Encoder initialized randomly; the scoring head starts at zero.
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut params = encoder::init_params(&config, rng)?;
        params.push_filled("det.w", (config.hidden, 1), 0.0);
        params.push_filled("det.b", (1, 1), 0.0);
        Ok(Detector { config, params })
    }

    fn head(&self) -> usize {
        self.config.n_tensors()
    }

    fn scores_from_hidden(&self, hidden: &Array2<f64>, first: &[usize]) -> Vec<f64> {
        bugginess_scores(hidden, first, self.params.get(self.head()), self.params.get(self.head() + 1)[(0, 0)])
    }

    pub fn output(&self, example: &Example, positions: &[usize], mode: Mode<'_>) -> Result<DetectorOutput> {
        let (hidden, _) = encoder::forward(&self.config, &self.params, &example.encoding.ids, positions, mode)?;
        let scores = self.scores_from_hidden(&hidden, &example.encoding.first_subtokens());
        let probs = pointer_probabilities(&scores, &example.location_mask)?;
        let prediction = argmax_in_mask(&probs, &example.location_mask);
        Ok(DetectorOutput {
            scores,
            probs,
            prediction,
        })
    }

    /// Inference at unshifted positions.
    pub fn predict(&self, example: &Example) -> Result<Prediction> {
        self.predict_at(example, 0)
    }

    /// Inference with every position id shifted by `offset`.
    pub fn predict_at(&self, example: &Example, offset: usize) -> Result<Prediction> {
        let positions: Vec<usize> = (offset..offset + example.encoding.len()).collect();
        let out = self.output(example, &positions, Mode::Infer)?;
        Ok(Prediction {
            is_buggy: out.prediction != 0,
            location: out.prediction,
            confidence: out.probs[out.prediction],
        })
    }

    /// Loss of one example; adds `weight * dL/dparams` into `grads`.
    pub fn loss_and_grad(
        &self,
        example: &Example,
        positions: &[usize],
        mode: Mode<'_>,
        weight: f64,
        grads: &mut ParamSet,
    ) -> Result<f64> {
        if !example.location_mask.contains(&example.gold_location) {
            return Err(Error::GoldOutsideMask {
                gold: example.gold_location,
            });
        }
        let (hidden, cache) = encoder::forward(&self.config, &self.params, &example.encoding.ids, positions, mode)?;
        let first = example.encoding.first_subtokens();
        let scores = self.scores_from_hidden(&hidden, &first);
        let probs = pointer_probabilities(&scores, &example.location_mask)?;
        let loss = -probs[example.gold_location].ln();

        let head = self.head();
        let w = self.params.get(head).column(0).to_owned();
        let mut d_hidden = Array2::zeros(hidden.raw_dim());
        let mut dw = Array2::zeros((self.config.hidden, 1));
        let mut db = 0.0;
        for &i in &example.location_mask {
            let ds = weight * (probs[i] - if i == example.gold_location { 1.0 } else { 0.0 });
            let row = first[i];
            dw.column_mut(0).scaled_add(ds, &hidden.row(row));
            db += ds;
            d_hidden.row_mut(row).scaled_add(ds, &w);
        }
        *grads.get_mut(head) += &dw;
        grads.get_mut(head + 1)[(0, 0)] += db;
        encoder::backward(&self.config, &self.params, &cache, &d_hidden, grads);
        Ok(loss)
    }
}

/// `b_i = h[first[i]] . w + b` for every token `i`.
pub fn bugginess_scores(hidden: &Array2<f64>, first: &[usize], w: &Array2<f64>, b: f64) -> Vec<f64> {
    let w = w.slice(s![.., 0]);
    first.iter().map(|&r| hidden.row(r).dot(&w) + b).collect()
}

/// Softmax over `mask`; every index outside it gets exactly 0.
pub fn pointer_probabilities(scores: &[f64], mask: &[usize]) -> Result<Vec<f64>> {
    if mask.is_empty() {
        return Err(Error::InvalidArgument("empty location mask".into()));
    }
    if let Some(&bad) = mask.iter().find(|&&i| i >= scores.len()) {
        return Err(Error::InvalidArgument(format!(
            "mask index {bad} outside {} tokens",
            scores.len()
        )));
    }
    let max = mask.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut probs = vec![0.0; scores.len()];
    let mut z = 0.0;
    for &i in mask {
        let e = (scores[i] - max).exp();
        probs[i] = e;
        z += e;
    }
    for &i in mask {
        probs[i] /= z;
    }
    Ok(probs)
}

/// Lowest index among the maximal probabilities in `mask`.
pub fn argmax_in_mask(probs: &[f64], mask: &[usize]) -> usize {
    let mut sorted = mask.to_vec();
    sorted.sort_unstable();
    let mut best = sorted[0];
    for &i in &sorted[1..] {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    best
}

/// Mean of `-ln p[gold]` over a batch of pointer distributions.
pub fn detector_loss(probs: &[Vec<f64>], gold: &[usize]) -> Result<f64> {
    if probs.len() != gold.len() || probs.is_empty() {
        return Err(Error::Shape(format!(
            "{} distributions for {} gold locations",
            probs.len(),
            gold.len()
        )));
    }
    let mut total = 0.0;
    for (p, &g) in probs.iter().zip(gold) {
        match p.get(g) {
            Some(&pg) if pg > 0.0 => total -= pg.ln(),
            _ => return Err(Error::GoldOutsideMask { gold: g }),
        }
    }
    Ok(total / probs.len() as f64)
}

/// Label implied by a pointer location.
pub fn label_of(location: usize) -> Label {
    if location == 0 {
        Label::Real
    } else {
        Label::Mutant
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::SubtokenEncoding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example(ids: Vec<u32>, spans: Vec<std::ops::Range<usize>>, mask: Vec<usize>, gold: usize) -> Example {
        let n = spans.len();
        Example {
            source_id: "t".into(),
            tokens: vec![String::new(); n],
            encoding: SubtokenEncoding { ids, spans },
            label: label_of(gold),
            gold_location: gold,
            location_mask: mask,
        }
    }

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            dropout: 0.0,
            max_position: 16,
            vocab_size: 12,
        }
    }

    #[test]
    fn pointer_closed_forms() {
        let p = pointer_probabilities(&[0.3; 6], &[0, 2, 3, 5]).unwrap();
        for i in [0, 2, 3, 5] {
            assert!((p[i] - 0.25).abs() < 1e-12);
        }
        assert_eq!((p[1], p[4]), (0.0, 0.0));
        let mut s = vec![0.0; 6];
        s[5] = 3f64.ln();
        let p = pointer_probabilities(&s, &[0, 5]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[5] - 0.75).abs() < 1e-12);
        assert!(pointer_probabilities(&s, &[]).is_err());
        assert!(pointer_probabilities(&s, &[0, 6]).is_err());
    }

    #[test]
    fn shift_invariance_and_large_scores() {
        let s = [1.0, -2.0, 700.0, 3.5];
        let shifted: Vec<f64> = s.iter().map(|v| v + 123.456).collect();
        let a = pointer_probabilities(&s, &[0, 1, 2, 3]).unwrap();
        let b = pointer_probabilities(&shifted, &[0, 1, 2, 3]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(a.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn loss_closed_forms() {
        assert_eq!(detector_loss(&[vec![0.0, 1.0]], &[1]).unwrap(), 0.0);
        let u = vec![0.25; 4];
        assert!((detector_loss(&[u.clone()], &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            detector_loss(&[vec![1.0, 0.0]], &[1]),
            Err(Error::GoldOutsideMask { gold: 1 })
        ));
    }

    #[test]
    fn zero_head_predicts_lowest_mask_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Detector::new(tiny(), &mut rng).unwrap();
        let ex = example(vec![2, 5, 6, 7, 3], vec![0..1, 1..3, 3..4, 4..5], vec![0, 1, 2], 2);
        let out = d.output(&ex, &[0, 1, 2, 3, 4], Mode::Infer).unwrap();
        assert!(out.scores.iter().all(|&s| s == 0.0));
        assert_eq!(out.scores.len(), 4);
        let pred = d.predict(&ex).unwrap();
        assert_eq!(pred.location, 0);
        assert!(!pred.is_buggy);
        assert!((pred.confidence - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn shifted_prediction_uses_shifted_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = Detector::new(tiny(), &mut rng).unwrap();
        for i in 0..d.params.len() {
            d.params.get_mut(i).mapv_inplace(|v| v + rng.gen_range(-0.5..0.5));
        }
        let ex = example(vec![2, 5, 6, 7, 3], vec![0..1, 1..3, 3..4, 4..5], vec![0, 1, 2], 2);
        assert_eq!(d.predict_at(&ex, 0).unwrap(), d.predict(&ex).unwrap());
        let out = d.output(&ex, &[4, 5, 6, 7, 8], Mode::Infer).unwrap();
        assert_eq!(d.predict_at(&ex, 4).unwrap().confidence, out.probs[out.prediction]);
        assert!(d.predict_at(&ex, 12).is_err());
    }

    #[test]
    fn head_and_encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Detector::new(tiny(), &mut rng).unwrap();
        for i in 0..d.params.len() {
            d.params.get_mut(i).mapv_inplace(|v| v + rng.gen_range(-0.3..0.3));
        }
        let ex = example(vec![2, 5, 6, 7, 8, 3], vec![0..1, 1..3, 3..4, 4..5, 5..6], vec![0, 1, 3], 3);
        let pos = [1, 2, 3, 4, 5, 6];
        let mut grads = d.params.zeros_like();
        d.loss_and_grad(&ex, &pos, Mode::Infer, 1.0, &mut grads).unwrap();
        let h = 1e-4;
        let coords: Vec<_> = d.params.coordinates().collect();
        for (t, j) in coords {
            let orig = d.params.scalar(t, j);
            let mut eval = |v: f64| {
                *d.params.scalar_mut(t, j) = v;
                let mut g = d.params.zeros_like();
                d.loss_and_grad(&ex, &pos, Mode::Infer, 1.0, &mut g).unwrap()
            };
            let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            *d.params.scalar_mut(t, j) = orig;
            let analytic = grads.scalar(t, j);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(rel <= 1e-4, "{} [{j}]: {analytic} vs {numeric}", d.params.names()[t]);
        }
    }
}
