//! Joint training of mutator and detector.
//!
//! Each pipelined step trains the detector on the incoming real batch plus
//! the mutants produced from the previous batch, then hands the incoming
//! batch to the mutator. Epoch boundaries drop the carried mutants.

mod batching;
mod checkpoint;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batching::{make_length_batches, padded_tokens, route_fifty_fifty, Routing};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use crate::annotator::{AnnotatedFunction, BugType, CallVocabulary};
use crate::detector::Detector;
use crate::encoder::{position_ids, EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::mlm::{mask_encoded, sample_replacement, Mutator};
use crate::mutation::{mutate, sample_target, Example, ExampleSet, Label};
use crate::params::{Adam, AdamConfig, ParamSet};
use crate::tokenizer::{SubtokenEncoding, SubtokenModel};

/// Encoder shape without the vocabulary, which comes from the subtoken model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_position: usize,
}

impl Arch {
    pub fn detector() -> Self {
        Arch::from(EncoderConfig::detector(1))
    }

    pub fn mutator() -> Self {
        Arch::from(EncoderConfig::mutator(1))
    }

    pub fn with_vocab(self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            dropout: self.dropout,
            max_position: self.max_position,
            vocab_size,
        }
    }
}

impl From<EncoderConfig> for Arch {
    fn from(c: EncoderConfig) -> Self {
        Arch {
            layers: c.layers,
            hidden: c.hidden,
            heads: c.heads,
            dropout: c.dropout,
            max_position: c.max_position,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum LambdaPolicy {
    Fixed { value: f64 },
    /// Ratio of the loss EMAs, refreshed every [`LAMBDA_PERIOD`] steps.
    Auto,
}

pub const LAMBDA_PERIOD: u64 = 100;
pub const LAMBDA_RANGE: (f64, f64) = (1e-3, 1e3);
/// Smoothing of a 100-step exponential moving average.
pub const EMA_ALPHA: f64 = 2.0 / (LAMBDA_PERIOD as f64 + 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutatorMode {
    ClassicalWeak,
    ClassicalStrong,
    VarMisuse,
    ApiMisuse,
    Contextual,
}

impl MutatorMode {
    pub fn is_contextual(self) -> bool {
        self == MutatorMode::Contextual
    }

    /// Classical mode implied by a bug type.
    pub fn classical(bug_type: BugType) -> Self {
        match bug_type {
            BugType::BorWeak => MutatorMode::ClassicalWeak,
            BugType::BorStrong => MutatorMode::ClassicalStrong,
            BugType::VarMisuse => MutatorMode::VarMisuse,
            BugType::ApiMisuse => MutatorMode::ApiMisuse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: LambdaPolicy,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub total_steps: u64,
    pub token_budget: usize,
    pub max_subtokens: usize,
    pub seed: u64,
    pub mode: MutatorMode,
    /// Annotation used in contextual mode; classical modes imply their own.
    pub contextual_bug_type: BugType,
    pub finetune_examples: usize,
    pub bucket_width: usize,
    pub augment_offsets: bool,
    /// `false` mutates a routed half of each batch within the same step.
    pub pipelined: bool,
    pub validate_every: u64,
    pub detector: Arch,
    pub mutator: Arch,
    pub adam: AdamConfig,
    /// Record a per-step ledger of ids and token counts.
    pub trace: bool,
    /// Where to write the state when the loss stops being finite.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: LambdaPolicy::Auto,
            warmup_steps: 10_000,
            base_lr: 1e-3,
            total_steps: 100_000,
            token_budget: 12_500,
            max_subtokens: 250,
            seed: 0,
            mode: MutatorMode::Contextual,
            contextual_bug_type: BugType::BorWeak,
            finetune_examples: 0,
            bucket_width: 16,
            augment_offsets: true,
            pipelined: true,
            validate_every: 1_000,
            detector: Arch::detector(),
            mutator: Arch::mutator(),
            adam: AdamConfig::default(),
            trace: false,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    /// Short schedule for single-core runs.
    pub fn desk() -> Self {
        TrainConfig {
            warmup_steps: 100,
            total_steps: 2_000,
            token_budget: 2_500,
            validate_every: 200,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_budget < self.max_subtokens {
            return Err(Error::InvalidArgument(format!(
                "token budget {} below max_subtokens {}",
                self.token_budget, self.max_subtokens
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::InvalidArgument("learning rate must be finite and non-negative".into()));
        }
        if let LambdaPolicy::Fixed { value } = self.lambda {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::InvalidArgument(format!("lambda {value} must be finite and non-negative")));
            }
        }
        if self.max_subtokens > self.detector.max_position {
            return Err(Error::InvalidArgument("max_subtokens exceeds the position table".into()));
        }
        Ok(())
    }

    /// Bug type whose annotation the training corpus must carry.
    pub fn bug_type(&self) -> BugType {
        match self.mode {
            MutatorMode::ClassicalWeak => BugType::BorWeak,
            MutatorMode::ClassicalStrong => BugType::BorStrong,
            MutatorMode::VarMisuse => BugType::VarMisuse,
            MutatorMode::ApiMisuse => BugType::ApiMisuse,
            MutatorMode::Contextual => self.contextual_bug_type,
        }
    }
}

/// Linear warmup to `base_lr` at `warmup_steps`, then linear decay to 0 at
/// `total_steps`.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    let base = config.base_lr;
    if step <= config.warmup_steps {
        if config.warmup_steps == 0 {
            return base;
        }
        return base * step as f64 / config.warmup_steps as f64;
    }
    if step >= config.total_steps {
        return 0.0;
    }
    let span = (config.total_steps - config.warmup_steps) as f64;
    base * (config.total_steps - step) as f64 / span
}

/// Classification accuracy first, localization as the tie-break.
fn is_better(report: &MetricsReport, best: Option<&MetricsReport>) -> bool {
    best.is_none_or(|b| {
        (report.classification_accuracy, report.localization_accuracy)
            > (b.classification_accuracy, b.localization_accuracy)
    })
}

pub fn combined_loss(l_mlm: f64, l_d: f64, lambda: f64) -> f64 {
    l_mlm + lambda * l_d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaState {
    pub value: f64,
    pub ema_mlm: Option<f64>,
    pub ema_d: Option<f64>,
}

impl LambdaState {
    pub fn new(policy: LambdaPolicy) -> Self {
        LambdaState {
            value: match policy {
                LambdaPolicy::Fixed { value } => value,
                LambdaPolicy::Auto => 1.0,
            },
            ema_mlm: None,
            ema_d: None,
        }
    }

    /// Folds in the losses of step `step` (1-based).
    pub fn observe(&mut self, policy: LambdaPolicy, step: u64, l_mlm: f64, l_d: f64) {
        let ema = |prev: Option<f64>, x: f64| Some(prev.map_or(x, |p| p + EMA_ALPHA * (x - p)));
        self.ema_mlm = ema(self.ema_mlm, l_mlm);
        self.ema_d = ema(self.ema_d, l_d);
        if policy == LambdaPolicy::Auto && step % LAMBDA_PERIOD == 0 {
            if let (Some(m), Some(d)) = (self.ema_mlm, self.ema_d) {
                if d > 0.0 && m.is_finite() {
                    self.value = (m / d).clamp(LAMBDA_RANGE.0, LAMBDA_RANGE.1);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub step: u64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "L_MLM")]
    pub l_mlm: f64,
    #[serde(rename = "L_D")]
    pub l_d: f64,
    pub lr: f64,
    #[serde(rename = "λ")]
    pub lambda: f64,
    pub n_real: usize,
    pub n_mutant: usize,
    /// Mutants dropped to keep the mutant batch within budget.
    pub evicted: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u64,
    pub epoch: usize,
    pub real_ids: Vec<String>,
    /// Sources of the mutants the detector saw this step.
    pub mutant_source_ids: Vec<String>,
    /// Functions handed to the mutator this step.
    pub mutated_ids: Vec<String>,
    pub real_tokens: usize,
    pub mutant_tokens: usize,
    pub mutator_tokens: usize,
}

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStreams {
    pub routing: ChaCha8Rng,
    pub targets: ChaCha8Rng,
    pub replacements: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    pub offsets: ChaCha8Rng,
    pub batching: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        RngStreams {
            routing: stream(1),
            targets: stream(2),
            replacements: stream(3),
            dropout: stream(4),
            offsets: stream(5),
            batching: stream(6),
        }
    }

    pub fn init(seed: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(7);
        r
    }
}

/// Everything mutable during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub detector: Detector,
    pub mutator: Option<Mutator>,
    pub detector_opt: Adam,
    pub mutator_opt: Option<Adam>,
    pub step: u64,
    pub lambda: LambdaState,
    pub rngs: RngStreams,
}

impl TrainState {
    pub fn new(config: &TrainConfig, vocab_size: usize) -> Result<Self> {
        let mut init = RngStreams::init(config.seed);
        let detector = Detector::new(config.detector.with_vocab(vocab_size), &mut init)?;
        let mutator = if config.mode.is_contextual() {
            Some(Mutator::new(config.mutator.with_vocab(vocab_size), &mut init)?)
        } else {
            None
        };
        Ok(TrainState {
            detector_opt: Adam::new(&detector.params, config.adam),
            mutator_opt: mutator.as_ref().map(|m| Adam::new(&m.params, config.adam)),
            detector,
            mutator,
            step: 0,
            lambda: LambdaState::new(config.lambda),
            rngs: RngStreams::new(config.seed),
        })
    }
}

/// A produced mutant with the id of its source function.
#[derive(Debug, Clone)]
struct Produced {
    examples: Vec<Example>,
    l_mlm: Option<f64>,
    mutator_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub step: u64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best validation snapshot, or the final state without validation data.
    pub checkpoint: Checkpoint,
    pub final_state: Checkpoint,
    pub log: Vec<StepOutput>,
    pub trace: Vec<StepTrace>,
    pub validations: Vec<Validation>,
}

/// Training driver over a fixed annotated corpus.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    subtokens: &'a SubtokenModel,
    functions: &'a [AnnotatedFunction],
    encodings: Vec<SubtokenEncoding>,
    pub state: TrainState,
    carried: Vec<Example>,
    pub log: Vec<StepOutput>,
    pub trace: Vec<StepTrace>,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, subtokens: &'a SubtokenModel, functions: &'a [AnnotatedFunction]) -> Result<Self> {
        let state = TrainState::new(&config, subtokens.vocab_size())?;
        Self::with_state(config, subtokens, functions, state)
    }

    pub fn with_state(
        config: TrainConfig,
        subtokens: &'a SubtokenModel,
        functions: &'a [AnnotatedFunction],
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        if functions.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let expected = config.bug_type();
        if let Some(t) = functions.iter().flat_map(|f| &f.targets).find(|t| t.bug_type != expected) {
            return Err(Error::IncompatibleSchema(format!(
                "corpus annotated for {}, training expects {expected}",
                t.bug_type
            )));
        }
        let encodings: Vec<SubtokenEncoding> = functions.iter().map(|f| subtokens.encode(&f.sequence)).collect();
        if let Some(e) = encodings.iter().find(|e| e.len() > config.max_subtokens) {
            return Err(Error::OverBudget {
                length: e.len(),
                budget: config.max_subtokens,
            });
        }
        Ok(Trainer {
            config,
            subtokens,
            functions,
            encodings,
            state,
            carried: Vec::new(),
            log: Vec::new(),
            trace: Vec::new(),
            epoch: 0,
        })
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.encodings.iter().map(SubtokenEncoding::len).collect()
    }

    /// Batches of one epoch, drawn from the batching stream.
    pub fn epoch_batches(&mut self) -> Result<Vec<Vec<usize>>> {
        make_length_batches(
            &self.lengths(),
            self.config.token_budget,
            self.config.bucket_width,
            &mut self.state.rngs.batching,
        )
    }

    /// Drops the carried mutant batch.
    pub fn end_epoch(&mut self) {
        self.carried.clear();
        self.epoch += 1;
    }

    fn real_example(&self, i: usize) -> Example {
        Example::real(&self.functions[i], self.encodings[i].clone())
    }

    /// Mutates every targetable function in `sources` once.
    fn produce(&mut self, sources: &[usize], grads: Option<&mut ParamSet>) -> Result<Produced> {
        let targetable: Vec<usize> = sources
            .iter()
            .copied()
            .filter(|&i| !self.functions[i].targets.is_empty())
            .collect();
        let mut out = Produced {
            examples: Vec::with_capacity(targetable.len()),
            l_mlm: None,
            mutator_tokens: 0,
        };
        match &self.state.mutator {
            None => {
                for &i in &targetable {
                    let f = &self.functions[i];
                    let target = sample_target(f, &mut self.state.rngs.targets)?;
                    let m = mutate(f, target, &mut self.state.rngs.replacements);
                    let ids = self.subtokens.encode_token(&m.replacement);
                    out.examples.push(Example::from_mutant(f, &m, &self.encodings[i], &ids));
                }
            }
            Some(mutator) => {
                let mut grads = grads;
                let weight = 1.0 / targetable.len().max(1) as f64;
                let mut total = 0.0;
                let mut masked_lengths = Vec::with_capacity(targetable.len());
                for &i in &targetable {
                    let f = &self.functions[i];
                    let target = sample_target(f, &mut self.state.rngs.targets)?;
                    let input = mask_encoded(f, &self.encodings[i], target, self.subtokens);
                    masked_lengths.push(input.ids.len());
                    let positions = position_ids(
                        input.ids.len(),
                        &mut self.state.rngs.offsets,
                        self.config.augment_offsets,
                        mutator.config.max_position,
                    )?;
                    let outcome = mutator.run(
                        &input,
                        &positions,
                        Mode::Train(&mut self.state.rngs.dropout),
                        weight,
                        grads.as_deref_mut(),
                    )?;
                    total += outcome.loss;
                    let replacement = sample_replacement(&outcome.distribution, &mut self.state.rngs.replacements);
                    let m = crate::mutation::mutant_with(f, target, replacement);
                    let ids = self.subtokens.encode_token(&m.replacement);
                    out.examples.push(Example::from_mutant(f, &m, &self.encodings[i], &ids));
                }
                if !targetable.is_empty() {
                    out.l_mlm = Some(total / targetable.len() as f64);
                }
                out.mutator_tokens = masked_lengths.len() * masked_lengths.iter().copied().max().unwrap_or(0);
            }
        }
        Ok(out)
    }

    /// Drops trailing mutants until the batch fits the budget.
    fn evict(&self, mutants: &mut Vec<Example>) -> usize {
        let mut evicted = 0;
        loop {
            let longest = mutants.iter().map(|e| e.encoding.len()).max().unwrap_or(0);
            if mutants.len() * longest <= self.config.token_budget {
                return evicted;
            }
            let at = (0..mutants.len())
                .max_by_key(|&k| (mutants[k].encoding.len(), k))
                .expect("non-empty");
            mutants.remove(at);
            evicted += 1;
        }
    }

    /// One optimizer step on `batch` (indices into the corpus).
    pub fn pipeline_step(&mut self, batch: &[usize]) -> Result<StepOutput> {
        let step = self.state.step + 1;
        let lr = lr_schedule(step, &self.config);
        let mut mut_grads = self.state.mutator.as_ref().map(|m| m.params.zeros_like());

        let (reals, mut mutants, mutated, mutant_sources): (Vec<usize>, Vec<Example>, Vec<usize>, Vec<String>);
        let produced;
        if self.config.pipelined {
            produced = self.produce(batch, mut_grads.as_mut())?;
            reals = batch.to_vec();
            mutants = std::mem::take(&mut self.carried);
            mutated = batch.to_vec();
        } else {
            let routing = {
                let functions = self.functions;
                route_fifty_fifty(batch, |i| !functions[i].targets.is_empty(), &mut self.state.rngs.routing)
            };
            produced = self.produce(&routing.to_mutate, mut_grads.as_mut())?;
            reals = routing.keep_real;
            mutants = produced.examples.clone();
            mutated = routing.to_mutate;
        }
        let evicted = self.evict(&mut mutants);
        mutant_sources = mutants.iter().map(|e| e.source_id.clone()).collect();

        let mut examples: Vec<Example> = reals.iter().map(|&i| self.real_example(i)).collect();
        let n_real = examples.len();
        let mutant_tokens = padded_tokens(
            &mutants.iter().map(|e| e.encoding.len()).collect::<Vec<_>>(),
            &(0..mutants.len()).collect::<Vec<_>>(),
        );
        examples.extend(mutants);
        let n_mutant = examples.len() - n_real;

        let contextual = self.state.mutator.is_some();
        let lambda = if contextual { self.state.lambda.value } else { 1.0 };
        let mut det_grads = self.state.detector.params.zeros_like();
        let l_d = detector_pass(&mut self.state, self.config.augment_offsets, &examples, lambda, &mut det_grads)?;
        let l_mlm = produced.l_mlm.unwrap_or(0.0);
        let l = if contextual { combined_loss(l_mlm, l_d, lambda) } else { l_d };
        if !l.is_finite() {
            return Err(self.diverged(step, l));
        }

        self.state.detector_opt.update(&mut self.state.detector.params, &mut det_grads, lr)?;
        if let (Some(m), Some(opt), Some(g)) = (
            self.state.mutator.as_mut(),
            self.state.mutator_opt.as_mut(),
            mut_grads.as_mut(),
        ) {
            if produced.l_mlm.is_some() {
                opt.update(&mut m.params, g, lr)?;
            }
        }
        if contextual {
            self.state.lambda.observe(self.config.lambda, step, l_mlm, l_d);
        }
        self.state.step = step;

        if self.config.trace {
            let lengths = self.lengths();
            let ids = |v: &[usize]| v.iter().map(|&i| self.functions[i].record.id.clone()).collect::<Vec<_>>();
            self.trace.push(StepTrace {
                step,
                epoch: self.epoch,
                real_ids: ids(&reals),
                mutant_source_ids: mutant_sources,
                mutated_ids: ids(&mutated),
                real_tokens: padded_tokens(&lengths, &reals),
                mutant_tokens,
                mutator_tokens: if contextual {
                    produced.mutator_tokens
                } else {
                    padded_tokens(&lengths, &mutated)
                },
            });
        }
        if self.config.pipelined {
            self.carried = produced.examples;
        }
        let out = StepOutput {
            step,
            l,
            l_mlm,
            l_d,
            lr,
            lambda,
            n_real,
            n_mutant,
            evicted,
        };
        self.log.push(out);
        Ok(out)
    }

    fn diverged(&self, step: u64, loss: f64) -> Error {
        diverged(&self.config, step, loss, || self.checkpoint(None))
    }

    pub fn checkpoint(&self, best: Option<MetricsReport>) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            bug_type: self.config.bug_type(),
            subtokens: self.subtokens.clone(),
            call_vocabulary: None,
            state: self.state.clone(),
            validation: best,
        }
    }

    /// Runs to `total_steps`, validating periodically when `validation` is given.
    pub fn run(mut self, validation: Option<&ExampleSet>) -> Result<TrainOutcome> {
        let mut best: Option<(MetricsReport, Checkpoint)> = None;
        let mut validations = Vec::new();
        let total = self.config.total_steps;
        'outer: while self.state.step < total {
            let batches = self.epoch_batches()?;
            for batch in batches {
                self.pipeline_step(&batch)?;
                let step = self.state.step;
                let due = self.config.validate_every > 0 && step % self.config.validate_every == 0;
                if let Some(v) = validation.filter(|_| due || step == total) {
                    let report = eval::evaluate(&self.state.detector, v)?;
                    validations.push(Validation { step, report });
                    if is_better(&report, best.as_ref().map(|b| &b.0)) {
                        best = Some((report, self.checkpoint(Some(report))));
                    }
                }
                if step >= total {
                    break 'outer;
                }
            }
            self.end_epoch();
        }
        let final_state = self.checkpoint(best.as_ref().map(|b| b.0));
        Ok(TrainOutcome {
            checkpoint: best.map_or_else(|| final_state.clone(), |b| b.1),
            final_state,
            log: self.log,
            trace: self.trace,
            validations,
        })
    }
}

/// Detector loss over `examples`; adds `scale / N` times each example's
/// gradient into `grads`.
fn detector_pass(
    state: &mut TrainState,
    augment: bool,
    examples: &[Example],
    scale: f64,
    grads: &mut ParamSet,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let weight = scale / examples.len() as f64;
    let mut total = 0.0;
    for e in examples {
        let positions = position_ids(
            e.encoding.len(),
            &mut state.rngs.offsets,
            augment,
            state.detector.config.max_position,
        )?;
        total += state
            .detector
            .loss_and_grad(e, &positions, Mode::Train(&mut state.rngs.dropout), weight, grads)?;
    }
    Ok(total / examples.len() as f64)
}

fn diverged(config: &TrainConfig, step: u64, loss: f64, snapshot: impl FnOnce() -> Checkpoint) -> Error {
    let dump = config.dump_dir.as_ref().and_then(|dir| {
        let path = dir.join(format!("diverged-step{step}.json"));
        std::fs::create_dir_all(dir).ok()?;
        snapshot().save(&path).ok()?;
        Some(path)
    });
    Error::Diverged { step, loss, dump }
}

/// Trains a fresh model on `functions`, which must be annotated for
/// `config.bug_type()`.
pub fn train(
    config: &TrainConfig,
    subtokens: &SubtokenModel,
    functions: &[AnnotatedFunction],
    validation: Option<&ExampleSet>,
    call_vocabulary: Option<&CallVocabulary>,
) -> Result<TrainOutcome> {
    let mut out = Trainer::new(config.clone(), subtokens, functions)?.run(validation)?;
    out.checkpoint.call_vocabulary = call_vocabulary.cloned();
    out.final_state.call_vocabulary = call_vocabulary.cloned();
    Ok(out)
}

/// Detector-only training on a fixed example set, e.g. a static dataset.
pub fn train_static(
    config: &TrainConfig,
    subtokens: &SubtokenModel,
    train_set: &ExampleSet,
    validation: Option<&ExampleSet>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let classical = TrainConfig {
        mode: MutatorMode::classical(train_set.bug_type.unwrap_or(config.bug_type())),
        ..config.clone()
    };
    let mut state = TrainState::new(&classical, subtokens.vocab_size())?;
    let lengths: Vec<usize> = train_set.examples.iter().map(|e| e.encoding.len()).collect();
    let snapshot = |s: &TrainState, v: Option<MetricsReport>| Checkpoint {
        version: CHECKPOINT_VERSION,
        config: classical.clone(),
        bug_type: classical.bug_type(),
        subtokens: subtokens.clone(),
        call_vocabulary: None,
        state: s.clone(),
        validation: v,
    };
    let mut log = Vec::new();
    let mut validations = Vec::new();
    let mut best: Option<(MetricsReport, Checkpoint)> = None;
    'outer: while state.step < classical.total_steps {
        let batches = make_length_batches(
            &lengths,
            classical.token_budget,
            classical.bucket_width,
            &mut state.rngs.batching,
        )?;
        for batch in batches {
            let step = state.step + 1;
            let lr = lr_schedule(step, &classical);
            let examples: Vec<Example> = batch.iter().map(|&i| train_set.examples[i].clone()).collect();
            let mut grads = state.detector.params.zeros_like();
            let l_d = detector_pass(&mut state, classical.augment_offsets, &examples, 1.0, &mut grads)?;
            if !l_d.is_finite() {
                return Err(diverged(&classical, step, l_d, || snapshot(&state, None)));
            }
            state.detector_opt.update(&mut state.detector.params, &mut grads, lr)?;
            state.step = step;
            let n_mutant = examples.iter().filter(|e| e.label == Label::Mutant).count();
            log.push(StepOutput {
                step,
                l: l_d,
                l_mlm: 0.0,
                l_d,
                lr,
                lambda: 1.0,
                n_real: examples.len() - n_mutant,
                n_mutant,
                evicted: 0,
            });
            let due = classical.validate_every > 0 && step % classical.validate_every == 0;
            if let Some(v) = validation.filter(|_| due || step == classical.total_steps) {
                let report = eval::evaluate(&state.detector, v)?;
                validations.push(Validation { step, report });
                if is_better(&report, best.as_ref().map(|b| &b.0)) {
                    best = Some((report, snapshot(&state, Some(report))));
                }
            }
            if step >= classical.total_steps {
                break 'outer;
            }
        }
    }
    let final_state = snapshot(&state, best.as_ref().map(|b| b.0));
    Ok(TrainOutcome {
        checkpoint: best.map_or_else(|| final_state.clone(), |b| b.1),
        final_state,
        log,
        trace: Vec::new(),
        validations,
    })
}

/// Continues detector-only training on `n_examples` examples produced by the
/// classical `mode` from `functions`. The mutator is left untouched and the
/// learning rate decays linearly from `base_lr` to 0 over the examples.
pub fn finetune(
    checkpoint: &Checkpoint,
    functions: &[AnnotatedFunction],
    mode: MutatorMode,
    n_examples: usize,
) -> Result<Checkpoint> {
    if mode.is_contextual() {
        return Err(Error::InvalidArgument("fine-tuning uses a classical mutator".into()));
    }
    if n_examples == 0 {
        return Ok(checkpoint.clone());
    }
    let config = TrainConfig {
        mode,
        pipelined: false,
        trace: false,
        ..checkpoint.config.clone()
    };
    let mut state = checkpoint.state.clone();
    let frozen = state.mutator.take();
    let frozen_opt = state.mutator_opt.take();
    let mut trainer = Trainer::with_state(config, &checkpoint.subtokens, functions, state)?;
    let mut consumed = 0;
    let base = trainer.config.base_lr;
    'outer: loop {
        for batch in trainer.epoch_batches()? {
            let step = trainer.state.step + 1;
            let lr = base * (1.0 - consumed as f64 / n_examples as f64);
            let routing = {
                let functions = trainer.functions;
                route_fifty_fifty(&batch, |i| !functions[i].targets.is_empty(), &mut trainer.state.rngs.routing)
            };
            let produced = trainer.produce(&routing.to_mutate, None)?;
            let mut examples: Vec<Example> = routing.keep_real.iter().map(|&i| trainer.real_example(i)).collect();
            examples.extend(produced.examples);
            let room = n_examples - consumed;
            examples.truncate(room);
            let mut grads = trainer.state.detector.params.zeros_like();
            let l_d = detector_pass(&mut trainer.state, trainer.config.augment_offsets, &examples, 1.0, &mut grads)?;
            if !l_d.is_finite() {
                return Err(trainer.diverged(step, l_d));
            }
            trainer
                .state
                .detector_opt
                .update(&mut trainer.state.detector.params, &mut grads, lr)?;
            trainer.state.step = step;
            consumed += examples.len();
            if consumed >= n_examples {
                break 'outer;
            }
        }
        trainer.end_epoch();
    }
    let mut state = trainer.state;
    state.mutator = frozen;
    state.mutator_opt = frozen_opt;
    Ok(Checkpoint {
        state,
        validation: None,
        ..checkpoint.clone()
    })
}

#[cfg(test)]
mod tests;
