use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bugsynth::annotator::{annotate_function, build_call_vocabulary, AnnotatedFunction, BugType, CallVocabulary};
use bugsynth::corpus::{dedup, filter_by_length, load_corpus, split_corpus, write_corpus, FunctionRecord};
use bugsynth::encoder::{EncoderConfig, Mode};
use bugsynth::eval::{cross_evaluate, evaluate, load_paired_benchmark, EvalModel};
use bugsynth::mlm::{mask_encoded, replacement_distribution, sample_replacement, Mutator};
use bugsynth::mutation::{generate_static, mutate, sample_target, ExampleSet, Multiplicity};
use bugsynth::tokenizer::{train_bpe, Grammar, SubtokenModel};
use bugsynth::trainer::{finetune, train, train_static, Checkpoint, MutatorMode, RngStreams, TrainConfig};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{Cli, Command, Global, TrainMode};

/// Argument combinations clap cannot reject on its own.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Debug, Args)]
pub struct Preprocess {
    /// JSONL corpus with `id`, `source` and optional `language`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Byte-pair merges to learn.
    #[arg(long, default_value_t = 1000)]
    pub merges: usize,
    #[arg(long, default_value_t = 250)]
    pub max_subtokens: usize,
    /// Fail on the first malformed line instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct Annotate {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Call vocabulary written by `preprocess`, needed for API misuse.
    #[arg(long)]
    pub calls: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenStatic {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub calls: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Train {
    /// Training functions (JSONL corpus); unused in static mode.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Pre-generated example set for static mode.
    #[arg(long)]
    pub static_set: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub calls: Option<PathBuf>,
    /// Example set used to pick the best checkpoint.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub total_steps: Option<u64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    /// Per-step losses as JSONL.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Finetune {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Examples to train on.
    #[arg(long)]
    pub examples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Evaluate {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Example set written by `gen-static`.
    #[arg(long, conflicts_with = "benchmark", required_unless_present = "benchmark")]
    pub set: Option<PathBuf>,
    /// Paired buggy/fixed benchmark JSONL.
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CrossEval {
    /// `NAME=CHECKPOINT`, repeatable.
    #[arg(long = "model", required = true, value_parser = parse_named)]
    pub models: Vec<(String, PathBuf)>,
    /// `NAME=EXAMPLE_SET`, repeatable.
    #[arg(long = "set", required = true, value_parser = parse_named)]
    pub sets: Vec<(String, PathBuf)>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct Mutate {
    /// Function source text.
    #[arg(long, conflicts_with = "source_file", required_unless_present = "source_file")]
    pub source: Option<String>,
    #[arg(long)]
    pub source_file: Option<PathBuf>,
    /// Checkpoint whose tokenizer, call vocabulary and mutator are used.
    #[arg(long, conflicts_with = "tokenizer", required_unless_present = "tokenizer")]
    pub checkpoint: Option<PathBuf>,
    /// Tokenizer for a freshly initialized mutator.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub calls: Option<PathBuf>,
    /// Sample from the contextual mutator instead of a classical operator.
    #[arg(long)]
    pub contextual: bool,
    /// Token index to mutate; sampled among the targets by default.
    #[arg(long)]
    pub index: Option<usize>,
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=PATH, got {s:?}")),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Preprocess(a) => preprocess(g, a),
        Command::Annotate(a) => annotate_cmd(g, a),
        Command::GenStatic(a) => gen_static(g, a),
        Command::Train(a) => train_cmd(g, a),
        Command::Finetune(a) => finetune_cmd(g, a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::CrossEval(a) => cross_eval(a),
        Command::Mutate(a) => mutate_cmd(g, a),
    }
}

fn log_resolved<T: Serialize>(stage: &str, value: &T) -> Result<()> {
    eprintln!("{stage}: resolved config {}", serde_json::to_string(value)?);
    Ok(())
}

fn seed(g: &Global) -> u64 {
    g.seed.unwrap_or(0)
}

fn bug_type(g: &Global) -> Result<BugType> {
    g.bug_type.ok_or_else(|| usage("--bug-type is required"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_tokenizer(path: &Path) -> Result<SubtokenModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(SubtokenModel::from_json(&text)?)
}

fn load_calls(path: Option<&PathBuf>) -> Result<Option<CallVocabulary>> {
    path.map(|p| read_json(p)).transpose()
}

fn load_records(path: &Path) -> Result<Vec<FunctionRecord>> {
    let report = load_corpus(path, false)?;
    for (line, reason) in &report.malformed {
        eprintln!("skipped {}:{line}: {reason}", path.display());
    }
    Ok(report.records)
}

/// Tokenizes and annotates; functions the grammar rejects are skipped.
fn annotate_records(
    records: Vec<FunctionRecord>,
    bug_type: BugType,
    calls: Option<&CallVocabulary>,
) -> Result<Vec<AnnotatedFunction>> {
    let mut out = Vec::with_capacity(records.len());
    let mut rejected = 0;
    for r in records {
        let grammar: Grammar = r.language.parse()?;
        match grammar.tokenize(&r.source) {
            Ok(seq) => out.push(annotate_function(r, seq, bug_type, calls)),
            Err(_) => rejected += 1,
        }
    }
    if rejected > 0 {
        eprintln!("skipped {rejected} functions that failed to parse");
    }
    Ok(out)
}

fn preprocess(g: &Global, a: &Preprocess) -> Result<()> {
    log_resolved(
        "preprocess",
        &serde_json::json!({"seed": seed(g), "merges": a.merges, "max_subtokens": a.max_subtokens, "strict": a.strict}),
    )?;
    let loaded = load_corpus(&a.corpus, a.strict)?;
    let n_loaded = loaded.records.len();
    let records = dedup(loaded.records);
    let split = split_corpus(&records, (0.8, 0.1, 0.1), seed(g))?;
    let train_seqs: Vec<_> = split
        .train
        .iter()
        .filter_map(|r| r.language.parse::<Grammar>().ok()?.tokenize(&r.source).ok())
        .collect();
    let (model, bpe) = train_bpe(&train_seqs, a.merges)?;
    let calls = build_call_vocabulary(&train_seqs, None);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let encode = |r: &FunctionRecord| -> bugsynth::Result<_> {
        Ok(model.encode(&r.language.parse::<Grammar>()?.tokenize(&r.source)?))
    };
    let mut kept = Vec::new();
    for (name, part) in [("train", &split.train), ("validate", &split.validate), ("test", &split.test)] {
        let report = filter_by_length(part, encode, a.max_subtokens);
        write_corpus(a.out.join(format!("{name}.jsonl")), &report.kept)?;
        kept.push(serde_json::json!({
            "split": name,
            "kept": report.kept.len(),
            "too_long": report.too_long,
            "failed": report.failed,
            "kept_fraction": report.kept_fraction(),
        }));
    }
    write_json(&a.out.join("split.json"), &split.manifest())?;
    fs::write(a.out.join("tokenizer.json"), model.to_json()?)?;
    write_json(&a.out.join("calls.json"), &calls)?;
    println!(
        "{}",
        serde_json::json!({
            "loaded": n_loaded,
            "malformed": loaded.malformed.len(),
            "deduplicated": records.len(),
            "merges": bpe.merges,
            "vocab_size": model.vocab_size(),
            "splits": kept,
        })
    );
    Ok(())
}

fn annotate_cmd(g: &Global, a: &Annotate) -> Result<()> {
    let bt = bug_type(g)?;
    log_resolved("annotate", &serde_json::json!({"bug_type": bt}))?;
    let calls = load_calls(a.calls.as_ref())?;
    if bt == BugType::ApiMisuse && calls.is_none() {
        eprintln!("warning: no call vocabulary; API misuse candidates come from each function alone");
    }
    let fns = annotate_records(load_records(&a.corpus)?, bt, calls.as_ref())?;
    let mut out = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut targets = 0;
    for f in &fns {
        targets += f.targets.len();
        writeln!(out, "{}", serde_json::to_string(&f.to_record())?)?;
    }
    println!("{}", serde_json::json!({"functions": fns.len(), "targets": targets}));
    Ok(())
}

fn gen_static(g: &Global, a: &GenStatic) -> Result<()> {
    let bt = bug_type(g)?;
    let multiplicity = g.multiplicity.unwrap_or(Multiplicity::Once);
    log_resolved(
        "gen-static",
        &serde_json::json!({"bug_type": bt, "multiplicity": multiplicity.count(), "seed": seed(g)}),
    )?;
    let model = load_tokenizer(&a.tokenizer)?;
    let calls = load_calls(a.calls.as_ref())?;
    let fns = annotate_records(load_records(&a.corpus)?, bt, calls.as_ref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed(g));
    let set = generate_static(&fns, bt, multiplicity, &model, &mut rng);
    set.write(&a.out)?;
    println!("{}", serde_json::json!({"examples": set.len(), "mutants": set.n_mutants()}));
    Ok(())
}

/// Defaults, then the config file, then flags.
fn resolve_config(g: &Global) -> Result<TrainConfig> {
    let mut config = match &g.config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = g.seed {
        config.seed = s;
    }
    match (g.mode, g.bug_type) {
        (Some(TrainMode::Contextual), bt) => {
            config.mode = MutatorMode::Contextual;
            if let Some(bt) = bt {
                config.contextual_bug_type = bt;
            }
        }
        (Some(TrainMode::Dynamic | TrainMode::Static), Some(bt)) => config.mode = MutatorMode::classical(bt),
        (Some(TrainMode::Dynamic | TrainMode::Static), None) => {
            if config.mode.is_contextual() {
                config.mode = MutatorMode::classical(config.contextual_bug_type);
            }
        }
        (None, Some(bt)) if config.mode.is_contextual() => config.contextual_bug_type = bt,
        (None, Some(bt)) => config.mode = MutatorMode::classical(bt),
        (None, None) => {}
    }
    config.validate()?;
    Ok(config)
}

fn train_cmd(g: &Global, a: &Train) -> Result<()> {
    let mut config = resolve_config(g)?;
    if let Some(n) = a.total_steps {
        config.total_steps = n;
    }
    if let Some(n) = a.warmup_steps {
        config.warmup_steps = n;
    }
    config.validate()?;
    let mode = g.mode.unwrap_or(if config.mode.is_contextual() {
        TrainMode::Contextual
    } else {
        TrainMode::Dynamic
    });
    log_resolved("train", &serde_json::json!({"mode": format!("{mode:?}").to_lowercase(), "deterministic": g.deterministic, "train": &config}))?;
    let model = load_tokenizer(&a.tokenizer)?;
    let calls = load_calls(a.calls.as_ref())?;
    let validation = a.validation.as_ref().map(|p| ExampleSet::load(p, &model)).transpose()?;
    let outcome = match mode {
        TrainMode::Static => {
            let path = a.static_set.as_ref().ok_or_else(|| usage("static mode needs --static-set"))?;
            let set = ExampleSet::load(path, &model)?;
            train_static(&config, &model, &set, validation.as_ref())?
        }
        TrainMode::Dynamic | TrainMode::Contextual => {
            let path = a.corpus.as_ref().ok_or_else(|| usage("dynamic and contextual modes need --corpus"))?;
            let fns = annotate_records(load_records(path)?, config.bug_type(), calls.as_ref())?;
            train(&config, &model, &fns, validation.as_ref(), calls.as_ref())?
        }
    };
    if let Some(path) = &a.log {
        let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        for step in &outcome.log {
            writeln!(f, "{}", serde_json::to_string(step)?)?;
        }
    }
    let mut checkpoint = outcome.checkpoint;
    if checkpoint.call_vocabulary.is_none() {
        checkpoint.call_vocabulary = calls;
    }
    checkpoint.save(&a.out)?;
    let last = outcome.log.last();
    println!(
        "{}",
        serde_json::json!({
            "steps": last.map_or(0, |s| s.step),
            "final": last,
            "validation": checkpoint.validation,
        })
    );
    Ok(())
}

fn finetune_cmd(g: &Global, a: &Finetune) -> Result<()> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let bt = g.bug_type.unwrap_or(checkpoint.bug_type);
    if bt.family() != checkpoint.bug_type.family() {
        bail!(usage(format!("checkpoint was trained for {}, not {bt}", checkpoint.bug_type)));
    }
    let mode = MutatorMode::classical(bt);
    log_resolved(
        "finetune",
        &serde_json::json!({"bug_type": bt, "examples": a.examples, "train": &checkpoint.config}),
    )?;
    let fns = annotate_records(load_records(&a.corpus)?, bt, checkpoint.call_vocabulary.as_ref())?;
    let tuned = finetune(&checkpoint, &fns, mode, a.examples)?;
    tuned.save(&a.out)?;
    println!("{}", serde_json::json!({"examples": a.examples, "steps": tuned.state.step}));
    Ok(())
}

fn evaluate_cmd(a: &Evaluate) -> Result<()> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let set = match (&a.set, &a.benchmark) {
        (Some(path), _) => ExampleSet::load(path, &checkpoint.subtokens)?,
        (None, Some(path)) => {
            let bench = load_paired_benchmark(
                path,
                &checkpoint.subtokens,
                checkpoint.bug_type,
                checkpoint.call_vocabulary.as_ref(),
            )?;
            for e in &bench.rejected {
                eprintln!("{e}");
            }
            bench.set
        }
        (None, None) => bail!(usage("--set or --benchmark is required")),
    };
    let report = evaluate(&checkpoint.state.detector, &set)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cross_eval(a: &CrossEval) -> Result<()> {
    let checkpoints = a
        .models
        .iter()
        .map(|(name, path)| Ok((name.clone(), Checkpoint::load(path)?)))
        .collect::<Result<Vec<_>>>()?;
    let first = &checkpoints[0].1;
    let sets = a
        .sets
        .iter()
        .map(|(name, path)| Ok((name.clone(), ExampleSet::load(path, &first.subtokens)?)))
        .collect::<Result<Vec<_>>>()?;
    if let Some((name, _)) = checkpoints.iter().find(|(_, c)| c.subtokens != first.subtokens) {
        bail!(usage(format!("model {name} uses a different tokenizer")));
    }
    let models: Vec<EvalModel<'_>> = checkpoints
        .iter()
        .map(|(name, c)| EvalModel {
            name: name.clone(),
            detector: &c.state.detector,
            bug_type: Some(c.bug_type),
        })
        .collect();
    let set_refs: Vec<(String, &ExampleSet)> = sets.iter().map(|(n, s)| (n.clone(), s)).collect();
    let matrix = cross_evaluate(&models, &set_refs)?;
    if a.json {
        println!("{}", serde_json::to_string(&matrix)?);
    } else {
        print!("{}", matrix.to_text());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Weighted {
    token: String,
    prob: f64,
}

#[derive(Debug, Serialize)]
struct MutateOutput {
    index: usize,
    original: String,
    masked: String,
    distribution: Vec<Weighted>,
    sampled: String,
    seed: u64,
}

fn mutate_cmd(g: &Global, a: &Mutate) -> Result<()> {
    let bt = g.bug_type.unwrap_or(BugType::BorWeak);
    let seed = seed(g);
    log_resolved(
        "mutate",
        &serde_json::json!({"bug_type": bt, "contextual": a.contextual, "seed": seed, "index": a.index}),
    )?;
    let source = match (&a.source, &a.source_file) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        (None, None) => bail!(usage("--source or --source-file is required")),
    };
    let checkpoint = a.checkpoint.as_ref().map(Checkpoint::load).transpose()?;
    let (model, mut calls) = match (&checkpoint, &a.tokenizer) {
        (Some(c), _) => (c.subtokens.clone(), c.call_vocabulary.clone()),
        (None, Some(p)) => (load_tokenizer(p)?, None),
        (None, None) => bail!(usage("--checkpoint or --tokenizer is required")),
    };
    if let Some(c) = load_calls(a.calls.as_ref())? {
        calls = Some(c);
    }
    let f = annotate_records(vec![FunctionRecord::new("input", source)], bt, calls.as_ref())?
        .pop()
        .context("the source does not parse")?;
    let streams = RngStreams::new(seed);
    let (mut targets_rng, mut replacements_rng) = (streams.targets, streams.replacements);
    let target = match a.index {
        Some(i) => f
            .targets
            .iter()
            .find(|t| t.token_index == i)
            .ok_or_else(|| usage(format!("token {i} is not a {bt} target")))?,
        None => sample_target(&f, &mut targets_rng)?,
    };
    let original = f.sequence.tokens()[target.token_index].text.clone();
    let mut masked_tokens = f.sequence.texts();
    masked_tokens[target.token_index] = "[MASK]".into();
    let masked = masked_tokens[1..masked_tokens.len() - 1].join(" ");
    let (distribution, sampled) = if a.contextual {
        let mutator = match checkpoint.as_ref().and_then(|c| c.state.mutator.clone()) {
            Some(m) => m,
            None => Mutator::new(
                EncoderConfig::mutator(model.vocab_size()),
                &mut RngStreams::init(seed),
            )?,
        };
        let input = mask_encoded(&f, &model.encode(&f.sequence), target, &model);
        let scores = mutator.candidate_scores(&input, Mode::Infer)?;
        let dist = replacement_distribution(&input.candidates, &scores, &original)?;
        let sampled = sample_replacement(&dist, &mut replacements_rng);
        (dist, sampled)
    } else {
        let kept: Vec<String> = target.candidates.iter().filter(|c| **c != original).cloned().collect();
        let uniform = vec![1.0; kept.len()];
        let dist = replacement_distribution(&kept, &uniform, &original)?;
        let sampled = mutate(&f, target, &mut replacements_rng).replacement;
        (dist, sampled)
    };
    let out = MutateOutput {
        index: target.token_index,
        original,
        masked,
        distribution: distribution
            .candidates
            .iter()
            .zip(&distribution.probs)
            .map(|(t, p)| Weighted {
                token: t.clone(),
                prob: *p,
            })
            .collect(),
        sampled,
        seed,
    };
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}
