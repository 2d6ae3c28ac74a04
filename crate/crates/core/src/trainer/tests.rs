use std::collections::HashMap;

use super::*;
use crate::annotator::annotate_function;
use crate::synthetic::{contextual_corpus, planted_corpus};
use crate::tokenizer::{tokenize, train_bpe, Grammar};

fn tiny_arch() -> Arch {
    Arch {
        layers: 1,
        hidden: 8,
        heads: 2,
        dropout: 0.1,
        max_position: 256,
    }
}

fn toy(n: usize, bug_type: BugType) -> (SubtokenModel, Vec<AnnotatedFunction>) {
    let records = if bug_type == BugType::BorStrong {
        planted_corpus(n, 11)
    } else {
        contextual_corpus(n, 11)
    };
    let seqs: Vec<_> = records.iter().map(|r| tokenize(&r.source, Grammar::Java).unwrap()).collect();
    let (model, _) = train_bpe(&seqs, 60).unwrap();
    let fns = records
        .into_iter()
        .zip(seqs)
        .map(|(r, s)| annotate_function(r, s, bug_type, None))
        .collect();
    (model, fns)
}

fn config(mode: MutatorMode) -> TrainConfig {
    TrainConfig {
        mode,
        warmup_steps: 2,
        total_steps: 6,
        token_budget: 1_000,
        max_subtokens: 250,
        detector: tiny_arch(),
        mutator: tiny_arch(),
        trace: true,
        ..TrainConfig::default()
    }
}

#[test]
fn lr_schedule_shape() {
    let c = TrainConfig {
        warmup_steps: 10_000,
        total_steps: 30_000,
        base_lr: 0.5,
        ..TrainConfig::default()
    };
    assert_eq!(lr_schedule(0, &c), 0.0);
    assert_eq!(lr_schedule(10_000, &c), 0.5);
    assert_eq!(lr_schedule(5_000, &c), 0.25);
    assert_eq!(lr_schedule(20_000, &c), 0.25);
    assert_eq!(lr_schedule(30_000, &c), 0.0);
}

#[test]
fn combined_loss_and_lambda_fixed_point() {
    assert_eq!(combined_loss(1.5, 0.5, 2.0), 2.5);
    assert_eq!(combined_loss(1.5, 0.5, 0.0), 1.5);
    let mut s = LambdaState::new(LambdaPolicy::Auto);
    assert_eq!(s.value, 1.0);
    for step in 1..=1000 {
        s.observe(LambdaPolicy::Auto, step, 1.8, 0.6);
    }
    assert!((s.value - 3.0).abs() < 1e-9);
    assert!((s.value * 0.6 - 1.8).abs() < 1e-9);
    let mut f = LambdaState::new(LambdaPolicy::Fixed { value: 0.7 });
    f.observe(LambdaPolicy::Fixed { value: 0.7 }, 100, 5.0, 0.1);
    assert_eq!(f.value, 0.7);
    let mut clamp = LambdaState::new(LambdaPolicy::Auto);
    clamp.observe(LambdaPolicy::Auto, 100, 1e9, 1.0);
    assert_eq!(clamp.value, LAMBDA_RANGE.1);
}

#[test]
fn config_validation() {
    let mut c = TrainConfig::default();
    assert!(c.validate().is_ok());
    c.token_budget = 100;
    assert!(c.validate().is_err());
    let c = TrainConfig {
        warmup_steps: 10,
        total_steps: 5,
        ..TrainConfig::default()
    };
    assert!(c.validate().is_err());
    let json = serde_json::to_string(&TrainConfig::default()).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::default());
    let partial: TrainConfig = serde_json::from_str(r#"{"seed": 9, "lambda": {"policy": "fixed", "value": 2.0}}"#).unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.lambda, LambdaPolicy::Fixed { value: 2.0 });
}

#[test]
fn pipeline_trains_on_previous_batch_mutants() {
    let (model, fns) = toy(12, BugType::BorStrong);
    let mut t = Trainer::new(config(MutatorMode::ClassicalStrong), &model, &fns).unwrap();
    let batches: Vec<Vec<usize>> = vec![(0..4).collect(), (4..8).collect(), (8..12).collect()];
    let outs: Vec<StepOutput> = batches.iter().map(|b| t.pipeline_step(b).unwrap()).collect();
    assert_eq!(outs[0].n_mutant, 0);
    assert_eq!(outs[1].n_mutant, 4);
    let id = |i: usize| fns[i].record.id.clone();
    assert_eq!(t.trace[1].mutant_source_ids, (0..4).map(id).collect::<Vec<_>>());
    assert_eq!(t.trace[2].mutant_source_ids, (4..8).map(id).collect::<Vec<_>>());
    assert_eq!(t.trace[2].real_ids, (8..12).map(id).collect::<Vec<_>>());
    for o in &outs {
        assert_eq!(o.l, o.l_d);
        assert!(o.l.is_finite());
    }
}

#[test]
fn contextual_step_reports_combined_loss() {
    let (model, fns) = toy(8, BugType::BorWeak);
    let cfg = TrainConfig {
        lambda: LambdaPolicy::Fixed { value: 0.5 },
        ..config(MutatorMode::Contextual)
    };
    let mut t = Trainer::new(cfg, &model, &fns).unwrap();
    let first = t.pipeline_step(&[0, 1, 2, 3]).unwrap();
    // zero-initialized head: uniform over 17 weak candidates plus the original
    assert!((first.l_mlm - 18f64.ln()).abs() < 1e-9);
    let second = t.pipeline_step(&[4, 5, 6, 7]).unwrap();
    for o in [first, second] {
        assert!((o.l - (o.l_mlm + 0.5 * o.l_d)).abs() < 1e-9);
    }
    assert_eq!(second.n_mutant, 4);
}

#[test]
fn epoch_ledger_covers_every_function_once() {
    let (model, fns) = toy(40, BugType::BorStrong);
    let cfg = TrainConfig {
        total_steps: 1_000,
        warmup_steps: 10,
        ..config(MutatorMode::ClassicalStrong)
    };
    let mut t = Trainer::new(cfg, &model, &fns).unwrap();
    for _epoch in 0..2 {
        let batches = t.epoch_batches().unwrap();
        for b in &batches {
            t.pipeline_step(b).unwrap();
        }
        t.end_epoch();
    }
    for epoch in 0..2 {
        let steps: Vec<&StepTrace> = t.trace.iter().filter(|s| s.epoch == epoch).collect();
        let mut real: HashMap<&str, usize> = HashMap::new();
        let mut mutated: HashMap<&str, usize> = HashMap::new();
        for s in &steps {
            for id in &s.real_ids {
                *real.entry(id).or_default() += 1;
            }
            for id in &s.mutated_ids {
                *mutated.entry(id).or_default() += 1;
            }
            assert!(s.real_tokens <= 1_000 && s.mutator_tokens <= 1_000 && s.mutant_tokens <= 1_000);
        }
        assert_eq!(real.len(), 40);
        assert!(real.values().all(|&c| c == 1));
        assert_eq!(real, mutated);
        assert!(steps[0].mutant_source_ids.is_empty());
        for w in steps.windows(2) {
            assert_eq!(w[1].mutant_source_ids, w[0].mutated_ids);
        }
    }
}

#[test]
fn same_seed_same_trajectory() {
    let (model, fns) = toy(16, BugType::BorWeak);
    let cfg = config(MutatorMode::Contextual);
    let a = train(&cfg, &model, &fns, None, None).unwrap();
    let b = train(&cfg, &model, &fns, None, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.final_state, b.final_state);
    assert_eq!(a.log.len(), 6);
    let other = train(&TrainConfig { seed: 1, ..cfg }, &model, &fns, None, None).unwrap();
    assert_ne!(a.log, other.log);
}

#[test]
fn checkpoint_roundtrip_and_version() {
    let (model, fns) = toy(8, BugType::BorWeak);
    let out = train(&config(MutatorMode::Contextual), &model, &fns, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    let bumped = out.checkpoint.to_json().unwrap().replacen("\"version\":1", "\"version\":99", 1);
    assert!(matches!(Checkpoint::from_json(&bumped), Err(Error::CheckpointVersion(99))));
}

#[test]
fn finetune_keeps_mutator_and_zero_is_identity() {
    let (model, ctx_fns) = toy(12, BugType::BorWeak);
    let cm0 = train(&config(MutatorMode::Contextual), &model, &ctx_fns, None, None)
        .unwrap()
        .checkpoint;
    assert_eq!(finetune(&cm0, &ctx_fns, MutatorMode::ClassicalWeak, 0).unwrap(), cm0);
    let tuned = finetune(&cm0, &ctx_fns, MutatorMode::ClassicalWeak, 30).unwrap();
    assert_eq!(tuned.state.mutator, cm0.state.mutator);
    assert_eq!(tuned.state.mutator_opt, cm0.state.mutator_opt);
    assert_ne!(tuned.state.detector, cm0.state.detector);
    assert!(finetune(&cm0, &ctx_fns, MutatorMode::Contextual, 10).is_err());
}

#[test]
fn divergence_is_reported_with_dump() {
    let (model, fns) = toy(8, BugType::BorStrong);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        base_lr: 1e300,
        warmup_steps: 0,
        adam: AdamConfig {
            clip_norm: None,
            ..AdamConfig::default()
        },
        dump_dir: Some(dir.path().to_path_buf()),
        ..config(MutatorMode::ClassicalStrong)
    };
    match train(&cfg, &model, &fns, None, None) {
        Err(Error::Diverged { dump: Some(p), .. }) => assert!(p.exists()),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn corpus_schema_must_match_mode() {
    let (model, fns) = toy(4, BugType::BorStrong);
    assert!(matches!(
        Trainer::new(config(MutatorMode::VarMisuse), &model, &fns),
        Err(Error::IncompatibleSchema(_))
    ));
}
