use patchlab_core::{ModelConfig, SyntheticVocab};
use patchlab_forge::eval::{answer, evaluate_formats};
use patchlab_forge::task::{default_pairs, make_example};
use patchlab_forge::train::{train_sequences, PlantedLocus, Sequence};
use patchlab_forge::{
    make_dataset, train_toy, ForgeError, Format, LabelRule, OperandPair, TaskSpec, TrainConfig,
};

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_mlp: 32,
        vocab_size: vocab,
        max_seq: 24,
        norm_eps: 1e-5,
    }
}

fn small_spec() -> TaskSpec {
    TaskSpec {
        pairs: default_pairs().into_iter().step_by(97).collect(),
        ..TaskSpec::default()
    }
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        warmup_steps: 5,
        batch_size: 8,
        log_every: 10,
        planted_locus: Some(PlantedLocus {
            layer: 1,
            heads: vec![0],
            probability: 0.3,
        }),
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_bit_identical_checkpoints() {
    let v = SyntheticVocab::new();
    let corpus = make_dataset(&small_spec(), &v).unwrap();
    let a = train_toy(&tiny(v.len()), &corpus.train, &quick(20)).unwrap();
    let b = train_toy(&tiny(v.len()), &corpus.train, &quick(20)).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.checkpoint.digest(), b.checkpoint.digest());
    assert_eq!(a.log, b.log);
    let c = train_toy(
        &tiny(v.len()),
        &corpus.train,
        &TrainConfig {
            seed: 7,
            ..quick(20)
        },
    )
    .unwrap();
    assert_ne!(a.checkpoint.digest(), c.checkpoint.digest());
}

#[test]
fn loss_goes_down() {
    let v = SyntheticVocab::new();
    let corpus = make_dataset(&small_spec(), &v).unwrap();
    let out = train_toy(&tiny(v.len()), &corpus.train, &quick(60)).unwrap();
    assert!(
        out.final_loss < out.initial_loss,
        "{} -> {}",
        out.initial_loss,
        out.final_loss
    );
    assert_eq!(out.checkpoint.provenance.seed, 42);
    assert_eq!(out.checkpoint.provenance.steps, 60);
    assert_eq!(out.checkpoint.provenance.final_loss, Some(out.final_loss));
}

#[test]
fn single_example_is_memorized() {
    let v = SyntheticVocab::new();
    let pair = OperandPair::parse("9.8", "9.11").unwrap();
    let ex = make_example(&v, &pair, Format::Qa, LabelRule::BuggyByFractionLength).unwrap();
    let cfg = TrainConfig {
        steps: 150,
        warmup_steps: 10,
        batch_size: 1,
        learning_rate: 3e-3,
        planted_locus: None,
        ..TrainConfig::default()
    };
    let out = train_sequences(&tiny(v.len()), &[Sequence::from(&ex)], &cfg).unwrap();
    let model = out.checkpoint.model().unwrap();
    assert_eq!(answer(&model, &v, &pair, Format::Qa, None).unwrap(), "9.11");
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let v = SyntheticVocab::new();
    let corpus = make_dataset(&small_spec(), &v).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e30,
        warmup_steps: 0,
        grad_clip: 0.0,
        ..quick(30)
    };
    let err = train_toy(&tiny(v.len()), &corpus.train, &cfg).unwrap_err();
    assert!(matches!(err, ForgeError::Diverged { .. }), "{err}");
    assert!(err.to_string().contains("lower learning rate"));
}

#[test]
fn invalid_configs_rejected() {
    let v = SyntheticVocab::new();
    let corpus = make_dataset(&small_spec(), &v).unwrap();
    let m = tiny(v.len());
    assert!(train_toy(&m, &corpus.train, &quick(0)).is_err());
    assert!(train_toy(&m, &[], &quick(5)).is_err());
    let bad_locus = TrainConfig {
        planted_locus: Some(PlantedLocus {
            layer: 9,
            heads: vec![0],
            probability: 0.5,
        }),
        ..quick(5)
    };
    assert!(matches!(
        train_toy(&m, &corpus.train, &bad_locus),
        Err(ForgeError::TrainConfig(_))
    ));
}

#[test]
fn empty_pair_list_gives_empty_report() {
    let v = SyntheticVocab::new();
    let m = patchlab_core::Model32::new(
        tiny(v.len()),
        patchlab_core::Weights::init(&tiny(v.len()), 1).unwrap(),
    )
    .unwrap();
    let r = evaluate_formats(&m, &v, &[], &Format::ALL, 5).unwrap();
    assert!(r.formats.is_empty());
    assert_eq!(r.n_pairs, 0);
}
