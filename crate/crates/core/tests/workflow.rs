//! The public API used the way the command-line driver uses it: corpus on
//! disk, pretraining, both tuning phases, selection and evaluation.

use unions_core::corpus::{generate_corpus, Corpus, CorpusConfig};
use unions_core::eval_select::{
    evaluate, evaluate_references, select_checkpoint, translate, BeamConfig, Convergence,
};
use unions_core::model::ModelConfig;
use unions_core::trainer::{
    load_checkpoint, pretrain, run, save_checkpoint, unions_tune, vanilla_tune, Collect, Phase, TrainConfig,
};
use unions_core::Error;

fn corpus(seed: u64) -> Corpus {
    generate_corpus(&CorpusConfig {
        num_concepts: 20,
        train_sentences: 300,
        dev_sentences: 10,
        test_sentences: 20,
        seed,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn tiny_model(corpus: &Corpus) -> ModelConfig {
    ModelConfig {
        num_encoder_layers: 1,
        num_decoder_layers: 1,
        d_model: 16,
        num_heads: 2,
        d_ffn: 32,
        ..ModelConfig::toy(corpus.vocabulary().unwrap().len())
    }
}

fn tune_config(phase: Phase) -> TrainConfig {
    TrainConfig {
        total_steps: 12,
        checkpoint_every: 4,
        ..TrainConfig::tune(phase)
    }
}

#[test]
fn corpus_survives_a_trip_through_disk() {
    let c = corpus(3);
    let dir = tempfile::tempdir().unwrap();
    let written = c.write_dir(dir.path()).unwrap();
    let (back, manifest) = Corpus::read_dir(dir.path()).unwrap();
    assert_eq!(back, c);
    assert_eq!(manifest, written);
    assert_eq!(manifest.fingerprint, c.fingerprint());
    assert_ne!(corpus(4).fingerprint(), c.fingerprint());
}

#[test]
fn pretrain_tune_select_evaluate() {
    let c = corpus(1);
    let fp = c.fingerprint();
    let model = tiny_model(&c);
    let pre_cfg = TrainConfig {
        total_steps: 30,
        checkpoint_every: 10,
        warmup_steps: 5,
        ..TrainConfig::pretrain()
    };
    let mut pre = Collect::default();
    let base = pretrain(&model, &pre_cfg, &c, &fp, &mut pre).unwrap();
    assert_eq!(pre.checkpoints.iter().map(|k| k.step).collect::<Vec<_>>(), [0, 10, 20, 30]);
    assert_eq!(pre.log.len(), 30);
    assert!(pre.log.iter().all(|r| r.phase == Phase::Pretrain && r.ul_loss.is_none()));

    let mut uni = Collect::default();
    let tuned = unions_tune(&base, &tune_config(Phase::UnionsTune), &c, &mut uni).unwrap();
    assert!(uni.log.iter().all(|r| r.ul_loss.is_some_and(f64::is_finite)));
    let mut van = Collect::default();
    let plain = vanilla_tune(&base, &tune_config(Phase::UnionsTune), &c, &mut van).unwrap();
    assert_eq!(plain.train.phase, Phase::VanillaTune);
    assert_ne!(tuned.params, plain.params);

    // Resuming from a middle checkpoint lands on the same bytes.
    let resumed = run(uni.checkpoints[1].clone(), &c, &mut Collect::default()).unwrap();
    assert_eq!(resumed.to_bytes(), tuned.to_bytes());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    save_checkpoint(&tuned, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.to_bytes(), tuned.to_bytes());
    assert!(matches!(
        run(loaded, &corpus(2), &mut Collect::default()),
        Err(Error::Fingerprint { .. })
    ));

    let probe: Vec<usize> = (0..8).collect();
    let (sel, traj) = select_checkpoint(&uni.checkpoints, &c, &probe, 0.01, Convergence::Absolute).unwrap();
    assert_eq!(traj.len(), uni.checkpoints.len());
    assert_eq!(traj[sel.index], (sel.step, sel.sep));

    let beam = BeamConfig {
        beam: 2,
        max_output: 12,
        ..BeamConfig::default()
    };
    let report = evaluate(&tuned.params, &tuned.model, &c, &c.zeroshot_directions(), beam, Some(4)).unwrap();
    let zs = report.zeroshot.as_ref().unwrap();
    assert!((0.0..=100.0).contains(&zs.bleu) && (0.0..=1.0).contains(&zs.otr));
    assert!(report.supervised.is_none());

    let vocab = c.vocabulary().unwrap();
    let src = vocab.encode(&c.test[0].renderings[1]).unwrap();
    let out = translate(&tuned.params, &tuned.model, &vocab, &src, 1, 2, beam).unwrap();
    assert!(out.len() <= beam.max_output);
    assert!(out.iter().all(|&t| !vocab.is_special(t)));
}

#[test]
fn references_score_perfectly() {
    let c = corpus(5);
    let r = evaluate_references(&c, &c.supervised_directions()).unwrap();
    let s = r.supervised.unwrap();
    assert_eq!(s.bleu, 100.0);
    assert_eq!(s.otr, 0.0);
}
