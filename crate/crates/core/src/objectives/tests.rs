use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Graph, Tensor};
use crate::corpus::{Direction, LanguageSpec, Vocabulary};
use crate::error::Error;
use crate::model::{bind, init_params, Dropout, ModelConfig, ModelParams};

fn logits_of(rows: &[Vec<f64>]) -> (Graph, crate::autodiff::Var) {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::from_rows(rows).unwrap());
    (g, x)
}

fn ln_rows(probs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    probs.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect()
}

fn value(g: &Graph, v: crate::autodiff::Var) -> f64 {
    g.value(v).data()[0]
}

#[test]
fn mle_of_uniform_logits_is_log_vocab() {
    for s in [0.0, 0.1, 0.3] {
        let (mut g, x) = logits_of(&[vec![0.0; 4], vec![0.0; 4]]);
        let l = mle_loss(&mut g, x, &[1, 3], &[true, true], s).unwrap();
        assert!((value(&g, l) - 4f64.ln()).abs() < 1e-12);
        assert!((value(&g, l) - 1.3863).abs() < 1e-4);
    }
}

#[test]
fn mle_of_confident_model_is_near_zero() {
    let (mut g, x) = logits_of(&[vec![60.0, 0.0, 0.0]]);
    let l = mle_loss(&mut g, x, &[0], &[true], 0.0).unwrap();
    assert!(value(&g, l) < 1e-20);
}

#[test]
fn mle_two_token_hand_value() {
    let rows = ln_rows(&[vec![0.5, 0.25, 0.25], vec![0.25, 0.25, 0.5]]);
    let (mut g, x) = logits_of(&rows);
    let l = mle_loss(&mut g, x, &[0, 1], &[true, true], 0.0).unwrap();
    let hand = (2f64.ln() + 4f64.ln()) / 2.0;
    assert!((value(&g, l) - hand).abs() < 1e-12);
    assert!((value(&g, l) - 1.0397).abs() < 1e-4);
}

#[test]
fn mle_smoothing_mixes_in_vocab_mean() {
    let probs = [0.5, 0.25, 0.125, 0.125];
    let (mut g, x) = logits_of(&ln_rows(&[probs.to_vec()]));
    let l = mle_loss(&mut g, x, &[0], &[true], 0.1).unwrap();
    let mean_nll: f64 = probs.iter().map(|p: &f64| -p.ln()).sum::<f64>() / 4.0;
    let hand = 0.9 * 2f64.ln() + 0.1 * mean_nll;
    assert!((value(&g, l) - hand).abs() < 1e-12);
}

#[test]
fn padding_positions_are_ignored() {
    let rows = ln_rows(&[vec![0.5, 0.5], vec![0.01, 0.99]]);
    let (mut g, x) = logits_of(&rows);
    let l = mle_loss(&mut g, x, &[0, 0], &[true, false], 0.0).unwrap();
    assert!((value(&g, l) - 2f64.ln()).abs() < 1e-12);
    let u = unlikelihood_loss(&mut g, x, &[0, 0], &[true, false]).unwrap();
    assert!((value(&g, u) - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn all_pad_batches_and_bad_smoothing_are_errors() {
    let (mut g, x) = logits_of(&[vec![0.0; 3]]);
    assert!(matches!(mle_loss(&mut g, x, &[0], &[false], 0.1), Err(Error::Contract(_))));
    assert!(matches!(unlikelihood_loss(&mut g, x, &[0], &[false]), Err(Error::Contract(_))));
    assert!(matches!(mle_loss(&mut g, x, &[0], &[true], 0.5), Err(Error::Config(_))));
    assert!(matches!(mle_loss(&mut g, x, &[0, 1], &[true, true], 0.1), Err(Error::Dimension(_))));
}

#[test]
fn unlikelihood_hand_values() {
    let (mut g, x) = logits_of(&[vec![-1e4, 0.0, 0.0], vec![0.0, -1e4, 0.0]]);
    let u = unlikelihood_loss(&mut g, x, &[0, 1], &[true, true]).unwrap();
    assert_eq!(value(&g, u), 0.0);

    let rows = ln_rows(&[vec![0.5, 0.5], vec![0.75, 0.25]]);
    let (mut g, x) = logits_of(&rows);
    let u = unlikelihood_loss(&mut g, x, &[0, 0], &[true, true]).unwrap();
    let hand = (2f64.ln() + 4f64.ln()) / 2.0;
    assert!((value(&g, u) - hand).abs() < 1e-12);
    assert!((value(&g, u) - 1.0397).abs() < 1e-4);
}

#[test]
fn unlikelihood_is_clamped_when_target_is_certain() {
    let (mut g, x) = logits_of(&[vec![200.0, 0.0, 0.0], vec![-1e4, 0.0, 0.0]]);
    let u = unlikelihood_loss(&mut g, x, &[0, 0], &[true, true]).unwrap();
    let v = value(&g, u);
    assert!(v.is_finite());
    assert!((v - 1e9f64.ln() / 2.0).abs() < 1e-9);
    let grads = g.backward(u).unwrap();
    assert!(grads.get("x").unwrap().data().iter().all(|d| d.is_finite()));
}

#[test]
fn unlikelihood_increases_with_target_probability() {
    let mut last = f64::NEG_INFINITY;
    for i in 0..40 {
        let p = 0.02 + 0.024 * i as f64;
        let rows = ln_rows(&[vec![p, 1.0 - p]]);
        let (mut g, x) = logits_of(&rows);
        let u = unlikelihood_loss(&mut g, x, &[0], &[true]).unwrap();
        assert!(value(&g, u) > last, "not increasing at p = {p}");
        last = value(&g, u);
    }
}

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        num_encoder_layers: 1,
        num_decoder_layers: 1,
        d_model: 8,
        num_heads: 2,
        d_ffn: 12,
        dropout: 0.0,
        vocab_size: vocab,
        max_len: 12,
        seed: 3,
    }
}

fn setup() -> (Vocabulary, ModelConfig, ModelParams) {
    let vocab = Vocabulary::new(&LanguageSpec::defaults(4), 6).unwrap();
    let cfg = tiny(vocab.len());
    let params = init_params(&cfg).unwrap();
    (vocab, cfg, params)
}

fn sample_rows(vocab: &Vocabulary, d: Direction) -> Vec<(Vec<u32>, Vec<u32>)> {
    let (s, t) = (vocab.range(d.src).start, vocab.range(d.tgt).start);
    vec![
        (vec![s, s + 1, s + 2], vec![t + 2, t + 1, t]),
        (vec![s + 3, s + 4], vec![t + 4, t + 3]),
        (vec![s + 5, s, s + 1, s + 2], vec![t + 2, t + 1, t, t + 5]),
    ]
}

#[test]
fn positive_batch_layout() {
    let (vocab, _, _) = setup();
    let d = Direction::new(1, 0);
    let pos = PositiveBatch::new(&vocab, d, &sample_rows(&vocab, d)).unwrap();
    assert_eq!(pos.src.row(0)[0], vocab.lang_token(1));
    assert_eq!(pos.dec_in.row(1)[0], vocab.lang_token(0));
    assert_eq!(pos.targets.row(1)[..3], [vocab.range(0).start + 4, vocab.range(0).start + 3, crate::corpus::EOS]);
    assert_eq!(pos.dec_in.mask, pos.targets.mask);
    assert_eq!(pos.target_tokens(), 4 + 3 + 5);
}

#[test]
fn negative_language_comes_from_the_other_languages() {
    let (vocab, _, _) = setup();
    let d = Direction::new(1, 0);
    let pos = PositiveBatch::new(&vocab, d, &sample_rows(&vocab, d)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = [0usize; 4];
    let n = 10_000;
    for _ in 0..n {
        let neg = make_negative(&pos, &vocab, NegativeMode::PerBatch, &mut rng).unwrap();
        assert!(neg.negative_langs.iter().all(|&l| l == neg.negative_langs[0]));
        counts[neg.negative_langs[0]] += 1;
    }
    assert_eq!(counts[0] + counts[1], 0);
    for &c in &counts[2..] {
        assert!((c as f64 / (n as f64 / 2.0) - 1.0).abs() < 0.05, "{counts:?}");
    }
}

#[test]
fn coupled_batches_differ_only_in_decoder_language_id() {
    let (vocab, _, _) = setup();
    let d = Direction::new(0, 2);
    let pos = PositiveBatch::new(&vocab, d, &sample_rows(&vocab, d)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for mode in [NegativeMode::PerBatch, NegativeMode::PerSentence] {
        let neg = make_negative(&pos, &vocab, mode, &mut rng).unwrap();
        assert!(is_coupled(&pos, &neg));
        let diffs: Vec<usize> = pos
            .dec_in
            .ids
            .iter()
            .zip(&neg.dec_in.ids)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect();
        let w = pos.dec_in.width;
        assert_eq!(diffs, (0..pos.batch_size()).map(|b| b * w).collect::<Vec<_>>());
        for (b, &l) in neg.negative_langs.iter().enumerate() {
            assert_eq!(neg.dec_in.row(b)[0], vocab.lang_token(l));
        }
    }
}

#[test]
fn negative_sampling_needs_three_languages() {
    let vocab = Vocabulary::new(&LanguageSpec::defaults(2), 6).unwrap();
    let d = Direction::new(0, 1);
    let pos = PositiveBatch::new(&vocab, d, &sample_rows(&vocab, d)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        make_negative(&pos, &vocab, NegativeMode::PerBatch, &mut rng),
        Err(Error::Config(_))
    ));
}

fn combined(
    params: &ModelParams,
    cfg: &ModelConfig,
    pos: &PositiveBatch,
    neg: &NegativeBatch,
    w: f64,
) -> (f64, StepLoss, BTreeMap<String, Tensor>) {
    let mut g = Graph::new();
    let bound = bind(&mut g, params);
    let s = unions_step_loss(&mut g, &bound, cfg, pos, neg, w, 0.1, &mut Dropout::off()).unwrap();
    let grads = g.backward(s.total).unwrap().into_inner();
    (value(&g, s.total), s, grads)
}

fn component(params: &ModelParams, cfg: &ModelConfig, pos: &PositiveBatch, neg: Option<&NegativeBatch>) -> (f64, BTreeMap<String, Tensor>) {
    let mut g = Graph::new();
    let bound = bind(&mut g, params);
    let l = match neg {
        None => mle_batch_loss(&mut g, &bound, cfg, pos, 0.1, &mut Dropout::off()).unwrap(),
        Some(n) => {
            let enc = crate::model::encoder_forward(&mut g, &bound, cfg, &n.src, &mut Dropout::off()).unwrap();
            let out = crate::model::decoder_forward(&mut g, &bound, cfg, &enc, &n.dec_in, &mut Dropout::off()).unwrap();
            unlikelihood_loss(&mut g, out.logits, &n.targets.ids, &n.targets.mask).unwrap()
        }
    };
    (value(&g, l), g.backward(l).unwrap().into_inner())
}

#[test]
fn combined_loss_is_additive_with_linear_gradients() {
    let (vocab, cfg, params) = setup();
    let d = Direction::new(2, 0);
    let pos = PositiveBatch::new(&vocab, d, &sample_rows(&vocab, d)).unwrap();
    let neg = make_negative(&pos, &vocab, NegativeMode::PerBatch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let (total, parts, grads) = combined(&params, &cfg, &pos, &neg, 1.0);
    let (mle, g_mle) = component(&params, &cfg, &pos, None);
    let (ul, g_ul) = component(&params, &cfg, &pos, Some(&neg));
    assert!((total - (mle + ul)).abs() < 1e-12);
    assert!((parts.mle - mle).abs() < 1e-12 && (parts.ul - ul).abs() < 1e-12);
    let mut worst: f64 = 0.0;
    for (name, t) in &grads {
        let a = g_mle.get(name).map(|x| x.data().to_vec()).unwrap_or(vec![0.0; t.numel()]);
        let b = g_ul.get(name).map(|x| x.data().to_vec()).unwrap_or(vec![0.0; t.numel()]);
        for ((x, y), z) in t.data().iter().zip(&a).zip(&b) {
            worst = worst.max((x - (y + z)).abs());
        }
    }
    assert!(worst < 1e-9, "max gradient difference {worst}");
}

#[test]
fn zero_ul_weight_is_plain_mle() {
    let (vocab, cfg, params) = setup();
    let d = Direction::new(0, 3);
    let pos = PositiveBatch::new(&vocab, d, &sample_rows(&vocab, d)).unwrap();
    let neg = make_negative(&pos, &vocab, NegativeMode::PerBatch, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let (total, _, grads) = combined(&params, &cfg, &pos, &neg, 0.0);
    let (mle, g_mle) = component(&params, &cfg, &pos, None);
    assert_eq!(total.to_bits(), mle.to_bits());
    assert_eq!(grads, g_mle);
}

#[test]
fn uncoupled_batches_are_rejected() {
    let (vocab, cfg, params) = setup();
    let d = Direction::new(0, 3);
    let pos = PositiveBatch::new(&vocab, d, &sample_rows(&vocab, d)).unwrap();
    let mut neg = make_negative(&pos, &vocab, NegativeMode::PerBatch, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    neg.targets.ids[0] += 1;
    let mut g = Graph::new();
    let bound = bind(&mut g, &params);
    let r = unions_step_loss(&mut g, &bound, &cfg, &pos, &neg, 1.0, 0.1, &mut Dropout::off());
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn losses_are_invariant_to_batch_order() {
    let (vocab, cfg, params) = setup();
    let d = Direction::new(3, 0);
    let rows = sample_rows(&vocab, d);
    let mut rev = rows.clone();
    rev.reverse();
    let a = PositiveBatch::new(&vocab, d, &rows).unwrap();
    let b = PositiveBatch::new(&vocab, d, &rev).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let na = make_negative(&a, &vocab, NegativeMode::PerBatch, &mut rng).unwrap();
    let mut nb = make_negative(&b, &vocab, NegativeMode::PerBatch, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    nb.negative_langs = na.negative_langs.clone();
    for r in 0..nb.negative_langs.len() {
        nb.dec_in.ids[r * nb.dec_in.width] = vocab.lang_token(na.negative_langs[0]);
    }
    let (_, sa, _) = combined(&params, &cfg, &a, &na, 1.0);
    let (_, sb, _) = combined(&params, &cfg, &b, &nb, 1.0);
    assert!((sa.mle - sb.mle).abs() < 1e-12);
    assert!((sa.ul - sb.ul).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn unlikelihood_step_lowers_negative_probability(seed in 0u64..1000, tgt in 1usize..4) {
        let (vocab, cfg, _) = setup();
        let cfg = ModelConfig { seed, ..cfg };
        let mut params = init_params(&cfg).unwrap();
        let d = Direction::new(0, tgt);
        let pos = PositiveBatch::new(&vocab, d, &sample_rows(&vocab, d)).unwrap();
        let neg = make_negative(&pos, &vocab, NegativeMode::PerBatch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (_, before, _) = combined(&params, &cfg, &pos, &neg, 1.0);
        let (_, grads) = component(&params, &cfg, &pos, Some(&neg));
        for (name, gr) in &grads {
            let p = params.get_mut(name).unwrap();
            for (v, g) in p.data_mut().iter_mut().zip(gr.data()) {
                *v -= 1e-3 * g;
            }
        }
        let (_, after, _) = combined(&params, &cfg, &pos, &neg, 1.0);
        prop_assert!(after.negative_prob < before.negative_prob);
    }
}
