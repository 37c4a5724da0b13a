use std::collections::{HashMap, HashSet};

use proptest::prelude::*;

use super::*;
use crate::Error;

fn small(seed: u64) -> CorpusConfig {
    CorpusConfig {
        train_sentences: 600,
        dev_sentences: 60,
        test_sentences: 40,
        seed,
        ..CorpusConfig::default()
    }
}

#[test]
fn default_corpus_has_six_supervised_and_six_zeroshot_directions() {
    let c = generate_corpus(&small(3)).unwrap();
    let sup = c.supervised_directions();
    let zs = c.zeroshot_directions();
    assert_eq!(sup.len(), 6);
    assert_eq!(zs.len(), 6);
    let sup_set: HashSet<_> = sup.iter().collect();
    assert!(zs.iter().all(|d| !sup_set.contains(d)));
    let names: Vec<String> = sup.iter().map(|&d| c.direction_name(d)).collect();
    assert_eq!(names, ["L0-L1", "L0-L2", "L0-L3", "L1-L0", "L2-L0", "L3-L0"]);
    assert_eq!(c.parse_direction("L2-L3"), Some(Direction::new(2, 3)));
    assert_eq!(c.parse_direction("L2-L9"), None);
}

#[test]
fn train_and_dev_contain_no_zeroshot_pair() {
    let c = generate_corpus(&small(4)).unwrap();
    let zs: HashSet<_> = c.zeroshot_directions().into_iter().collect();
    for split in [Split::Train, Split::Dev] {
        for p in c.split(split) {
            assert!(!zs.contains(&c.direction_of(p).unwrap()));
        }
    }
    let sizes = c.direction_sizes(Split::Train, &c.supervised_directions());
    assert_eq!(sizes.iter().sum::<usize>(), c.train.len());
    assert!(sizes.iter().all(|&s| s > 0));
}

#[test]
fn generation_is_deterministic_in_seed() {
    let a = generate_corpus(&small(9)).unwrap();
    let b = generate_corpus(&small(9)).unwrap();
    let other = generate_corpus(&small(10)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), other.fingerprint());
}

#[test]
fn reverse_language_renders_concepts_backwards() {
    let langs = LanguageSpec::defaults(4);
    assert_eq!(langs[1].order_rule, OrderRule::Reverse);
    assert_eq!(langs[1].render(&[3, 7, 9]), ["L1_w9", "L1_w7", "L1_w3"]);
    assert_eq!(langs[0].render(&[3, 7, 9]), ["L0_w3", "L0_w7", "L0_w9"]);
    assert_eq!(langs[2].render(&[3, 7, 9]), ["L2_w7", "L2_w9", "L2_w3"]);
    assert_eq!(langs[3].render(&[1, 2, 3, 4, 5]), ["L3_w2", "L3_w1", "L3_w4", "L3_w3", "L3_w5"]);
}

#[test]
fn order_rules_invert() {
    let items: Vec<usize> = (0..7).collect();
    for rule in OrderRule::ALL {
        assert_eq!(rule.invert(&rule.apply(&items)), items, "{rule}");
        assert_eq!(rule.as_str().parse::<OrderRule>().unwrap(), rule);
    }
    assert!("rotate-2".parse::<OrderRule>().is_err());
}

#[test]
fn paired_sentences_express_the_same_concepts() {
    let c = generate_corpus(&small(5)).unwrap();
    let concepts_of = |lang: &str, toks: &[String]| -> Vec<usize> {
        let spec = &c.languages[c.lang_index(lang).unwrap()];
        let raw: Vec<usize> = toks
            .iter()
            .map(|t| t.strip_prefix(&format!("{}w", spec.token_prefix)).unwrap().parse().unwrap())
            .collect();
        spec.order_rule.invert(&raw)
    };
    for p in c.train.iter().take(200) {
        assert_eq!(concepts_of(&p.src_lang, &p.src), concepts_of(&p.tgt_lang, &p.tgt));
        assert!((MIN_SENTENCE_LEN..=MAX_SENTENCE_LEN).contains(&p.src.len()));
    }
}

#[test]
fn temperature_weights_match_hand_values() {
    let w = temperature_sample_weights(&[100.0, 400.0], 5.0).unwrap();
    let a = 0.2f64.powf(0.2);
    let b = 0.8f64.powf(0.2);
    assert!((w[0] - a / (a + b)).abs() < 1e-12);
    assert!((w[0] - 0.4311).abs() < 1e-4);
    assert!((w[1] - 0.5689).abs() < 1e-4);
    let flat = temperature_sample_weights(&[100.0, 400.0], 1.0).unwrap();
    assert!((flat[0] - 0.2).abs() < 1e-12);
    assert!(temperature_sample_weights(&[1.0], 0.0).is_err());
    assert!(temperature_sample_weights(&[0.0, 0.0], 1.0).is_err());
}

#[test]
fn aligned_rendering_matches_language_rules() {
    let c = generate_corpus(&small(6)).unwrap();
    for s in &c.test {
        let base = c.aligned_render(s.concept_id, 0).unwrap();
        for (li, lang) in c.languages.iter().enumerate() {
            let r = c.aligned_render(s.concept_id, li).unwrap();
            let concepts: Vec<usize> = base
                .iter()
                .map(|t| t.trim_start_matches("L0_w").parse().unwrap())
                .collect();
            assert_eq!(r, lang.render(&concepts).as_slice());
        }
    }
    assert!(c.aligned_render(10_000, 0).is_err());
    assert!(c.aligned_render(0, 9).is_err());
}

#[test]
fn vocabulary_ranges_are_disjoint_and_owned() {
    let langs = LanguageSpec::defaults(4);
    let v = Vocabulary::new(&langs, 60).unwrap();
    assert_eq!(v.len(), 2 + 4 + 240);
    assert_eq!(v.token(PAD), Some("<pad>"));
    assert_eq!(v.token(EOS), Some("</s>"));
    let mut seen = HashSet::new();
    for (li, lang) in langs.iter().enumerate() {
        assert!(v.is_lang_token(v.lang_token(li)));
        assert_eq!(v.owner(v.lang_token(li)), None);
        for id in v.range(li) {
            assert!(seen.insert(id));
            assert_eq!(v.owner(id), Some(li));
            assert!(v.token(id).unwrap().starts_with(&lang.token_prefix));
        }
    }
    let ids = v.encode(&["L2_w5", "L2_w0"]).unwrap();
    assert_eq!(v.decode(&ids), ["L2_w5", "L2_w0"]);
    assert!(v.encode(&["L9_w1"]).is_err());
}

#[test]
fn invalid_language_sets_are_rejected() {
    let mut dup = LanguageSpec::defaults(4);
    dup[2].token_prefix = dup[1].token_prefix.clone();
    let cfg = CorpusConfig { languages: dup, ..small(1) };
    assert!(matches!(generate_corpus(&cfg), Err(Error::Corpus(_))));

    let mut two_central = LanguageSpec::defaults(4);
    two_central[1].central = true;
    let cfg = CorpusConfig { languages: two_central, ..small(1) };
    assert!(generate_corpus(&cfg).is_err());

    let cfg = CorpusConfig { languages: LanguageSpec::defaults(3), ..small(1) };
    assert!(generate_corpus(&cfg).is_err());

    let cfg = CorpusConfig { num_concepts: 19, ..small(1) };
    assert!(generate_corpus(&cfg).is_err());

    let cfg = CorpusConfig { size_ratios: Some(vec![1.0, 2.0]), ..small(1) };
    assert!(generate_corpus(&cfg).is_err());
}

#[test]
fn size_ratios_skew_direction_sizes() {
    let cfg = CorpusConfig {
        size_ratios: Some(vec![1.0, 1.0, 6.0]),
        train_sentences: 2000,
        ..small(2)
    };
    let c = generate_corpus(&cfg).unwrap();
    let sizes = c.direction_sizes(Split::Train, &c.supervised_directions());
    assert!(sizes[2] > 3 * sizes[0]);
    assert_eq!(sizes[0], sizes[3]);
}

#[test]
fn directory_round_trip_and_fingerprint_check() {
    let c = generate_corpus(&small(7)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = c.write_dir(dir.path()).unwrap();
    let (back, m2) = Corpus::read_dir(dir.path()).unwrap();
    assert_eq!(back, c);
    assert_eq!(m, m2);

    let train = dir.path().join(TRAIN_FILE);
    let mut text = std::fs::read_to_string(&train).unwrap();
    text = text.replacen("L1_w", "L1_w1", 1);
    std::fs::write(&train, text).unwrap();
    assert!(matches!(Corpus::read_dir(dir.path()), Err(Error::Fingerprint { .. })));
}

#[test]
fn parse_pairs_reports_line_numbers() {
    let langs = LanguageSpec::defaults(4);
    let v = Vocabulary::new(&langs, 30).unwrap();
    let good = r#"{"src_lang":"L0","tgt_lang":"L1","src":"L0_w1 L0_w2","tgt":"L1_w2 L1_w1","concept_id":0}"#;
    let wrong_owner = r#"{"src_lang":"L0","tgt_lang":"L1","src":"L1_w1","tgt":"L1_w1","concept_id":1}"#;
    assert_eq!(parse_pairs(good, &langs, &v).unwrap().len(), 1);
    let text = format!("{good}\n{wrong_owner}\n");
    match parse_pairs(&text, &langs, &v) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
    assert!(matches!(parse_pairs("{", &langs, &v), Err(Error::Parse { line: 1, .. })));
    let same = good.replace("\"tgt_lang\":\"L1\"", "\"tgt_lang\":\"L0\"");
    assert!(parse_pairs(&same, &langs, &v).is_err());
}

#[test]
fn batches_respect_budget_and_direction() {
    let c = generate_corpus(&small(8)).unwrap();
    let dirs = c.supervised_directions();
    let weights: Vec<(Direction, f64)> = dirs.iter().map(|&d| (d, 1.0)).collect();
    let stream = make_batches(&c, Split::Train, 120, &weights, 32, 1).unwrap();
    assert_eq!(stream.skipped(), 0);
    for b in stream.take(300) {
        assert!(!b.pairs.is_empty());
        let (mut ws, mut wt) = (0, 0);
        for &i in &b.pairs {
            let p = &c.train[i];
            assert_eq!(c.direction_of(p), Some(b.direction));
            ws = ws.max(p.src.len() + 1);
            wt = wt.max(p.tgt.len() + 1);
        }
        assert!(b.pairs.len() * (ws + wt) <= 120);
    }
}

#[test]
fn batch_stream_is_deterministic_and_skips_long_pairs() {
    let c = generate_corpus(&small(8)).unwrap();
    let weights: Vec<(Direction, f64)> =
        c.supervised_directions().into_iter().map(|d| (d, 1.0)).collect();
    let a: Vec<Batch> = make_batches(&c, Split::Train, 200, &weights, 32, 5).unwrap().take(50).collect();
    let b: Vec<Batch> = make_batches(&c, Split::Train, 200, &weights, 32, 5).unwrap().take(50).collect();
    assert_eq!(a, b);
    let short = make_batches(&c, Split::Train, 200, &weights, 6, 5).unwrap();
    let expected = c
        .train
        .iter()
        .filter(|p| p.src.len() + 1 > 6 || p.tgt.len() + 1 > 6)
        .count();
    assert!(expected > 0);
    assert_eq!(short.skipped(), expected);
}

#[test]
fn direction_frequencies_follow_weights() {
    let c = generate_corpus(&small(11)).unwrap();
    let dirs = c.supervised_directions();
    let raw = [1.0, 2.0, 3.0, 4.0, 0.0, 5.0];
    let weights: Vec<(Direction, f64)> = dirs.iter().copied().zip(raw).collect();
    let total: f64 = raw.iter().sum();
    let mut counts: HashMap<Direction, usize> = HashMap::new();
    let n = 10_000;
    for b in make_batches(&c, Split::Train, 100, &weights, 32, 3).unwrap().take(n) {
        *counts.entry(b.direction).or_default() += 1;
    }
    assert!(!counts.contains_key(&dirs[4]));
    for (d, w) in dirs.iter().zip(raw) {
        let freq = *counts.get(d).unwrap_or(&0) as f64 / n as f64;
        assert!((freq - w / total).abs() < 0.02, "{d:?}: {freq}");
    }
}

#[test]
fn missing_direction_weight_is_a_config_error() {
    let c = generate_corpus(&small(8)).unwrap();
    let weights: Vec<(Direction, f64)> =
        c.supervised_directions().into_iter().skip(1).map(|d| (d, 1.0)).collect();
    assert!(matches!(
        make_batches(&c, Split::Train, 100, &weights, 32, 1),
        Err(Error::Config(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn serialized_splits_round_trip(seed in 0u64..1000, concepts in 20usize..80) {
        let cfg = CorpusConfig {
            num_concepts: concepts,
            train_sentences: 30,
            dev_sentences: 5,
            test_sentences: 5,
            zipf_exponent: None,
            seed,
            ..CorpusConfig::default()
        };
        let c = generate_corpus(&cfg).unwrap();
        let v = c.vocabulary().unwrap();
        prop_assert_eq!(parse_pairs(&render_pairs(&c.train), &c.languages, &v).unwrap(), c.train.clone());
        prop_assert_eq!(
            parse_aligned(&render_aligned(&c.test, &c.languages), &c.languages, &v).unwrap(),
            c.test.clone()
        );
        let m = parse_manifest(&serde_json::to_string(&c.manifest()).unwrap()).unwrap();
        prop_assert_eq!(m, c.manifest());
    }
}
