use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::language::{Direction, LanguageSpec};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const MIN_SENTENCE_LEN: usize = 3;
pub const MAX_SENTENCE_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub languages: Vec<LanguageSpec>,
    pub num_concepts: usize,
    pub train_sentences: usize,
    pub dev_sentences: usize,
    pub test_sentences: usize,
    /// Zipf exponent of concept frequencies; `None` samples uniformly.
    pub zipf_exponent: Option<f64>,
    /// Relative share of each non-central language in train/dev; `None`
    /// balances them.
    pub size_ratios: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            languages: LanguageSpec::defaults(4),
            num_concepts: 60,
            train_sentences: 8000,
            dev_sentences: 500,
            test_sentences: 500,
            zipf_exponent: Some(1.1),
            size_ratios: None,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub concept_id: usize,
}

/// One concept sentence rendered in every language, in corpus language order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignedSentence {
    pub concept_id: usize,
    pub renderings: Vec<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub languages: Vec<LanguageSpec>,
    pub num_concepts: usize,
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<AlignedSentence>,
}

pub(crate) fn validate_languages(languages: &[LanguageSpec]) -> Result<usize> {
    let central: Vec<usize> = languages
        .iter()
        .enumerate()
        .filter(|(_, l)| l.central)
        .map(|(i, _)| i)
        .collect();
    if central.len() != 1 {
        return Err(Error::Corpus(format!(
            "exactly one central language required, found {}",
            central.len()
        )));
    }
    let mut ids = HashSet::new();
    let mut prefixes = HashSet::new();
    for l in languages {
        if l.id.is_empty() || l.id.chars().any(|c| c.is_whitespace() || c == '<' || c == '>') {
            return Err(Error::Corpus(format!("invalid language id {:?}", l.id)));
        }
        if l.token_prefix.is_empty() || l.token_prefix.chars().any(char::is_whitespace) {
            return Err(Error::Corpus(format!("invalid token prefix {:?}", l.token_prefix)));
        }
        if !ids.insert(l.id.as_str()) {
            return Err(Error::Corpus(format!("duplicate language id {:?}", l.id)));
        }
        if !prefixes.insert(l.token_prefix.as_str()) {
            return Err(Error::Corpus(format!("duplicate token prefix {:?}", l.token_prefix)));
        }
    }
    Ok(central[0])
}

struct ConceptSampler {
    concepts: WeightedIndex<f64>,
}

impl ConceptSampler {
    fn new(num_concepts: usize, zipf: Option<f64>) -> Result<Self> {
        let weights: Vec<f64> = match zipf {
            Some(s) => (1..=num_concepts).map(|k| (k as f64).powf(-s)).collect(),
            None => vec![1.0; num_concepts],
        };
        let concepts = WeightedIndex::new(weights).map_err(|e| Error::Corpus(e.to_string()))?;
        Ok(ConceptSampler { concepts })
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.random_range(MIN_SENTENCE_LEN..=MAX_SENTENCE_LEN);
        (0..len).map(|_| self.concepts.sample(rng)).collect()
    }
}

/// Deterministic synthetic multilingual corpus. Train and dev hold only
/// central↔non-central pairs; test is multi-aligned over all languages.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    let central = validate_languages(&config.languages)?;
    let others: Vec<usize> = (0..config.languages.len()).filter(|&i| i != central).collect();
    if others.len() < 3 {
        return Err(Error::Corpus(format!(
            "need at least 3 non-central languages, got {}",
            others.len()
        )));
    }
    if config.num_concepts < 20 {
        return Err(Error::Corpus(format!(
            "need at least 20 concepts, got {}",
            config.num_concepts
        )));
    }
    if let Some(s) = config.zipf_exponent {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Corpus(format!("invalid zipf exponent {s}")));
        }
    }
    let ratios = match &config.size_ratios {
        None => vec![1.0; others.len()],
        Some(r) if r.len() == others.len() && r.iter().all(|&x| x.is_finite() && x > 0.0) => r.clone(),
        Some(r) => {
            return Err(Error::Corpus(format!(
                "size_ratios needs {} positive entries, got {r:?}",
                others.len()
            )))
        }
    };
    let share = WeightedIndex::new(&ratios).map_err(|e| Error::Corpus(e.to_string()))?;
    let sampler = ConceptSampler::new(config.num_concepts, config.zipf_exponent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let langs = &config.languages;

    let pairs_for = |count: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(2 * count);
        for concept_id in 0..count {
            let concepts = sampler.sentence(rng);
            let other = others[share.sample(rng)];
            let (c, o) = (&langs[central], &langs[other]);
            let (cr, or) = (c.render(&concepts), o.render(&concepts));
            out.push(SentencePair {
                src_lang: c.id.clone(),
                tgt_lang: o.id.clone(),
                src: cr.clone(),
                tgt: or.clone(),
                concept_id,
            });
            out.push(SentencePair {
                src_lang: o.id.clone(),
                tgt_lang: c.id.clone(),
                src: or,
                tgt: cr,
                concept_id,
            });
        }
        out
    };
    let train = pairs_for(config.train_sentences, &mut rng);
    let dev = pairs_for(config.dev_sentences, &mut rng);
    let test = (0..config.test_sentences)
        .map(|concept_id| {
            let concepts = sampler.sentence(&mut rng);
            AlignedSentence {
                concept_id,
                renderings: langs.iter().map(|l| l.render(&concepts)).collect(),
            }
        })
        .collect();
    Ok(Corpus {
        languages: config.languages.clone(),
        num_concepts: config.num_concepts,
        train,
        dev,
        test,
    })
}

/// Sampling probabilities `p_l ∝ (size_l / Σ size)^(1/T)`.
pub fn temperature_sample_weights(sizes: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    if sizes.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
        return Err(Error::config("direction sizes must be finite and non-negative"));
    }
    let total: f64 = sizes.iter().sum();
    if total <= 0.0 {
        return Err(Error::config("direction sizes sum to zero"));
    }
    let raw: Vec<f64> = sizes.iter().map(|s| (s / total).powf(1.0 / temperature)).collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|r| r / z).collect())
}

impl Corpus {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(&self.languages, self.num_concepts)
    }

    pub fn central(&self) -> usize {
        self.languages.iter().position(|l| l.central).expect("validated corpus")
    }

    pub fn lang_index(&self, id: &str) -> Option<usize> {
        self.languages.iter().position(|l| l.id == id)
    }

    pub fn direction_name(&self, d: Direction) -> String {
        format!("{}-{}", self.languages[d.src].id, self.languages[d.tgt].id)
    }

    pub fn parse_direction(&self, name: &str) -> Option<Direction> {
        let (s, t) = name.split_once('-')?;
        Some(Direction::new(self.lang_index(s)?, self.lang_index(t)?))
    }

    /// Central↔non-central directions, central-source first.
    pub fn supervised_directions(&self) -> Vec<Direction> {
        let c = self.central();
        let others = (0..self.languages.len()).filter(|&i| i != c);
        let mut out: Vec<Direction> = others.clone().map(|o| Direction::new(c, o)).collect();
        out.extend(others.map(|o| Direction::new(o, c)));
        out
    }

    /// Non-central↔non-central directions, never present in train.
    pub fn zeroshot_directions(&self) -> Vec<Direction> {
        let c = self.central();
        let n = self.languages.len();
        (0..n)
            .filter(|&s| s != c)
            .flat_map(|s| (0..n).filter(move |&t| t != c && t != s).map(move |t| Direction::new(s, t)))
            .collect()
    }

    pub fn split(&self, split: Split) -> &[SentencePair] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
        }
    }

    pub fn direction_of(&self, pair: &SentencePair) -> Option<Direction> {
        Some(Direction::new(self.lang_index(&pair.src_lang)?, self.lang_index(&pair.tgt_lang)?))
    }

    /// Number of pairs per direction of a split.
    pub fn direction_sizes(&self, split: Split, directions: &[Direction]) -> Vec<usize> {
        let mut counts = vec![0; directions.len()];
        for pair in self.split(split) {
            if let Some(d) = self.direction_of(pair) {
                if let Some(i) = directions.iter().position(|&x| x == d) {
                    counts[i] += 1;
                }
            }
        }
        counts
    }

    /// Rendering of test sentence `concept_id` in language `lang`.
    pub fn aligned_render(&self, concept_id: usize, lang: usize) -> Result<&[String]> {
        let s = self
            .test
            .get(concept_id)
            .filter(|s| s.concept_id == concept_id)
            .or_else(|| self.test.iter().find(|s| s.concept_id == concept_id))
            .ok_or_else(|| Error::Corpus(format!("unknown concept id {concept_id}")))?;
        s.renderings
            .get(lang)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Corpus(format!("no rendering for language index {lang}")))
    }
}
