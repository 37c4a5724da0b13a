use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{bleu, otr};
use super::search::{translate, BeamConfig};
use crate::corpus::{Corpus, Direction, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSet {
    Supervised,
    Zeroshot,
    All,
}

impl std::str::FromStr for DirectionSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(DirectionSet::Supervised),
            "zeroshot" => Ok(DirectionSet::Zeroshot),
            "all" => Ok(DirectionSet::All),
            _ => Err(Error::config(format!("unknown direction set {s:?}"))),
        }
    }
}

impl DirectionSet {
    pub fn directions(self, corpus: &Corpus) -> Vec<Direction> {
        match self {
            DirectionSet::Supervised => corpus.supervised_directions(),
            DirectionSet::Zeroshot => corpus.zeroshot_directions(),
            DirectionSet::All => {
                let mut d = corpus.supervised_directions();
                d.extend(corpus.zeroshot_directions());
                d
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionScore {
    pub bleu: f64,
    /// Off-target fraction in [0, 1].
    pub otr: f64,
    pub sentences: usize,
    pub zeroshot: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub bleu: f64,
    pub otr: f64,
    pub directions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by direction name, e.g. `L1-L2`.
    pub directions: BTreeMap<String, DirectionScore>,
    pub supervised: Option<Aggregate>,
    pub zeroshot: Option<Aggregate>,
    /// `(step, sep)` pairs when the report belongs to a selection run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sep_trajectory: Vec<(u64, f64)>,
}

fn aggregate<'a>(scores: impl Iterator<Item = &'a DirectionScore>) -> Option<Aggregate> {
    let v: Vec<&DirectionScore> = scores.collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    Some(Aggregate {
        bleu: v.iter().map(|s| s.bleu).sum::<f64>() / n,
        otr: v.iter().map(|s| s.otr).sum::<f64>() / n,
        directions: v.len(),
    })
}

/// Scores `translate_fn(direction, source ids)` against the aligned test
/// split, using at most `max_sentences` sentences per direction.
pub fn evaluate_with<F>(
    corpus: &Corpus,
    directions: &[Direction],
    max_sentences: Option<usize>,
    mut translate_fn: F,
) -> Result<EvalReport>
where
    F: FnMut(Direction, &[u32]) -> Result<Vec<u32>>,
{
    let vocab: Vocabulary = corpus.vocabulary()?;
    let zs = corpus.zeroshot_directions();
    let n = max_sentences.unwrap_or(usize::MAX).min(corpus.test.len());
    if n == 0 {
        return Err(Error::Corpus("test split is empty".into()));
    }
    let mut out = BTreeMap::new();
    for &d in directions {
        if d.src >= corpus.languages.len() || d.tgt >= corpus.languages.len() || d.src == d.tgt {
            return Err(Error::Corpus(format!("direction {d:?} is absent from the test data")));
        }
        let mut hyps = Vec::with_capacity(n);
        let mut refs = Vec::with_capacity(n);
        for s in &corpus.test[..n] {
            let src = vocab.encode(&s.renderings[d.src])?;
            hyps.push(translate_fn(d, &src)?);
            refs.push(vocab.encode(&s.renderings[d.tgt])?);
        }
        out.insert(
            corpus.direction_name(d),
            DirectionScore {
                bleu: bleu(&hyps, &refs)?,
                otr: otr(&hyps, d.tgt, &vocab),
                sentences: n,
                zeroshot: zs.contains(&d),
            },
        );
    }
    Ok(EvalReport {
        supervised: aggregate(out.values().filter(|s| !s.zeroshot)),
        zeroshot: aggregate(out.values().filter(|s| s.zeroshot)),
        directions: out,
        sep_trajectory: Vec::new(),
    })
}

/// Beam-search evaluation of a model.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    corpus: &Corpus,
    directions: &[Direction],
    beam: BeamConfig,
    max_sentences: Option<usize>,
) -> Result<EvalReport> {
    let vocab = corpus.vocabulary()?;
    evaluate_with(corpus, directions, max_sentences, |d, src| {
        translate(params, cfg, &vocab, src, d.src, d.tgt, beam)
    })
}

/// Scores the references against themselves.
pub fn evaluate_references(corpus: &Corpus, directions: &[Direction]) -> Result<EvalReport> {
    let vocab = corpus.vocabulary()?;
    let mut next = 0usize;
    evaluate_with(corpus, directions, None, |d, _| {
        let s = &corpus.test[next % corpus.test.len()];
        next += 1;
        vocab.encode(&s.renderings[d.tgt])
    })
}
