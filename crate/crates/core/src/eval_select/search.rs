use std::cmp::Ordering;

use crate::corpus::{Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::model::{encode, DecoderState, EncodedSource, IncrementalDecoder, ModelConfig, ModelParams};

/// Autoregressive scorer: `initial` consumes the target language ID,
/// `advance` feeds one token; both return next-token log-probabilities.
pub trait StepModel {
    type State: Clone;
    fn initial(&self) -> Result<(Self::State, Vec<f64>)>;
    fn advance(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>>;
}

pub struct ModelStepper<'a> {
    decoder: IncrementalDecoder<'a>,
    target_id: u32,
}

impl<'a> ModelStepper<'a> {
    pub fn new(params: &'a ModelParams, cfg: &'a ModelConfig, enc: &EncodedSource, target_id: u32) -> Result<Self> {
        Ok(ModelStepper {
            decoder: IncrementalDecoder::new(cfg, params, enc)?,
            target_id,
        })
    }
}

impl StepModel for ModelStepper<'_> {
    type State = DecoderState;

    fn initial(&self) -> Result<(DecoderState, Vec<f64>)> {
        let mut s = self.decoder.start();
        let out = self.decoder.step(&mut s, self.target_id)?;
        Ok((s, out.log_probs))
    }

    fn advance(&self, state: &mut DecoderState, token: u32) -> Result<Vec<f64>> {
        Ok(self.decoder.step(state, token)?.log_probs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Output tokens allowed before EOS.
    pub max_output: usize,
    /// Final score is `logprob / len^length_penalty`, `len` counting EOS.
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 5,
            max_output: 30,
            length_penalty: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Output tokens, EOS excluded.
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities, EOS included when reached.
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
}

struct Alive<S> {
    tokens: Vec<u32>,
    logprob: f64,
    state: S,
    next: Vec<f64>,
}

fn by_score_then_tokens(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn normalized(logprob: f64, len: usize, penalty: f64) -> f64 {
    logprob / (len.max(1) as f64).powf(penalty)
}

/// Length-normalized beam search. Each step keeps the `beam` best
/// extensions of the live hypotheses; extensions ending in EOS leave the
/// beam as finished. Ties break toward the lexicographically smaller token
/// sequence. Tokens in `banned` are never emitted.
pub fn beam_search<M: StepModel>(model: &M, cfg: BeamConfig, banned: &[u32]) -> Result<Hypothesis> {
    if cfg.beam == 0 {
        return Err(Error::config("beam must be at least 1"));
    }
    let (state, next) = model.initial()?;
    let mut alive = vec![Alive {
        tokens: Vec::new(),
        logprob: 0.0,
        state,
        next,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for len in 0..=cfg.max_output {
        if alive.is_empty() {
            break;
        }
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (i, h) in alive.iter().enumerate() {
            for (tok, &lp) in h.next.iter().enumerate() {
                let tok = tok as u32;
                if banned.contains(&tok) || (len == cfg.max_output && tok != EOS) || lp == f64::NEG_INFINITY {
                    continue;
                }
                cands.push((h.logprob + lp, i, tok));
            }
        }
        // Parents share one length, so comparing (parent tokens, token)
        // orders the extended sequences lexicographically.
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| alive[a.1].tokens.cmp(&alive[b.1].tokens))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(cfg.beam);
        let mut next_alive = Vec::new();
        for c in cands {
            let (lp, i, tok) = c;
            if tok == EOS {
                let tokens = alive[i].tokens.clone();
                done.push(Hypothesis {
                    score: normalized(lp, tokens.len() + 1, cfg.length_penalty),
                    tokens,
                    logprob: lp,
                    finished: true,
                });
            } else {
                let mut state = alive[i].state.clone();
                let next = model.advance(&mut state, tok)?;
                let mut tokens = alive[i].tokens.clone();
                tokens.push(tok);
                next_alive.push(Alive {
                    tokens,
                    logprob: lp,
                    state,
                    next,
                });
            }
        }
        alive = next_alive;
    }
    for h in alive {
        let score = normalized(h.logprob, h.tokens.len(), cfg.length_penalty);
        done.push(Hypothesis {
            tokens: h.tokens,
            logprob: h.logprob,
            score,
            finished: false,
        });
    }
    done.into_iter()
        .min_by(|a, b| by_score_then_tokens((a.score, &a.tokens), (b.score, &b.tokens)))
        .ok_or_else(|| Error::contract("beam search produced no hypothesis"))
}

/// Greedy decoding: always the best allowed token, until EOS.
pub fn greedy<M: StepModel>(model: &M, max_output: usize, banned: &[u32]) -> Result<Hypothesis> {
    beam_search(
        model,
        BeamConfig {
            beam: 1,
            max_output,
            length_penalty: 1.0,
        },
        banned,
    )
}

/// PAD and every language-ID token.
pub fn banned_tokens(vocab: &Vocabulary) -> Vec<u32> {
    (0..vocab.len() as u32)
        .filter(|&t| vocab.is_special(t) && t != EOS)
        .collect()
}

/// Beam-search translation of `src` (content ids) from `src_lang` into
/// `tgt_lang`.
pub fn translate(
    params: &ModelParams,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    src: &[u32],
    src_lang: usize,
    tgt_lang: usize,
    beam: BeamConfig,
) -> Result<Vec<u32>> {
    let enc = encode(src, vocab.lang_token(src_lang), params, cfg)?;
    let stepper = ModelStepper::new(params, cfg, &enc, vocab.lang_token(tgt_lang))?;
    let beam = BeamConfig {
        max_output: beam.max_output.min(cfg.max_len - 1),
        ..beam
    };
    Ok(beam_search(&stepper, beam, &banned_tokens(vocab))?.tokens)
}
