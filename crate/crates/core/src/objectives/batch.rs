use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Corpus, Direction, Split, Vocabulary, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::Padded;

/// Teacher-forcing batch of one direction. Encoder rows are
/// `[<l_s>, x..]`, decoder inputs `[<l_t>, y..]`, targets `[y.., </s>]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositiveBatch {
    pub direction: Direction,
    pub src: Padded,
    pub dec_in: Padded,
    pub targets: Padded,
}

impl PositiveBatch {
    /// `rows` holds content token ids of (source, target) sentences.
    pub fn new(vocab: &Vocabulary, direction: Direction, rows: &[(Vec<u32>, Vec<u32>)]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::dim("empty batch"));
        }
        let n = vocab.num_languages();
        if direction.src >= n || direction.tgt >= n {
            return Err(Error::config(format!("direction {direction:?} outside {n} languages")));
        }
        let (s_id, t_id) = (vocab.lang_token(direction.src), vocab.lang_token(direction.tgt));
        let mut src = Vec::with_capacity(rows.len());
        let mut dec = Vec::with_capacity(rows.len());
        let mut tgt = Vec::with_capacity(rows.len());
        for (x, y) in rows {
            if x.iter().chain(y).any(|&t| vocab.is_special(t)) {
                return Err(Error::config("sentence contains a special token"));
            }
            src.push([&[s_id], x.as_slice()].concat());
            dec.push([&[t_id], y.as_slice()].concat());
            tgt.push([y.as_slice(), &[EOS]].concat());
        }
        Ok(PositiveBatch {
            direction,
            src: Padded::from_rows(&src, PAD)?,
            dec_in: Padded::from_rows(&dec, PAD)?,
            targets: Padded::from_rows(&tgt, PAD)?,
        })
    }

    pub fn from_batch(corpus: &Corpus, vocab: &Vocabulary, split: Split, batch: &Batch) -> Result<Self> {
        let pairs = corpus.split(split);
        let rows = batch
            .pairs
            .iter()
            .map(|&i| {
                let p = pairs
                    .get(i)
                    .ok_or_else(|| Error::Corpus(format!("pair index {i} out of range")))?;
                Ok((vocab.encode(&p.src)?, vocab.encode(&p.tgt)?))
            })
            .collect::<Result<Vec<_>>>()?;
        PositiveBatch::new(vocab, batch.direction, &rows)
    }

    pub fn batch_size(&self) -> usize {
        self.src.batch
    }

    /// Number of non-pad target positions.
    pub fn target_tokens(&self) -> usize {
        self.targets.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    /// One negative language for the whole batch.
    #[default]
    PerBatch,
    /// An independent draw for every sentence.
    PerSentence,
}

/// A positive batch with the decoder-side language ID swapped for an ID
/// outside `{l_s, l_t}`.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeBatch {
    pub direction: Direction,
    /// Replacement language per row.
    pub negative_langs: Vec<usize>,
    pub src: Padded,
    pub dec_in: Padded,
    pub targets: Padded,
}

pub fn make_negative<R: Rng + ?Sized>(
    pos: &PositiveBatch,
    vocab: &Vocabulary,
    mode: NegativeMode,
    rng: &mut R,
) -> Result<NegativeBatch> {
    let Direction { src, tgt } = pos.direction;
    let eligible: Vec<usize> = (0..vocab.num_languages()).filter(|&l| l != src && l != tgt).collect();
    if eligible.is_empty() {
        return Err(Error::config(format!(
            "negative sampling needs at least 3 languages, got {}",
            vocab.num_languages()
        )));
    }
    let rows = pos.batch_size();
    let negative_langs: Vec<usize> = match mode {
        NegativeMode::PerBatch => vec![eligible[rng.random_range(0..eligible.len())]; rows],
        NegativeMode::PerSentence => (0..rows).map(|_| eligible[rng.random_range(0..eligible.len())]).collect(),
    };
    let mut dec_in = pos.dec_in.clone();
    for (b, &l) in negative_langs.iter().enumerate() {
        dec_in.ids[b * dec_in.width] = vocab.lang_token(l);
    }
    Ok(NegativeBatch {
        direction: pos.direction,
        negative_langs,
        src: pos.src.clone(),
        dec_in,
        targets: pos.targets.clone(),
    })
}

/// True if `neg` carries the payload of `pos` and differs only at the
/// decoder language-ID position of each row.
pub fn is_coupled(pos: &PositiveBatch, neg: &NegativeBatch) -> bool {
    if pos.direction != neg.direction
        || pos.src != neg.src
        || pos.targets != neg.targets
        || pos.dec_in.mask != neg.dec_in.mask
        || pos.dec_in.width != neg.dec_in.width
        || neg.negative_langs.len() != pos.batch_size()
    {
        return false;
    }
    let w = pos.dec_in.width;
    pos.dec_in
        .ids
        .iter()
        .zip(&neg.dec_in.ids)
        .enumerate()
        .all(|(i, (a, b))| if i % w == 0 { a != b } else { a == b })
        && neg
            .negative_langs
            .iter()
            .all(|&l| l != pos.direction.src && l != pos.direction.tgt)
}
