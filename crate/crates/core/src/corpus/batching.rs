use std::collections::VecDeque;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::generate::{Corpus, Split};
use super::language::Direction;
use crate::error::{Error, Result};

/// Pairs of one direction, as indices into the split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub direction: Direction,
    pub pairs: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Item {
    index: usize,
    /// Encoder and decoder widths, language-ID position included.
    src_width: usize,
    tgt_width: usize,
}

/// Endless seeded batch stream. Each batch holds one direction, chosen by
/// weighted sampling; within a direction, batches are length-bucketed and
/// respect the padded token budget.
#[derive(Debug)]
pub struct BatchStream {
    directions: Vec<Direction>,
    chooser: WeightedIndex<f64>,
    pick_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    pools: Vec<Vec<Item>>,
    queues: Vec<VecDeque<Vec<usize>>>,
    max_tokens: usize,
    skipped: usize,
}

pub fn make_batches(
    corpus: &Corpus,
    split: Split,
    max_tokens: usize,
    weights: &[(Direction, f64)],
    max_len: usize,
    seed: u64,
) -> Result<BatchStream> {
    for d in corpus.supervised_directions() {
        if !weights.iter().any(|(w, _)| *w == d) {
            return Err(Error::config(format!(
                "no sampling weight for direction {}",
                corpus.direction_name(d)
            )));
        }
    }
    let directions: Vec<Direction> = weights.iter().map(|(d, _)| *d).collect();
    let mut pools = vec![Vec::new(); directions.len()];
    let mut skipped = 0;
    for (index, pair) in corpus.split(split).iter().enumerate() {
        let Some(slot) = corpus
            .direction_of(pair)
            .and_then(|d| directions.iter().position(|&x| x == d))
        else {
            continue;
        };
        let item = Item {
            index,
            src_width: pair.src.len() + 1,
            tgt_width: pair.tgt.len() + 1,
        };
        if item.src_width > max_len || item.tgt_width > max_len || item.src_width + item.tgt_width > max_tokens {
            skipped += 1;
            continue;
        }
        pools[slot].push(item);
    }
    for ((d, w), pool) in weights.iter().zip(&pools) {
        if !(*w >= 0.0 && w.is_finite()) {
            return Err(Error::config(format!("invalid weight {w}")));
        }
        if *w > 0.0 && pool.is_empty() {
            return Err(Error::config(format!(
                "direction {} has weight but no usable pairs",
                corpus.direction_name(*d)
            )));
        }
    }
    let chooser = WeightedIndex::new(weights.iter().map(|(_, w)| *w))
        .map_err(|e| Error::config(format!("sampling weights: {e}")))?;
    let queues = vec![VecDeque::new(); directions.len()];
    Ok(BatchStream {
        directions,
        chooser,
        pick_rng: ChaCha8Rng::seed_from_u64(seed),
        shuffle_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c_0000_0001),
        pools,
        queues,
        max_tokens,
        skipped,
    })
}

impl BatchStream {
    /// Pairs dropped for exceeding `max_len` or the token budget.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn refill(&mut self, slot: usize) {
        let mut items = self.pools[slot].clone();
        items.shuffle(&mut self.shuffle_rng);
        items.sort_by_key(|it| (it.tgt_width, it.src_width));
        let mut batches = Vec::new();
        let mut current: Vec<usize> = Vec::new();
        let (mut ws, mut wt) = (0, 0);
        for it in items {
            let (ns, nt) = (ws.max(it.src_width), wt.max(it.tgt_width));
            if !current.is_empty() && (current.len() + 1) * (ns + nt) > self.max_tokens {
                batches.push(std::mem::take(&mut current));
                ws = it.src_width;
                wt = it.tgt_width;
            } else {
                ws = ns;
                wt = nt;
            }
            current.push(it.index);
        }
        if !current.is_empty() {
            batches.push(current);
        }
        batches.shuffle(&mut self.shuffle_rng);
        self.queues[slot] = batches.into();
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let slot = self.chooser.sample(&mut self.pick_rng);
        if self.queues[slot].is_empty() {
            self.refill(slot);
        }
        let pairs = self.queues[slot].pop_front()?;
        Some(Batch {
            direction: self.directions[slot],
            pairs,
        })
    }
}
