//! Synthetic multilingual corpora: languages that share a concept inventory
//! and differ in surface tokens and word order.

mod batching;
mod generate;
mod io;
mod language;
mod vocab;

pub use batching::{make_batches, Batch, BatchStream};
pub use generate::{
    generate_corpus, temperature_sample_weights, AlignedSentence, Corpus, CorpusConfig,
    SentencePair, Split, MAX_SENTENCE_LEN, MIN_SENTENCE_LEN,
};
pub use io::{
    parse_aligned, parse_manifest, parse_pairs, render_aligned, render_pairs, Manifest, DEV_FILE,
    MANIFEST_FILE, TEST_FILE, TRAIN_FILE,
};
pub use language::{Direction, LanguageSpec, OrderRule};
pub use vocab::{Vocabulary, EOS, PAD};

#[cfg(test)]
mod tests;
