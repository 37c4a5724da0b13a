//! On-disk corpus layout: one JSON record per line, tokens space-joined.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::{validate_languages, AlignedSentence, Corpus, SentencePair};
use super::language::LanguageSpec;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";
pub const TEST_FILE: &str = "test.aligned.jsonl";

const MAX_CONCEPTS: usize = 100_000;
const MAX_LANGUAGES: usize = 64;

#[derive(Serialize, Deserialize)]
struct PairRecord {
    src_lang: String,
    tgt_lang: String,
    src: String,
    tgt: String,
    concept_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub languages: Vec<LanguageSpec>,
    pub num_concepts: usize,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_sentences: usize,
    pub fingerprint: String,
}

pub fn render_pairs(pairs: &[SentencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let rec = PairRecord {
            src_lang: p.src_lang.clone(),
            tgt_lang: p.tgt_lang.clone(),
            src: p.src.join(" "),
            tgt: p.tgt.join(" "),
            concept_id: p.concept_id,
        };
        out.push_str(&serde_json::to_string(&rec).expect("plain record"));
        out.push('\n');
    }
    out
}

fn tokens_of(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

fn check_owned(vocab: &Vocabulary, tokens: &[String], lang: usize, line: usize) -> Result<()> {
    for t in tokens {
        let owner = vocab.id(t).and_then(|id| vocab.owner(id));
        if owner != Some(lang) {
            return Err(Error::Parse {
                line,
                msg: format!("token {t:?} is not owned by language index {lang}"),
            });
        }
    }
    Ok(())
}

pub fn parse_pairs(text: &str, languages: &[LanguageSpec], vocab: &Vocabulary) -> Result<Vec<SentencePair>> {
    let index = |id: &str, line| {
        languages
            .iter()
            .position(|l| l.id == id)
            .ok_or_else(|| Error::Parse {
                line,
                msg: format!("unknown language {id:?}"),
            })
    };
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let (s, t) = (index(&rec.src_lang, line)?, index(&rec.tgt_lang, line)?);
        if s == t {
            return Err(Error::Parse {
                line,
                msg: "source and target language are the same".into(),
            });
        }
        let (src, tgt) = (tokens_of(&rec.src), tokens_of(&rec.tgt));
        check_owned(vocab, &src, s, line)?;
        check_owned(vocab, &tgt, t, line)?;
        out.push(SentencePair {
            src_lang: rec.src_lang,
            tgt_lang: rec.tgt_lang,
            src,
            tgt,
            concept_id: rec.concept_id,
        });
    }
    Ok(out)
}

pub fn render_aligned(test: &[AlignedSentence], languages: &[LanguageSpec]) -> String {
    let mut out = String::new();
    for s in test {
        write!(out, "{{\"concept_id\":{}", s.concept_id).expect("string write");
        for (lang, tokens) in languages.iter().zip(&s.renderings) {
            let key = serde_json::to_string(&lang.id).expect("string");
            let val = serde_json::to_string(&tokens.join(" ")).expect("string");
            write!(out, ",{key}:{val}").expect("string write");
        }
        out.push_str("}\n");
    }
    out
}

pub fn parse_aligned(
    text: &str,
    languages: &[LanguageSpec],
    vocab: &Vocabulary,
) -> Result<Vec<AlignedSentence>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line, msg };
        let rec: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        let concept_id = rec
            .get("concept_id")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| err("missing integer concept_id".into()))?;
        if rec.len() != languages.len() + 1 {
            return Err(err(format!(
                "expected {} fields, found {}",
                languages.len() + 1,
                rec.len()
            )));
        }
        let mut renderings = Vec::with_capacity(languages.len());
        for (li, lang) in languages.iter().enumerate() {
            let text = rec
                .get(&lang.id)
                .and_then(serde_json::Value::as_str)
                .ok_or_else(|| err(format!("missing rendering for {:?}", lang.id)))?;
            let tokens = tokens_of(text);
            check_owned(vocab, &tokens, li, line)?;
            renderings.push(tokens);
        }
        out.push(AlignedSentence {
            concept_id: usize::try_from(concept_id).map_err(|e| err(e.to_string()))?,
            renderings,
        });
    }
    Ok(out)
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(text)?;
    validate_languages(&m.languages)?;
    if m.num_concepts == 0 || m.num_concepts > MAX_CONCEPTS || m.languages.len() > MAX_LANGUAGES {
        return Err(Error::Corpus(format!(
            "manifest sizes out of range: {} languages, {} concepts",
            m.languages.len(),
            m.num_concepts
        )));
    }
    Ok(m)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        write!(s, "{b:02x}").expect("string write");
        s
    })
}

fn fingerprint_of(train: &str, dev: &str, test: &str) -> String {
    let mut h = Sha256::new();
    for (name, body) in [(TRAIN_FILE, train), (DEV_FILE, dev), (TEST_FILE, test)] {
        h.update(name.as_bytes());
        h.update((body.len() as u64).to_le_bytes());
        h.update(body.as_bytes());
    }
    hex(&h.finalize())
}

impl Corpus {
    /// SHA-256 over the three data files as they are written to disk.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(
            &render_pairs(&self.train),
            &render_pairs(&self.dev),
            &render_aligned(&self.test, &self.languages),
        )
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            languages: self.languages.clone(),
            num_concepts: self.num_concepts,
            train_pairs: self.train.len(),
            dev_pairs: self.dev.len(),
            test_sentences: self.test.len(),
            fingerprint: self.fingerprint(),
        }
    }

    pub fn write_dir(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        fs::write(dir.join(TRAIN_FILE), render_pairs(&self.train))?;
        fs::write(dir.join(DEV_FILE), render_pairs(&self.dev))?;
        fs::write(dir.join(TEST_FILE), render_aligned(&self.test, &self.languages))?;
        let mut m = serde_json::to_string_pretty(&manifest)?;
        m.push('\n');
        fs::write(dir.join(MANIFEST_FILE), m)?;
        Ok(manifest)
    }

    /// Loads a corpus directory, refusing it if the data files do not hash
    /// to the manifest's fingerprint.
    pub fn read_dir(dir: &Path) -> Result<(Corpus, Manifest)> {
        let manifest = parse_manifest(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let train = fs::read_to_string(dir.join(TRAIN_FILE))?;
        let dev = fs::read_to_string(dir.join(DEV_FILE))?;
        let test = fs::read_to_string(dir.join(TEST_FILE))?;
        let found = fingerprint_of(&train, &dev, &test);
        if found != manifest.fingerprint {
            return Err(Error::Fingerprint {
                expected: manifest.fingerprint,
                found,
            });
        }
        let vocab = Vocabulary::new(&manifest.languages, manifest.num_concepts)?;
        let corpus = Corpus {
            languages: manifest.languages.clone(),
            num_concepts: manifest.num_concepts,
            train: parse_pairs(&train, &manifest.languages, &vocab)?,
            dev: parse_pairs(&dev, &manifest.languages, &vocab)?,
            test: parse_aligned(&test, &manifest.languages, &vocab)?,
        };
        Ok((corpus, manifest))
    }
}
