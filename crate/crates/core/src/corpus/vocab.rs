use std::collections::HashMap;

use super::language::LanguageSpec;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
const FIRST_ID_TOKEN: u32 = 2;

/// Word-level vocabulary: specials, one ID token per language, then each
/// language's concept tokens in a contiguous range.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    num_languages: usize,
    num_concepts: usize,
}

impl Vocabulary {
    pub fn new(languages: &[LanguageSpec], num_concepts: usize) -> Result<Self> {
        let mut tokens = vec!["<pad>".to_string(), "</s>".to_string()];
        tokens.extend(languages.iter().map(|l| format!("<{}>", l.id)));
        for lang in languages {
            tokens.extend((0..num_concepts).map(|c| lang.token(c)));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Corpus(format!("token {t:?} owned twice")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            num_languages: languages.len(),
            num_concepts,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_languages(&self) -> usize {
        self.num_languages
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// The language-ID token of language `lang`.
    pub fn lang_token(&self, lang: usize) -> u32 {
        assert!(lang < self.num_languages);
        FIRST_ID_TOKEN + lang as u32
    }

    pub fn is_lang_token(&self, id: u32) -> bool {
        (FIRST_ID_TOKEN..FIRST_ID_TOKEN + self.num_languages as u32).contains(&id)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == PAD || id == EOS || self.is_lang_token(id)
    }

    fn first_content(&self) -> u32 {
        FIRST_ID_TOKEN + self.num_languages as u32
    }

    /// Language owning a content token; specials are owned by none.
    pub fn owner(&self, id: u32) -> Option<usize> {
        let first = self.first_content();
        if id < first || id as usize >= self.tokens.len() {
            return None;
        }
        Some((id - first) as usize / self.num_concepts)
    }

    /// Token-id range of one language's content tokens.
    pub fn range(&self, lang: usize) -> std::ops::Range<u32> {
        let start = self.first_content() + (lang * self.num_concepts) as u32;
        start..start + self.num_concepts as u32
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<u32>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| Error::Corpus(format!("unknown token {:?}", t.as_ref())))
            })
            .collect()
    }

    /// Token strings, skipping ids outside the vocabulary.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().filter_map(|&i| self.token(i)).map(str::to_string).collect()
    }
}
