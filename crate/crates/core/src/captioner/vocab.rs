use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const DEFAULT_MAX_TOKENS: usize = 64;

const BUILTIN: &str = include_str!("../../assets/vocab.txt");

/// Closed word list: line number is the token id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
    hash: String,
}

impl Vocabulary {
    /// The vocabulary shipped with the crate (`assets/vocab.txt`).
    pub fn builtin() -> Self {
        Self::parse(BUILTIN).expect("bundled vocabulary is well formed")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        if words.len() < 3
            || words[PAD] != "<pad>"
            || words[BOS] != "<bos>"
            || words[EOS] != "<eos>"
        {
            return Err(Error::Config(
                "vocabulary must start with <pad>, <bos>, <eos>".into(),
            ));
        }
        let mut ids = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || ids.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!(
                    "empty or duplicate vocabulary entry on line {}",
                    i + 1
                )));
            }
        }
        let hash = hex::encode(Sha256::digest(text.as_bytes()));
        Ok(Self { words, ids, hash })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// SHA-256 of the vocabulary file contents, hex encoded.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Words of `prompt` that are outside the vocabulary, in order of appearance.
    pub fn unknown_words(&self, prompt: &str) -> Vec<String> {
        normalized_words(prompt)
            .into_iter()
            .filter(|w| !self.ids.contains_key(w))
            .collect()
    }

    /// Lowercase, punctuation-stripped whitespace tokenization into a padded
    /// sequence of length `max_len` framed by BOS/EOS.
    pub fn tokenize(&self, prompt: &str, max_len: usize) -> Result<TokenSeq> {
        assert!(max_len >= 2, "token length must leave room for BOS and EOS");
        let words = normalized_words(prompt);
        let mut body = Vec::with_capacity(words.len());
        for w in &words {
            body.push(self.id(w).ok_or_else(|| Error::UnknownToken(w.clone()))?);
        }
        if body.len() > max_len - 2 {
            log::warn!(
                "prompt has {} tokens; truncating to {}",
                body.len(),
                max_len - 2
            );
            body.truncate(max_len - 2);
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend(body);
        ids.push(EOS);
        let used = ids.len();
        ids.resize(max_len, PAD);
        let attention_mask = (0..max_len).map(|i| i < used).collect();
        Ok(TokenSeq {
            ids,
            attention_mask,
        })
    }
}

/// Fixed-length token ids with a mask that is true exactly on non-pad positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn active(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }

    /// True when the sequence carries no words (just BOS, EOS and padding).
    pub fn is_empty_prompt(&self) -> bool {
        self.active() <= 2
    }
}

fn normalized_words(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Lowercase, punctuation-free, single-spaced form of a prompt.
pub fn normalize_prompt(prompt: &str) -> String {
    normalized_words(prompt).join(" ")
}

/// Words between BOS and EOS, space-joined.
pub fn detokenize(vocab: &Vocabulary, tokens: &TokenSeq) -> String {
    tokens
        .ids
        .iter()
        .zip(&tokens.attention_mask)
        .filter(|&(&id, &m)| m && id != BOS && id != EOS && id != PAD)
        .filter_map(|(&id, _)| vocab.word(id))
        .collect::<Vec<_>>()
        .join(" ")
}
