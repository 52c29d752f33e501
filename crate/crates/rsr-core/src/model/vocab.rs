//! Word-level tokenizer and vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Bidirectional id <-> word map with training-corpus frequency counts.
/// Ids are dense in `[0, len)`; ids 0..=3 are reserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    freqs: Vec<u64>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

/// Encoded token id sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Lowercases, splits on whitespace, and detaches `. ! ? ,` as standalone
/// tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let lower = word.to_lowercase();
        let mut current = String::new();
        for ch in lower.chars() {
            if matches!(ch, '.' | '!' | '?' | ',') {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

impl Vocab {
    /// Builds a vocabulary from a corpus: words ranked by frequency with a
    /// lexicographic tie-break, truncated to `max_size` non-reserved
    /// entries, reserved ids prepended.
    pub fn build(corpus: &str, max_size: usize) -> Result<Vocab> {
        let tokens = tokenize(corpus);
        if tokens.is_empty() {
            return Err(Error::Tokenizer("empty corpus".into()));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(max_size);

        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut freqs: Vec<u64> = vec![0; RESERVED.len()];
        for (w, f) in ranked {
            words.push(w);
            freqs.push(f);
        }
        Ok(Vocab::from_parts(words, freqs))
    }

    pub fn from_parts(words: Vec<String>, freqs: Vec<u64>) -> Vocab {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, freqs, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }

    /// Training-corpus frequency of an id (0 for reserved ids).
    pub fn freq(&self, id: u32) -> Option<u64> {
        self.freqs.get(id as usize).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn freqs(&self) -> &[u64] {
        &self.freqs
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        TokenSequence(
            tokenize(text)
                .iter()
                .map(|t| self.id(t).unwrap_or(UNK_ID))
                .collect(),
        )
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        let mut out = Vec::with_capacity(seq.len());
        for &id in &seq.0 {
            let w = self
                .word(id)
                .ok_or_else(|| Error::Tokenizer(format!("id {} out of range", id)))?;
            out.push(w.to_string());
        }
        Ok(out.join(" "))
    }
}
