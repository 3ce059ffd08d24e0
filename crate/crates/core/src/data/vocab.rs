//! Whitespace tokenizer with byte fallback.
//!
//! Ids 0..16 are reserved, ids 16..272 are the 256 byte tokens, and corpus
//! words follow. A word missing from the vocabulary is spelled out as byte
//! tokens; consecutive unknown words are separated by the space byte so the
//! sequence decodes back to the whitespace-normalized input.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const TOUCH: u32 = 3;
pub const RESERVED: u32 = 16;
pub const BYTE_BASE: u32 = RESERVED;
pub const FIRST_WORD: u32 = BYTE_BASE + 256;

pub const TOUCH_TEXT: &str = "[TOUCH]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    words: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;
    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocab::from_words(r.words)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { words: v.words }
    }
}

impl Vocab {
    /// Vocabulary over the given words, in order, skipping duplicates.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut out = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            if w.is_empty() || w.chars().any(char::is_whitespace) || w == TOUCH_TEXT {
                return Err(Error::Parameter(format!("invalid vocabulary word {w:?}")));
            }
            if !out.index.contains_key(&w) {
                let id = FIRST_WORD + out.words.len() as u32;
                out.index.insert(w.clone(), id);
                out.words.push(w);
            }
        }
        Ok(out)
    }

    /// Vocabulary of every whitespace-separated word in `texts`, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| *w != TOUCH_TEXT)
            .map(str::to_owned)
            .collect();
        words.sort();
        words.dedup();
        Self::from_words(words).expect("split_whitespace yields valid words")
    }

    pub fn len(&self) -> usize {
        FIRST_WORD as usize + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    /// Text of a token: words verbatim, reserved ids as bracketed names,
    /// bytes as `<0xNN>`.
    pub fn token_text(&self, id: u32) -> String {
        match id {
            PAD => "[PAD]".into(),
            BOS => "[BOS]".into(),
            EOS => "[EOS]".into(),
            TOUCH => TOUCH_TEXT.into(),
            i if i < RESERVED => format!("[RESERVED{i}]"),
            i if i < FIRST_WORD => format!("<0x{:02X}>", i - BYTE_BASE),
            i => self.words.get((i - FIRST_WORD) as usize).cloned().unwrap_or_else(|| format!("[UNK{i}]")),
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        let mut prev_bytes = false;
        for word in text.split_whitespace() {
            if word == TOUCH_TEXT {
                ids.push(TOUCH);
                prev_bytes = false;
            } else if let Some(id) = self.id(word) {
                ids.push(id);
                prev_bytes = false;
            } else {
                if prev_bytes {
                    ids.push(BYTE_BASE + u32::from(b' '));
                }
                ids.extend(word.bytes().map(|b| BYTE_BASE + u32::from(b)));
                prev_bytes = true;
            }
        }
        ids
    }

    /// Inverse of [`Vocab::tokenize`] up to whitespace normalization.
    /// Reserved ids other than the touch placeholder are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, words: &mut Vec<String>| {
            if !bytes.is_empty() {
                let s = String::from_utf8_lossy(bytes);
                words.extend(s.split_whitespace().map(str::to_owned));
                bytes.clear();
            }
        };
        for &id in ids {
            if (BYTE_BASE..FIRST_WORD).contains(&id) {
                bytes.push((id - BYTE_BASE) as u8);
                continue;
            }
            flush(&mut bytes, &mut words);
            if id == TOUCH {
                words.push(TOUCH_TEXT.into());
            } else if id >= FIRST_WORD {
                if let Some(w) = self.words.get((id - FIRST_WORD) as usize) {
                    words.push(w.clone());
                }
            }
        }
        flush(&mut bytes, &mut words);
        words.join(" ")
    }
}

pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
