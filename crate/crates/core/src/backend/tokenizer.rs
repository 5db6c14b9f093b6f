//! Tokenizers behind the backend.
//!
//! Both implementations are byte-exact: concatenating the byte strings of
//! the ids returned by `encode(s)` reproduces `s`. Prompt anchoring relies
//! on this to map rendered character spans onto token indices.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use tiktoken_rs::CoreBPE;

use crate::error::{Error, Result};

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;

    /// Raw bytes of a single token; `None` for ids outside the vocabulary.
    fn token_bytes(&self, id: u32) -> Option<Vec<u8>>;

    fn vocab_size(&self) -> usize;

    fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self
                .token_bytes(id)
                .ok_or_else(|| Error::Tokenizer(format!("unknown token id {id}")))?;
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Byte span of every token inside the decoded text.
    fn byte_spans(&self, ids: &[u32]) -> Result<Vec<Range<usize>>> {
        let mut spans = Vec::with_capacity(ids.len());
        let mut at = 0;
        for &id in ids {
            let len = self
                .token_bytes(id)
                .ok_or_else(|| Error::Tokenizer(format!("unknown token id {id}")))?
                .len();
            spans.push(at..at + len);
            at += len;
        }
        Ok(spans)
    }
}

/// GPT-2 byte-level BPE (the `r50k_base` table, 50,257 ids).
#[derive(Clone)]
pub struct Gpt2Bpe {
    bpe: Arc<CoreBPE>,
}

impl Gpt2Bpe {
    pub const VOCAB_SIZE: usize = 50_257;

    /// The table is built once per process and shared.
    pub fn new() -> Result<Self> {
        static TABLE: OnceLock<std::result::Result<Arc<CoreBPE>, String>> = OnceLock::new();
        let table = TABLE.get_or_init(|| tiktoken_rs::r50k_base().map(Arc::new).map_err(|e| e.to_string()));
        match table {
            Ok(bpe) => Ok(Self { bpe: Arc::clone(bpe) }),
            Err(e) => Err(Error::Tokenizer(e.clone())),
        }
    }
}

impl std::fmt::Debug for Gpt2Bpe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Gpt2Bpe")
    }
}

impl Tokenizer for Gpt2Bpe {
    fn encode(&self, text: &str) -> Vec<u32> {
        self.bpe.encode_ordinary(text)
    }

    fn token_bytes(&self, id: u32) -> Option<Vec<u8>> {
        if id as usize >= Self::VOCAB_SIZE {
            return None;
        }
        self.bpe.decode_bytes(&[id]).ok()
    }

    fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }
}

/// Greedy longest-match tokenizer over an explicit byte-string vocabulary.
///
/// Ids `0..256` are the single bytes, so every input is encodable; extra
/// entries follow in the order given. Used by the toy backend and by
/// model directories that ship a `greedy_vocab.json`.
#[derive(Debug, Clone)]
pub struct GreedyVocab {
    tokens: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, u32>,
    max_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct GreedyVocabFile {
    extra: Vec<String>,
}

impl GreedyVocab {
    pub fn new<I, S>(extra: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<Vec<u8>> = (0u8..=255).map(|b| vec![b]).collect();
        let mut index: HashMap<Vec<u8>, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for word in extra {
            let bytes = word.as_ref().as_bytes().to_vec();
            if bytes.is_empty() || index.contains_key(&bytes) {
                continue;
            }
            index.insert(bytes.clone(), tokens.len() as u32);
            tokens.push(bytes);
        }
        let max_len = tokens.iter().map(Vec::len).max().unwrap_or(1);
        Self {
            tokens,
            index,
            max_len,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GreedyVocabFile = serde_json::from_str(text)?;
        Ok(Self::new(file.extra))
    }

    pub fn to_json(&self) -> Result<String> {
        let extra = self.tokens[256..]
            .iter()
            .map(|t| String::from_utf8_lossy(t).into_owned())
            .collect();
        Ok(serde_json::to_string(&GreedyVocabFile { extra })?)
    }
}

impl Tokenizer for GreedyVocab {
    fn encode(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut ids = Vec::new();
        let mut at = 0;
        while at < bytes.len() {
            let longest = (1..=self.max_len.min(bytes.len() - at))
                .rev()
                .find_map(|len| self.index.get(&bytes[at..at + len]).map(|&id| (id, len)));
            // single bytes are always present
            let (id, len) = longest.unwrap_or((bytes[at] as u32, 1));
            ids.push(id);
            at += len;
        }
        ids
    }

    fn token_bytes(&self, id: u32) -> Option<Vec<u8>> {
        self.tokens.get(id as usize).cloned()
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_prefers_longest_match() {
        let vocab = GreedyVocab::new(["Label", "Label:", " Paris"]);
        let ids = vocab.encode("Label: Paris");
        assert_eq!(ids.len(), 2);
        assert_eq!(vocab.decode(&ids).unwrap(), "Label: Paris");
        assert_eq!(vocab.vocab_size(), 259);
    }

    #[test]
    fn greedy_json_round_trip() {
        let vocab = GreedyVocab::new(["alpha", " beta"]);
        let again = GreedyVocab::from_json(&vocab.to_json().unwrap()).unwrap();
        assert_eq!(again.encode("alpha beta"), vocab.encode("alpha beta"));
    }

    #[test]
    fn gpt2_label_marker_is_stable() {
        let bpe = Gpt2Bpe::new().unwrap();
        let a = bpe.encode("Label:");
        assert_eq!(a, bpe.encode("Label:"));
        assert_eq!(bpe.decode(&a).unwrap(), "Label:");
        assert!(bpe.token_bytes(50_257).is_none());
    }

    #[test]
    fn byte_spans_tile_the_text() {
        let bpe = Gpt2Bpe::new().unwrap();
        let text = "Word: Brasília\nLabel: ";
        let ids = bpe.encode(text);
        let spans = bpe.byte_spans(&ids).unwrap();
        assert_eq!(spans.first().unwrap().start, 0);
        assert_eq!(spans.last().unwrap().end, text.len());
        assert!(spans.windows(2).all(|w| w[0].end == w[1].start));
    }
}
