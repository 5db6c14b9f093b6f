//! Causal language model backend.
//!
//! [`LanguageModel`] is the uniform surface the analyses use: tokenization,
//! a capturing forward pass, the unembedding head and the final norm that
//! precedes it. [`Gpt2Model`] implements it for GPT-2 family checkpoints
//! stored as safetensors, plus a seeded toy configuration for tests.

mod gpt2;
mod linalg;
mod tokenizer;
pub mod trace;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use gpt2::{Block, Gpt2Config, Gpt2Model, Gpt2Weights};
pub use linalg::LayerNorm;
pub use tokenizer::{GreedyVocab, Gpt2Bpe, Tokenizer};

use crate::error::{Error, Result};

/// Model pinned for desk-scale runs when no `--model` is given.
pub const REFERENCE_MODEL: &str = "gpt2-xl";

/// Environment variable naming the directory that holds model folders.
pub const MODEL_CACHE_ENV: &str = "ICLSCOPE_MODEL_CACHE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHandle {
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    pub surface: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn last_index(&self) -> Option<usize> {
        self.token_ids.len().checked_sub(1)
    }
}

/// Which positions (and, optionally, which layers' attention rows) a
/// forward pass should record. Layers are numbered `1..=num_layers`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaptureRequest {
    pub positions: BTreeSet<usize>,
    pub want_attention_layers: BTreeSet<usize>,
}

impl CaptureRequest {
    pub fn at<I: IntoIterator<Item = usize>>(positions: I) -> Self {
        Self {
            positions: positions.into_iter().collect(),
            want_attention_layers: BTreeSet::new(),
        }
    }

    pub fn with_attention<I: IntoIterator<Item = usize>>(mut self, layers: I) -> Self {
        self.want_attention_layers.extend(layers);
        self
    }
}

/// Output of one capturing forward pass.
///
/// `hidden` is keyed by `(layer, position)` with layers `1..=num_layers`
/// holding post-block residual states (before the final norm).
/// `attention_rows` is keyed by `(layer, query_position)` and holds the
/// head-averaged attention distribution over all prompt positions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CaptureResult {
    pub num_layers: usize,
    pub seq_len: usize,
    pub hidden: BTreeMap<(usize, usize), Vec<f32>>,
    pub attention_rows: BTreeMap<(usize, usize), Vec<f32>>,
    pub final_logits: Vec<f32>,
}

impl CaptureResult {
    pub fn positions(&self) -> BTreeSet<usize> {
        self.hidden.keys().map(|&(_, p)| p).collect()
    }

    pub fn hidden_at(&self, layer: usize, position: usize) -> Option<&[f32]> {
        self.hidden.get(&(layer, position)).map(Vec::as_slice)
    }

    pub fn has_position(&self, position: usize) -> bool {
        (1..=self.num_layers).all(|l| self.hidden.contains_key(&(l, position)))
    }
}

/// Output head `E` with shape `(vocab_size, hidden_dim)`; shared, immutable.
#[derive(Debug, Clone, PartialEq)]
pub struct UnembeddingMatrix {
    values: Arc<Array2<f32>>,
}

impl UnembeddingMatrix {
    pub fn new(values: Arc<Array2<f32>>) -> Self {
        Self { values }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.values.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn shares_storage(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.values, &other.values)
    }
}

pub trait LanguageModel: Send + Sync {
    fn handle(&self) -> &ModelHandle;

    fn tokenizer(&self) -> &dyn Tokenizer;

    fn forward_capture(&self, prompt: &TokenSequence, req: &CaptureRequest)
        -> Result<CaptureResult>;

    /// The head actually used for next-token prediction.
    fn unembedding(&self) -> UnembeddingMatrix;

    /// Normalization applied to the last residual state before the head.
    fn final_norm(&self) -> Option<&LayerNorm>;

    /// Row of the input embedding table.
    fn token_embedding(&self, id: u32) -> Result<Vec<f32>>;

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        if text.is_empty() {
            return Err(Error::EmptyInput("text to tokenize"));
        }
        Ok(TokenSequence {
            token_ids: self.tokenizer().encode(text),
            surface: text.to_string(),
        })
    }

    fn detokenize(&self, ids: &[u32]) -> Result<TokenSequence> {
        Ok(TokenSequence {
            token_ids: ids.to_vec(),
            surface: self.tokenizer().decode(ids)?,
        })
    }
}

/// Directory that holds model folders: `$ICLSCOPE_MODEL_CACHE`, else
/// `$HOME/.cache/iclscope/models`.
pub fn model_cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(MODEL_CACHE_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").unwrap_or_else(|| ".".into());
    PathBuf::from(home).join(".cache/iclscope/models")
}

/// Where `model_id` would be loaded from, without touching the filesystem
/// beyond an existence check for literal paths.
pub fn resolve_model_dir(model_id: &str) -> PathBuf {
    let literal = Path::new(model_id);
    if literal.is_dir() {
        return literal.to_path_buf();
    }
    model_cache_dir().join(model_id)
}

/// Opens a model by id.
///
/// `toy` and `toy:<seed>` build the seeded toy GPT-2; anything else is a
/// model directory (literal path, or a folder under [`model_cache_dir`]).
pub fn load_model(model_id: &str) -> Result<Box<dyn LanguageModel>> {
    if model_id == "toy" {
        return Ok(Box::new(Gpt2Model::toy(0)));
    }
    if let Some(seed) = model_id.strip_prefix("toy:") {
        let seed = seed
            .parse()
            .map_err(|_| Error::UnknownModel(format!("bad toy seed in {model_id:?}")))?;
        return Ok(Box::new(Gpt2Model::toy(seed)));
    }
    let dir = resolve_model_dir(model_id);
    if !dir.is_dir() {
        return Err(Error::UnknownModel(format!(
            "{model_id}: no model directory at {} (set {MODEL_CACHE_ENV} or pass a path)",
            dir.display()
        )));
    }
    Ok(Box::new(Gpt2Model::load_dir(&dir, model_id)?))
}
