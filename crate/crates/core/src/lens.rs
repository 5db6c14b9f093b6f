//! Logit-lens measurements: vocabulary ranks of a task word at every
//! layer, the peak inverse rank over layers, per-position sweeps and
//! attention reports.

use serde::{Deserialize, Serialize};

use crate::backend::{CaptureResult, LanguageModel, LayerNorm, Tokenizer, UnembeddingMatrix};
use crate::error::{Error, Result};
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubTokenPolicy {
    #[default]
    FirstSubtoken,
    LastSubtoken,
}

/// Vocabulary id standing in for a task word such as "capital".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskToken {
    pub surface: String,
    pub token_id: u32,
    pub sub_token_policy: SubTokenPolicy,
}

impl TaskToken {
    /// Resolves `surface` in its word-initial form: a leading space is
    /// added unless one is already present, since byte-level BPE encodes
    /// running-text words with their preceding space.
    pub fn resolve(tokenizer: &dyn Tokenizer, surface: &str, policy: SubTokenPolicy) -> Result<Self> {
        if surface.trim().is_empty() {
            return Err(Error::EmptyInput("task word"));
        }
        let text = if surface.starts_with(char::is_whitespace) {
            surface.to_string()
        } else {
            format!(" {surface}")
        };
        let ids = tokenizer.encode(&text);
        let token_id = match policy {
            SubTokenPolicy::FirstSubtoken => ids.first(),
            SubTokenPolicy::LastSubtoken => ids.last(),
        }
        .copied()
        .ok_or(Error::EmptyInput("task word"))?;
        Ok(Self {
            surface: surface.trim().to_string(),
            token_id,
            sub_token_policy: policy,
        })
    }
}

/// Final normalization followed by the unembedding head.
#[derive(Debug, Clone)]
pub struct LogitLens {
    unembedding: UnembeddingMatrix,
    final_norm: Option<LayerNorm>,
    exec: Exec,
}

impl LogitLens {
    pub fn new(unembedding: UnembeddingMatrix, final_norm: Option<LayerNorm>) -> Self {
        Self {
            unembedding,
            final_norm,
            exec: Exec::default(),
        }
    }

    pub fn for_model(model: &dyn LanguageModel) -> Self {
        Self::new(model.unembedding(), model.final_norm().cloned())
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.unembedding.vocab_size()
    }

    pub fn hidden_dim(&self) -> usize {
        self.unembedding.hidden_dim()
    }

    pub fn project(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        if hidden.len() != self.hidden_dim() {
            return Err(Error::ShapeMismatch(format!(
                "hidden state of width {} against an unembedding of width {}",
                hidden.len(),
                self.hidden_dim()
            )));
        }
        let normed;
        let x = match &self.final_norm {
            Some(norm) => {
                normed = norm.apply(hidden);
                &normed
            }
            None => hidden,
        };
        let e = self.unembedding.values();
        let mut logits = vec![0.0f32; e.nrows()];
        self.exec.fill_chunks(&mut logits, 4096, |start, chunk| {
            for (i, slot) in chunk.iter_mut().enumerate() {
                *slot = e.row(start + i).iter().zip(x).map(|(a, b)| a * b).sum();
            }
        });
        Ok(logits)
    }
}

/// `1 + |{j : logits[j] > logits[token_id]}|`. Ties never push the
/// target down.
pub fn rank_of(logits: &[f32], token_id: u32) -> Result<usize> {
    let target = *logits.get(token_id as usize).ok_or(Error::TokenOutOfRange {
        id: token_id as usize,
        vocab_size: logits.len(),
    })?;
    Ok(1 + logits.iter().filter(|&&v| v > target).count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankProfile {
    pub target: TaskToken,
    pub position: usize,
    /// `ranks[i]` is the rank at layer `i + 1`.
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PirValue {
    pub value: f64,
    /// 1-based layer attaining the peak; the earliest one on ties.
    pub peak_layer: usize,
}

/// Per-profile JSON record consumed by reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileRecord {
    pub target: String,
    pub token_id: u32,
    pub position: usize,
    pub ranks: Vec<usize>,
    pub pir: f64,
    pub peak_layer: usize,
}

impl RankProfile {
    pub fn record(&self) -> Result<ProfileRecord> {
        let p = pir(self)?;
        Ok(ProfileRecord {
            target: self.target.surface.clone(),
            token_id: self.target.token_id,
            position: self.position,
            ranks: self.ranks.clone(),
            pir: p.value,
            peak_layer: p.peak_layer,
        })
    }
}

pub fn pir_of_ranks(ranks: &[usize]) -> Result<PirValue> {
    let (idx, best) = ranks
        .iter()
        .enumerate()
        .min_by_key(|&(i, &r)| (r, i))
        .ok_or(Error::EmptyProfile)?;
    if *best == 0 {
        return Err(Error::OutOfRange("rank 0 in profile".into()));
    }
    Ok(PirValue {
        value: 1.0 / *best as f64,
        peak_layer: idx + 1,
    })
}

pub fn pir(profile: &RankProfile) -> Result<PirValue> {
    pir_of_ranks(&profile.ranks)
}

pub fn rank_profile(
    capture: &CaptureResult,
    lens: &LogitLens,
    position: usize,
    target: &TaskToken,
) -> Result<RankProfile> {
    if target.token_id as usize >= lens.vocab_size() {
        return Err(Error::TokenOutOfRange {
            id: target.token_id as usize,
            vocab_size: lens.vocab_size(),
        });
    }
    if !capture.has_position(position) || capture.num_layers == 0 {
        return Err(Error::MissingPosition(position));
    }
    let ranks = lens.exec.map_range(capture.num_layers, |i| {
        let hidden = capture
            .hidden_at(i + 1, position)
            .ok_or(Error::MissingPosition(position))?;
        rank_of(&lens.project(hidden)?, target.token_id)
    });
    Ok(RankProfile {
        target: target.clone(),
        position,
        ranks: ranks.into_iter().collect::<Result<_>>()?,
    })
}

pub fn sweep_profiles(
    capture: &CaptureResult,
    lens: &LogitLens,
    positions: &[usize],
    target: &TaskToken,
) -> Result<Vec<RankProfile>> {
    positions
        .iter()
        .map(|&p| rank_profile(capture, lens, p, target))
        .collect()
}

/// One PIR per position, in the order given.
pub fn pir_sweep(
    capture: &CaptureResult,
    lens: &LogitLens,
    positions: &[usize],
    target: &TaskToken,
) -> Result<Vec<PirValue>> {
    sweep_profiles(capture, lens, positions, target)?
        .iter()
        .map(pir)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub layer: usize,
    pub query_position: usize,
    pub scores: Vec<f32>,
    pub label_positions: Vec<usize>,
    /// Label position receiving the most attention (earliest on ties).
    pub label_argmax: Option<usize>,
}

pub fn attention_report(
    capture: &CaptureResult,
    layer: usize,
    query_position: usize,
    label_positions: &[usize],
) -> Result<AttentionRow> {
    let scores = capture
        .attention_rows
        .get(&(layer, query_position))
        .ok_or(Error::AttentionNotCaptured {
            layer,
            position: query_position,
        })?
        .clone();
    if let Some(&bad) = label_positions.iter().find(|&&p| p >= scores.len()) {
        return Err(Error::PositionOutOfRange {
            position: bad,
            len: scores.len(),
        });
    }
    let label_argmax = label_positions
        .iter()
        .copied()
        .fold(None, |best: Option<usize>, p| match best {
            Some(b) if scores[b] >= scores[p] => Some(b),
            _ => Some(p),
        });
    Ok(AttentionRow {
        layer,
        query_position,
        scores,
        label_positions: label_positions.to_vec(),
        label_argmax,
    })
}
