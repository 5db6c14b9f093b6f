//! Outcome metrics: whole-vocabulary argmax accuracy, copy rate, positional
//! preference and the l/s/b tally.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{CaptureRequest, LanguageModel, Tokenizer};
use crate::error::{Error, Result};
use crate::prompt::{PromptSpec, BASELINE_LABEL, LEXICAL_LABEL, SEMANTIC_LABEL};

/// Seeds used when none are configured.
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Anything that maps a rendered prompt to next-token logits.
pub trait Scorer: Send + Sync {
    fn tokenizer(&self) -> &dyn Tokenizer;
    fn logits(&self, prompt: &str) -> Result<Vec<f32>>;
}

impl<M: LanguageModel + ?Sized> Scorer for M {
    fn tokenizer(&self) -> &dyn Tokenizer {
        LanguageModel::tokenizer(self)
    }

    fn logits(&self, prompt: &str) -> Result<Vec<f32>> {
        let tokens = self.tokenize(prompt)?;
        Ok(self.forward_capture(&tokens, &CaptureRequest::default())?.final_logits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub top_token_id: u32,
    pub top_token_text: String,
    pub logit: f32,
}

/// Index of the largest logit; ties go to the lowest id, NaNs never win.
pub fn argmax(logits: &[f32]) -> Result<(u32, f32)> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, v)| (i as u32, v)).ok_or(Error::EmptyInput("logits"))
}

pub fn prediction_from_logits(logits: &[f32], tokenizer: &dyn Tokenizer) -> Result<Prediction> {
    let (id, logit) = argmax(logits)?;
    Ok(Prediction {
        top_token_id: id,
        top_token_text: tokenizer.decode(&[id])?,
        logit,
    })
}

pub fn predict<S: Scorer + ?Sized>(spec: &PromptSpec, scorer: &S) -> Result<Prediction> {
    let logits = scorer.logits(&spec.render()?)?;
    prediction_from_logits(&logits, scorer.tokenizer())
}

/// First sub-token of a label as it follows the prompt's trailing space.
pub fn label_token(tokenizer: &dyn Tokenizer, label: &str) -> Result<u32> {
    tokenizer
        .encode(label)
        .first()
        .copied()
        .ok_or(Error::EmptyInput("label"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub stdev: f64,
}

impl MeanStd {
    pub fn from_values(per_seed: Vec<f64>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::EmptyInput("seed list"));
        }
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let stdev = if per_seed.len() > 1 {
            (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Self { per_seed, mean, stdev })
    }
}

/// One evaluated prompt, as written to per-sample CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample: usize,
    pub seed: u64,
    pub condition: String,
    pub prediction_id: u32,
    pub prediction: String,
    pub gold: String,
    pub gold_id: u32,
    pub correct: bool,
}

/// Fraction of `predictions` equal to the matching `golds` entry.
pub fn accuracy_of(predictions: &[u32], golds: &[u32]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// A labelled prompt to score: the spec to render and its gold label.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub spec: PromptSpec,
    pub gold: String,
}

/// Accuracy per seed. `build(sample, seed)` yields the trial for each
/// sample index in `0..n_samples`.
pub fn accuracy<S, F>(
    scorer: &S,
    n_samples: usize,
    seeds: &[u64],
    condition: &str,
    mut build: F,
) -> Result<(MeanStd, Vec<SampleRecord>)>
where
    S: Scorer + ?Sized,
    F: FnMut(usize, u64) -> Result<Trial>,
{
    if n_samples == 0 {
        return Err(Error::EmptyInput("dataset"));
    }
    let tok = scorer.tokenizer();
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut records = Vec::new();
    for &seed in seeds {
        let mut preds = Vec::with_capacity(n_samples);
        let mut golds = Vec::with_capacity(n_samples);
        for sample in 0..n_samples {
            let annotate = |e: Error| Error::Sample {
                experiment: condition.to_string(),
                sample,
                source: Box::new(e),
            };
            let trial = build(sample, seed).map_err(annotate)?;
            let p = predict(&trial.spec, scorer).map_err(annotate)?;
            let gold_id = label_token(tok, &trial.gold).map_err(annotate)?;
            records.push(SampleRecord {
                sample,
                seed,
                condition: condition.to_string(),
                prediction_id: p.top_token_id,
                prediction: p.top_token_text.clone(),
                gold: trial.gold,
                gold_id,
                correct: p.top_token_id == gold_id,
            });
            preds.push(p.top_token_id);
            golds.push(gold_id);
        }
        per_seed.push(accuracy_of(&preds, &golds)?);
    }
    Ok((MeanStd::from_values(per_seed)?, records))
}

/// Fraction of predictions equal to the incorrect label assigned to each
/// sample; `None` marks a missing assignment.
pub fn copy_rate_of(predictions: &[u32], assigned: &[Option<u32>]) -> Result<f64> {
    if predictions.len() != assigned.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} assignments",
            predictions.len(),
            assigned.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let mut hits = 0usize;
    for (i, (p, a)) in predictions.iter().zip(assigned).enumerate() {
        let a = a.ok_or(Error::MissingAssignment(i))?;
        hits += usize::from(*p == a);
    }
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalHistogram {
    pub counts: BTreeMap<usize, usize>,
    pub other_count: usize,
}

impl PositionalHistogram {
    /// Bins `prediction` at the first demo position whose label token it
    /// equals, else in `other_count`.
    pub fn record(&mut self, prediction: u32, demo_label_tokens: &[u32]) -> Option<usize> {
        match demo_label_tokens.iter().position(|&t| t == prediction) {
            Some(pos) => {
                *self.counts.entry(pos).or_insert(0) += 1;
                Some(pos)
            }
            None => {
                self.other_count += 1;
                None
            }
        }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum::<usize>() + self.other_count
    }

    pub fn count_at(&self, position: usize) -> usize {
        self.counts.get(&position).copied().unwrap_or(0)
    }

    /// Share of all samples predicted at `position`.
    pub fn share(&self, position: usize) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.count_at(position) as f64 / t as f64,
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for (&k, &v) in &other.counts {
            *self.counts.entry(k).or_insert(0) += v;
        }
        self.other_count += other.other_count;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LsbProportions {
    pub l: f64,
    pub s: f64,
    pub b: f64,
    pub others: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LsbTally {
    pub l: usize,
    pub s: usize,
    pub b: usize,
    pub others: usize,
}

impl LsbTally {
    pub fn record(&mut self, prediction: u32, tokens: &LsbTokens) {
        if prediction == tokens.l {
            self.l += 1;
        } else if prediction == tokens.s {
            self.s += 1;
        } else if prediction == tokens.b {
            self.b += 1;
        } else {
            self.others += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.l + self.s + self.b + self.others
    }

    pub fn proportions(&self) -> Result<LsbProportions> {
        let t = self.total();
        if t == 0 {
            return Err(Error::EmptyInput("triplet corpus"));
        }
        let t = t as f64;
        Ok(LsbProportions {
            l: self.l as f64 / t,
            s: self.s as f64 / t,
            b: self.b as f64 / t,
            others: self.others as f64 / t,
        })
    }
}

/// Token ids of the three triplet labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LsbTokens {
    pub l: u32,
    pub s: u32,
    pub b: u32,
}

impl LsbTokens {
    pub fn resolve(tokenizer: &dyn Tokenizer) -> Result<Self> {
        Ok(Self {
            l: label_token(tokenizer, LEXICAL_LABEL)?,
            s: label_token(tokenizer, SEMANTIC_LABEL)?,
            b: label_token(tokenizer, BASELINE_LABEL)?,
        })
    }
}
