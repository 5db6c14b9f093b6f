//! Lexical and semantic similarity between demonstrations and the test input.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::backend::LanguageModel;
use crate::error::{Error, Result};
use crate::prompt::PromptSpec;

/// Lowercased whitespace tokens with trailing punctuation removed.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_end_matches(|c: char| c.is_ascii_punctuation() || is_unicode_punct(c)))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '。' | '，' | '！' | '？' | '…' | '”' | '’' | '»')
}

fn bag(text: &str) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for w in words(text) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Multiset Jaccard index over [`words`]: sum of minimum counts over sum of
/// maximum counts. Two texts with no words score 1 if equal, else 0.
pub fn lexical_similarity(a: &str, b: &str) -> f64 {
    let (ba, bb) = (bag(a), bag(b));
    if ba.is_empty() && bb.is_empty() {
        return if a == b { 1.0 } else { 0.0 };
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (w, &ca) in &ba {
        let cb = bb.get(w).copied().unwrap_or(0);
        inter += ca.min(cb);
        union += ca.max(cb);
    }
    union += bb.iter().filter(|(w, _)| !ba.contains_key(*w)).map(|(_, c)| c).sum::<usize>();
    inter as f64 / union as f64
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
}

/// Mean of the model's input-embedding rows over the tokens of a text,
/// minus the mean row of the whole vocabulary. Centering removes the shared
/// direction that makes raw pooled embeddings of unrelated texts look alike.
pub struct MeanEmbedder<'a> {
    model: &'a dyn LanguageModel,
    centroid: OnceLock<Result<Vec<f64>>>,
}

impl<'a> MeanEmbedder<'a> {
    pub fn new(model: &'a dyn LanguageModel) -> Self {
        Self {
            model,
            centroid: OnceLock::new(),
        }
    }

    fn centroid(&self) -> Result<&[f64]> {
        let c = self.centroid.get_or_init(|| {
            let vocab = self.model.handle().vocab_size;
            let mut acc = vec![0f64; self.model.handle().hidden_dim];
            for id in 0..vocab {
                for (a, v) in acc.iter_mut().zip(self.model.token_embedding(id as u32)?) {
                    *a += v as f64;
                }
            }
            acc.iter_mut().for_each(|a| *a /= vocab.max(1) as f64);
            Ok(acc)
        });
        match c {
            Ok(v) => Ok(v),
            Err(e) => Err(Error::ShapeMismatch(format!("embedding centroid: {e}"))),
        }
    }
}

impl Embedder for MeanEmbedder<'_> {
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let tokens = self.model.tokenize(text)?;
        let mut acc = vec![0f64; self.model.handle().hidden_dim];
        for &id in &tokens.token_ids {
            for (a, v) in acc.iter_mut().zip(self.model.token_embedding(id)?) {
                *a += v as f64;
            }
        }
        let n = tokens.len() as f64;
        Ok(acc
            .into_iter()
            .zip(self.centroid()?)
            .map(|(a, c)| (a / n - c) as f32)
            .collect())
    }
}

/// Cosine similarity; zero vectors score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("cosine of {} vs {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn semantic_similarity(a: &str, b: &str, embedder: &dyn Embedder) -> Result<f64> {
    cosine(&embedder.embed(a)?, &embedder.embed(b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityScore {
    pub lexical: f64,
    /// Absent when no embedder was supplied.
    pub semantic: Option<f64>,
    pub combined: f64,
}

impl SimilarityScore {
    pub fn new(lexical: f64, semantic: Option<f64>) -> Self {
        Self {
            lexical,
            semantic,
            combined: combine(lexical, semantic),
        }
    }
}

/// `max(lexical, clamp(semantic, 0, 1))`.
pub fn combine(lexical: f64, semantic: Option<f64>) -> f64 {
    let s = semantic.map_or(0.0, |s| s.clamp(0.0, 1.0));
    lexical.max(s)
}

pub fn score(a: &str, b: &str, embedder: Option<&dyn Embedder>) -> Result<SimilarityScore> {
    let semantic = embedder.map(|e| semantic_similarity(a, b, e)).transpose()?;
    Ok(SimilarityScore::new(lexical_similarity(a, b), semantic))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSimilarity {
    pub scores: Vec<SimilarityScore>,
    pub prompt_max: f64,
}

/// Similarity of every demo input to `test`; `prompt_max` is 0 for an empty
/// demo list.
pub fn demo_similarity(
    test: &str,
    spec: &PromptSpec,
    embedder: Option<&dyn Embedder>,
) -> Result<DemoSimilarity> {
    let test_vec = embedder.map(|e| e.embed(test)).transpose()?;
    let mut scores = Vec::with_capacity(spec.demos.len());
    for d in &spec.demos {
        let semantic = match (embedder, &test_vec) {
            (Some(e), Some(tv)) => Some(cosine(tv, &e.embed(&d.input_text)?)?),
            _ => None,
        };
        scores.push(SimilarityScore::new(lexical_similarity(test, &d.input_text), semantic));
    }
    let prompt_max = scores.iter().map(|s| s.combined).fold(0.0, f64::max);
    Ok(DemoSimilarity { scores, prompt_max })
}

/// Admits a candidate demo only when it stays below both caps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityFilter {
    pub max_lexical: f64,
    pub max_semantic: f64,
}

impl Default for DissimilarityFilter {
    fn default() -> Self {
        Self {
            max_lexical: 0.2,
            max_semantic: 0.5,
        }
    }
}

impl DissimilarityFilter {
    pub fn admits(&self, test: &str, candidate: &str, embedder: Option<&dyn Embedder>) -> Result<bool> {
        if lexical_similarity(test, candidate) >= self.max_lexical {
            return Ok(false);
        }
        match embedder {
            Some(e) => Ok(semantic_similarity(test, candidate, e)? < self.max_semantic),
            None => Ok(true),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{Example, Markers};

    #[test]
    fn soundtrack_pair() {
        let s = lexical_similarity(
            "The soundtrack enriches the entire movie.",
            "The soundtrack diminishes the entire movie.",
        );
        assert!((s - 5.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn lexical_extremes() {
        assert_eq!(lexical_similarity("a b c", "a b c"), 1.0);
        assert_eq!(lexical_similarity("red apple", "blue sky"), 0.0);
        assert_eq!(lexical_similarity("Hello!", "hello"), 1.0);
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn combined_uses_clipped_semantic() {
        assert_eq!(combine(0.3, Some(-0.8)), 0.3);
        assert_eq!(combine(0.3, Some(0.9)), 0.9);
        assert_eq!(combine(0.3, Some(1.5)), 1.0);
        assert_eq!(combine(0.3, None), 0.3);
    }

    #[test]
    fn prompt_max_conventions() {
        let empty = PromptSpec::new(Markers::word(), vec![], "Italy");
        assert_eq!(demo_similarity("Italy", &empty, None).unwrap().prompt_max, 0.0);
        let with_test = PromptSpec::new(
            Markers::word(),
            vec![Example::new("France", "Paris"), Example::new("Italy", "Rome")],
            "Italy",
        );
        assert_eq!(demo_similarity("Italy", &with_test, None).unwrap().prompt_max, 1.0);
    }

    #[test]
    fn filter_rejects_overlap() {
        let f = DissimilarityFilter::default();
        assert!(!f.admits("South Korea", "South Africa", None).unwrap());
        assert!(f.admits("Japan", "Canada", None).unwrap());
    }
}
