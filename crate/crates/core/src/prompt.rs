//! Demonstration construction and rendering.
//!
//! Every builder is a pure function of its inputs and seed. Rendering is
//! fixed byte for byte:
//!
//! ```text
//! [<instruction>\n]
//! <input_marker> <input>\n<label_marker> <label>\n      (per demo)
//! <input_marker> <test input>\n<label_marker> 
//! ```
//!
//! The prompt ends with the label marker and one trailing space.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{TokenSequence, Tokenizer};
use crate::error::{Error, Result};
use crate::similarity::{DissimilarityFilter, Embedder};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    #[serde(rename = "input")]
    pub input_text: String,
    #[serde(rename = "label")]
    pub label_text: String,
}

impl Example {
    pub fn new(input: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            input_text: input.into(),
            label_text: label.into(),
        }
    }
}

/// Ordered set of admissible labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    /// Rejects empty or duplicated labels. A singleton space is allowed
    /// here (constant relabeling); datasets require at least two labels.
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::LabelSpace("empty label space".into()));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if l.is_empty() {
                return Err(Error::LabelSpace("empty label".into()));
            }
            if !seen.insert(l.as_str()) {
                return Err(Error::LabelSpace(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels })
    }

    /// Distinct labels in first-seen order.
    pub fn infer<'a, I: IntoIterator<Item = &'a Example>>(examples: I) -> Result<Self> {
        let mut seen = HashSet::new();
        let labels: Vec<String> = examples
            .into_iter()
            .filter(|e| seen.insert(e.label_text.clone()))
            .map(|e| e.label_text.clone())
            .collect();
        Self::new(labels)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(s: LabelSpace) -> Self {
        s.labels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Markers {
    pub input: String,
    pub label: String,
}

impl Markers {
    pub fn new(input: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            label: label.into(),
        }
    }

    /// "Sentence:" / "Label:"
    pub fn sentence() -> Self {
        Self::new("Sentence:", "Label:")
    }

    /// "Word:" / "Label:"
    pub fn word() -> Self {
        Self::new("Word:", "Label:")
    }

    /// "Question:" / "Label:"
    pub fn question() -> Self {
        Self::new("Question:", "Label:")
    }

    fn validate(&self) -> Result<()> {
        for m in [&self.input, &self.label] {
            if m.is_empty() || m.contains('\n') || m.starts_with(char::is_whitespace) {
                return Err(Error::InvalidPrompt(format!("bad marker {m:?}")));
            }
        }
        if self.input.contains(&self.label) || self.label.contains(&self.input) {
            return Err(Error::InvalidPrompt("markers must not contain each other".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    #[serde(default)]
    pub instruction: Option<String>,
    pub demos: Vec<Example>,
    pub markers: Markers,
    pub test_input: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Byte spans of the payload fields inside a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub demo_labels: Vec<Range<usize>>,
    pub test_input: Range<usize>,
}

impl PromptSpec {
    pub fn new(markers: Markers, demos: Vec<Example>, test_input: impl Into<String>) -> Self {
        Self {
            instruction: None,
            demos,
            markers,
            test_input: test_input.into(),
            seed: None,
        }
    }

    pub fn k(&self) -> usize {
        self.demos.len()
    }

    /// Markers are valid, payloads are non-empty, single-line and free of
    /// marker strings.
    pub fn validate(&self) -> Result<()> {
        self.markers.validate()?;
        if self.test_input.is_empty() {
            return Err(Error::EmptyInput("test input"));
        }
        let check = |what: &str, text: &str, single_line: bool| -> Result<()> {
            if text.is_empty() {
                return Err(Error::InvalidPrompt(format!("empty {what}")));
            }
            if single_line && text.contains('\n') {
                return Err(Error::InvalidPrompt(format!("{what} contains a newline: {text:?}")));
            }
            if text.contains(&self.markers.input) || text.contains(&self.markers.label) {
                return Err(Error::InvalidPrompt(format!("{what} contains a marker: {text:?}")));
            }
            Ok(())
        };
        if let Some(instr) = &self.instruction {
            check("instruction", instr, false)?;
        }
        for d in &self.demos {
            check("demo input", &d.input_text, true)?;
            check("demo label", &d.label_text, true)?;
        }
        check("test input", &self.test_input, true)
    }

    pub fn render_with_spans(&self) -> Result<RenderedPrompt> {
        self.validate()?;
        let m = &self.markers;
        let mut text = String::new();
        if let Some(instr) = &self.instruction {
            text.push_str(instr);
            text.push('\n');
        }
        let mut demo_labels = Vec::with_capacity(self.demos.len());
        for d in &self.demos {
            text.push_str(&format!("{} {}\n{} ", m.input, d.input_text, m.label));
            let start = text.len();
            text.push_str(&d.label_text);
            demo_labels.push(start..text.len());
            text.push('\n');
        }
        text.push_str(&m.input);
        text.push(' ');
        let start = text.len();
        text.push_str(&self.test_input);
        let test_input = start..text.len();
        text.push('\n');
        text.push_str(&m.label);
        text.push(' ');
        Ok(RenderedPrompt {
            text,
            demo_labels,
            test_input,
        })
    }

    pub fn render(&self) -> Result<String> {
        Ok(self.render_with_spans()?.text)
    }
}

/// Inverse of [`PromptSpec::render`] for marker-free payloads.
pub fn parse_back(text: &str, markers: &Markers) -> Result<PromptSpec> {
    let bad = |why: &str| Error::InvalidPrompt(format!("cannot parse prompt: {why}"));
    let input_tag = format!("{} ", markers.input);
    let label_tag = format!("{} ", markers.label);
    let body = text
        .strip_suffix(&label_tag)
        .ok_or_else(|| bad("missing trailing label marker"))?
        .strip_suffix('\n')
        .ok_or_else(|| bad("missing newline before final label marker"))?;

    let (instruction, blocks) = if body.starts_with(&input_tag) {
        (None, body)
    } else {
        let sep = format!("\n{input_tag}");
        let at = body.find(&sep).ok_or_else(|| bad("no input marker"))?;
        (Some(body[..at].to_string()), &body[at + 1..])
    };

    let lines: Vec<&str> = blocks.split('\n').collect();
    let (test_line, demo_lines) = lines.split_last().ok_or_else(|| bad("empty body"))?;
    if demo_lines.len() % 2 != 0 {
        return Err(bad("unpaired demo lines"));
    }
    let field = |line: &str, tag: &str| -> Result<String> {
        line.strip_prefix(tag)
            .map(str::to_string)
            .ok_or_else(|| bad(&format!("expected {tag:?} at {line:?}")))
    };
    let demos = demo_lines
        .chunks(2)
        .map(|pair| Ok(Example::new(field(pair[0], &input_tag)?, field(pair[1], &label_tag)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptSpec {
        instruction,
        demos,
        markers: markers.clone(),
        test_input: field(test_line, &input_tag)?,
        seed: None,
    })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `k` demos drawn from `pool`, skipping anything too similar to the test
/// input (and the test input itself), in seeded order.
pub fn build_standard(
    pool: &[Example],
    test_input: &str,
    k: usize,
    seed: u64,
    markers: &Markers,
    filter: &DissimilarityFilter,
    embedder: Option<&dyn Embedder>,
) -> Result<PromptSpec> {
    if test_input.is_empty() {
        return Err(Error::EmptyInput("test input"));
    }
    let mut eligible = Vec::new();
    if k > 0 {
        for ex in pool {
            if ex.input_text != test_input && filter.admits(test_input, &ex.input_text, embedder)? {
                eligible.push(ex);
            }
        }
    }
    if eligible.len() < k {
        return Err(Error::InsufficientPool {
            needed: k,
            available: eligible.len(),
        });
    }
    let mut r = rng(seed);
    let demos: Vec<Example> = eligible.choose_multiple(&mut r, k).map(|&e| e.clone()).collect();
    let mut spec = PromptSpec::new(markers.clone(), demos, test_input);
    spec.seed = Some(seed);
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarMode {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarInsertion {
    pub spec: PromptSpec,
    pub label: String,
    pub position: usize,
}

/// Inserts the test input itself as a demonstration at a seeded slot.
pub fn insert_similar_test(
    spec: &PromptSpec,
    gold_label: &str,
    label_space: &LabelSpace,
    mode: SimilarMode,
    seed: u64,
) -> Result<SimilarInsertion> {
    let mut r = rng(seed);
    let label = match mode {
        SimilarMode::Correct => gold_label.to_string(),
        SimilarMode::Incorrect => {
            let others: Vec<&String> = label_space.labels().iter().filter(|l| *l != gold_label).collect();
            if others.is_empty() || label_space.len() < 2 {
                return Err(Error::LabelSpace(
                    "an incorrect label needs at least two labels".into(),
                ));
            }
            others.choose(&mut r).map(|l| l.to_string()).expect("non-empty")
        }
    };
    let position = r.random_range(0..=spec.demos.len());
    let mut out = spec.clone();
    out.demos
        .insert(position, Example::new(spec.test_input.clone(), label.clone()));
    Ok(SimilarInsertion {
        spec: out,
        label,
        position,
    })
}

/// Replaces every demo label with an independent uniform draw.
pub fn randomize_labels(spec: &PromptSpec, label_space: &LabelSpace, seed: u64) -> Result<PromptSpec> {
    if spec.demos.is_empty() {
        return Err(Error::InvalidPrompt("no demos to relabel".into()));
    }
    if label_space.is_empty() {
        return Err(Error::LabelSpace("empty label space".into()));
    }
    let mut r = rng(seed);
    let mut out = spec.clone();
    for d in &mut out.demos {
        d.label_text = label_space.labels()[r.random_range(0..label_space.len())].clone();
    }
    Ok(out)
}

/// One demo per label, so the demo labels are a seeded permutation of the
/// label space.
pub fn build_label_coverage(
    label_space: &LabelSpace,
    exemplars: &[Example],
    test_input: &str,
    markers: &Markers,
    seed: u64,
) -> Result<PromptSpec> {
    let mut by_label: BTreeMap<&str, &Example> = BTreeMap::new();
    for ex in exemplars {
        if !label_space.contains(&ex.label_text) {
            return Err(Error::LabelSpace(format!("{:?} is not in the label space", ex.label_text)));
        }
        if by_label.insert(&ex.label_text, ex).is_some() {
            return Err(Error::LabelSpace(format!("duplicate exemplar for {:?}", ex.label_text)));
        }
    }
    let mut demos = label_space
        .labels()
        .iter()
        .map(|l| {
            by_label
                .get(l.as_str())
                .map(|e| (*e).clone())
                .ok_or_else(|| Error::MissingExemplar(l.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    demos.shuffle(&mut rng(seed));
    let mut spec = PromptSpec::new(markers.clone(), demos, test_input);
    spec.seed = Some(seed);
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletCorpusEntry {
    #[serde(rename = "test")]
    pub test_sample: Example,
    pub semantic: Example,
    pub lexical: Example,
    pub baseline: Example,
}

impl TripletCorpusEntry {
    pub fn validate(&self) -> Result<()> {
        if self.semantic.label_text != self.test_sample.label_text {
            return Err(Error::Dataset(format!(
                "semantic example of {:?} carries a different label",
                self.test_sample.input_text
            )));
        }
        if self.lexical.label_text == self.test_sample.label_text {
            return Err(Error::Dataset(format!(
                "lexical example of {:?} carries the gold label",
                self.test_sample.input_text
            )));
        }
        Ok(())
    }
}

pub const LEXICAL_LABEL: &str = "l";
pub const SEMANTIC_LABEL: &str = "s";
pub const BASELINE_LABEL: &str = "b";

/// `repeats` copies each of the lexical, semantic and baseline examples
/// relabeled "l", "s", "b", shuffled by seed.
pub fn build_triplet_prompt(
    entry: &TripletCorpusEntry,
    repeats: usize,
    seed: u64,
    markers: &Markers,
) -> Result<PromptSpec> {
    if repeats < 1 {
        return Err(Error::OutOfRange("triplet repeats must be at least 1".into()));
    }
    entry.validate()?;
    let mut demos = Vec::with_capacity(3 * repeats);
    for (ex, tag) in [
        (&entry.lexical, LEXICAL_LABEL),
        (&entry.semantic, SEMANTIC_LABEL),
        (&entry.baseline, BASELINE_LABEL),
    ] {
        demos.extend(std::iter::repeat_n(Example::new(ex.input_text.clone(), tag), repeats));
    }
    demos.shuffle(&mut rng(seed));
    let mut spec = PromptSpec::new(markers.clone(), demos, entry.test_sample.input_text.clone());
    spec.seed = Some(seed);
    Ok(spec)
}

/// Sets (or replaces) the instruction line.
pub fn prepend_instruction(spec: &PromptSpec, instruction: &str) -> Result<PromptSpec> {
    if instruction.trim().is_empty() {
        return Err(Error::EmptyInput("instruction"));
    }
    let mut out = spec.clone();
    out.instruction = Some(instruction.to_string());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPositions {
    /// Index of each demo label's final sub-token, in demo order.
    pub demo_labels: Vec<usize>,
    /// Last prompt token, where the next label is predicted.
    pub query: usize,
}

impl LabelPositions {
    pub fn all(&self) -> Vec<usize> {
        let mut v = self.demo_labels.clone();
        v.push(self.query);
        v
    }
}

/// Maps the rendered label spans of `spec` onto `tokens`.
pub fn locate_label_positions(
    spec: &PromptSpec,
    tokens: &TokenSequence,
    tokenizer: &dyn Tokenizer,
) -> Result<LabelPositions> {
    let rendered = spec.render_with_spans()?;
    let decoded = tokenizer.decode_bytes(&tokens.token_ids)?;
    if decoded != rendered.text.as_bytes() {
        return Err(Error::MarkerNotFound {
            marker: spec.markers.label.clone(),
        });
    }
    let spans = tokenizer.byte_spans(&tokens.token_ids)?;
    let token_at = |byte: usize| -> Result<usize> {
        spans
            .iter()
            .position(|s| s.start <= byte && byte < s.end)
            .ok_or_else(|| Error::MarkerNotFound {
                marker: spec.markers.label.clone(),
            })
    };
    let demo_labels = rendered
        .demo_labels
        .iter()
        .map(|span| token_at(span.end - 1))
        .collect::<Result<Vec<_>>>()?;
    let query = tokens.last_index().ok_or(Error::EmptyInput("prompt tokens"))?;
    Ok(LabelPositions { demo_labels, query })
}

/// Token positions covering `span` (any overlap), in order.
pub fn tokens_in_span(
    tokens: &TokenSequence,
    tokenizer: &dyn Tokenizer,
    span: Range<usize>,
) -> Result<Vec<usize>> {
    let spans = tokenizer.byte_spans(&tokens.token_ids)?;
    Ok(spans
        .iter()
        .enumerate()
        .filter(|(_, s)| s.start < span.end && span.start < s.end)
        .map(|(i, _)| i)
        .collect())
}
