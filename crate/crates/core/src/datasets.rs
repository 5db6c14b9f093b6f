//! Built-in corpora and JSON-lines loaders.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::Tokenizer;
use crate::error::{Error, Result};
use crate::lens::{SubTokenPolicy, TaskToken};
use crate::prompt::{Example, LabelSpace, Markers, PromptSpec, TripletCorpusEntry};

pub const CAPITALS_JSONL: &str = include_str!("../resources/capitals.jsonl");
pub const COLORS_JSONL: &str = include_str!("../resources/colors.jsonl");
pub const TRIPLETS_SST2_JSONL: &str = include_str!("../resources/triplets-sst2.jsonl");
pub const TRIPLETS_EMO_JSONL: &str = include_str!("../resources/triplets-emo.jsonl");
pub const TRIPLETS_TREC_JSONL: &str = include_str!("../resources/triplets-trec.jsonl");
pub const TRIPLETS_HATE_JSONL: &str = include_str!("../resources/triplets-hate.jsonl");
pub const SVO_TRANSLATION_JSON: &str = include_str!("../resources/svo-translation.json");

pub const CAPITALS_INSTRUCTION: &str = "Please identify the capital city for the given country.";
pub const COLORS_INSTRUCTION: &str = "Please identify the color of the given object.";
pub const SST2_INSTRUCTION: &str = "The task involves classifying sentences based on their expressed sentiment. Please classify each given sentence into one of the following sentiment labels: positive or negative.";
pub const TREC_INSTRUCTION: &str = "The task involves categorizing questions into specific categories based on their content. Please classify each given question into one of the following broad class labels: Abbreviation, Entity, Description, Human, Location, or Number.";
pub const EMO_INSTRUCTION: &str = "Please classify the given utterance into one of the following emotion classes: happy, sad, angry, or others.";

/// Every corpus the toolkit knows how to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Capitals,
    Colors,
    TripletsSst2,
    TripletsEmo,
    TripletsTrec,
    TripletsHate,
    /// User-supplied SST-2 export.
    Sst2,
    /// User-supplied TREC export.
    Trec,
    /// User-supplied emo export.
    Emo,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 9] = [
        DatasetKind::Capitals,
        DatasetKind::Colors,
        DatasetKind::TripletsSst2,
        DatasetKind::TripletsEmo,
        DatasetKind::TripletsTrec,
        DatasetKind::TripletsHate,
        DatasetKind::Sst2,
        DatasetKind::Trec,
        DatasetKind::Emo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Capitals => "capitals",
            DatasetKind::Colors => "colors",
            DatasetKind::TripletsSst2 => "triplets-sst2",
            DatasetKind::TripletsEmo => "triplets-emo",
            DatasetKind::TripletsTrec => "triplets-trec",
            DatasetKind::TripletsHate => "triplets-hate",
            DatasetKind::Sst2 => "sst2",
            DatasetKind::Trec => "trec",
            DatasetKind::Emo => "emo",
        }
    }

    /// Packaged corpus text, if the dataset ships with the crate.
    pub fn builtin_text(self) -> Option<&'static str> {
        match self {
            DatasetKind::Capitals => Some(CAPITALS_JSONL),
            DatasetKind::Colors => Some(COLORS_JSONL),
            DatasetKind::TripletsSst2 => Some(TRIPLETS_SST2_JSONL),
            DatasetKind::TripletsEmo => Some(TRIPLETS_EMO_JSONL),
            DatasetKind::TripletsTrec => Some(TRIPLETS_TREC_JSONL),
            DatasetKind::TripletsHate => Some(TRIPLETS_HATE_JSONL),
            DatasetKind::Sst2 | DatasetKind::Trec | DatasetKind::Emo => None,
        }
    }

    pub fn is_triplet(self) -> bool {
        matches!(
            self,
            DatasetKind::TripletsSst2 | DatasetKind::TripletsEmo | DatasetKind::TripletsTrec | DatasetKind::TripletsHate
        )
    }

    /// Word naming the task, read through the logit lens.
    pub fn task_word(self) -> &'static str {
        match self {
            DatasetKind::Capitals => "capital",
            DatasetKind::Colors => "color",
            DatasetKind::Sst2 | DatasetKind::TripletsSst2 => "positive",
            DatasetKind::Trec | DatasetKind::TripletsTrec => "question",
            DatasetKind::Emo | DatasetKind::TripletsEmo => "emotion",
            DatasetKind::TripletsHate => "hate",
        }
    }

    pub fn instruction(self) -> Option<&'static str> {
        match self {
            DatasetKind::Capitals => Some(CAPITALS_INSTRUCTION),
            DatasetKind::Colors => Some(COLORS_INSTRUCTION),
            DatasetKind::Sst2 | DatasetKind::TripletsSst2 => Some(SST2_INSTRUCTION),
            DatasetKind::Trec | DatasetKind::TripletsTrec => Some(TREC_INSTRUCTION),
            DatasetKind::Emo | DatasetKind::TripletsEmo => Some(EMO_INSTRUCTION),
            DatasetKind::TripletsHate => None,
        }
    }

    pub fn markers(self) -> Markers {
        match self {
            DatasetKind::Capitals | DatasetKind::Colors => Markers::word(),
            _ => Markers::sentence(),
        }
    }

    /// Required label-space size for user-supplied exports.
    pub fn expected_classes(self) -> Option<usize> {
        match self {
            DatasetKind::Sst2 => Some(2),
            DatasetKind::Trec => Some(6),
            DatasetKind::Emo => Some(4),
            _ => None,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown dataset {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub name: String,
    pub kind: DatasetKind,
    pub examples: Vec<Example>,
    pub label_space: LabelSpace,
    pub task_word: String,
    pub instruction: Option<String>,
    pub markers: Markers,
    /// Candidate demonstrations. Equal to `examples` except for triplet
    /// corpora, where it also holds every labelled neighbor sentence.
    pub pool: Vec<Example>,
    /// Present for triplet corpora; `examples` then holds their test samples.
    pub triplets: Option<Vec<TripletCorpusEntry>>,
}

impl DatasetBundle {
    pub fn task_token(&self, tokenizer: &dyn Tokenizer) -> Result<TaskToken> {
        TaskToken::resolve(tokenizer, &self.task_word, SubTokenPolicy::FirstSubtoken)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

}

fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str, path: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Record {
                path: path.to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn parse_examples(text: &str, path: &str) -> Result<Vec<Example>> {
    let examples: Vec<Example> = parse_jsonl(text, path)?;
    for (i, e) in examples.iter().enumerate() {
        if e.input_text.trim().is_empty() || e.label_text.trim().is_empty() {
            return Err(Error::Record {
                path: path.to_string(),
                line: i + 1,
                message: "empty input or label".into(),
            });
        }
    }
    Ok(examples)
}

pub fn parse_triplets(text: &str, path: &str) -> Result<Vec<TripletCorpusEntry>> {
    let entries: Vec<TripletCorpusEntry> = parse_jsonl(text, path)?;
    for (i, e) in entries.iter().enumerate() {
        e.validate().map_err(|err| Error::Record {
            path: path.to_string(),
            line: i + 1,
            message: err.to_string(),
        })?;
    }
    Ok(entries)
}

fn bundle(kind: DatasetKind, name: String, examples: Vec<Example>, triplets: Option<Vec<TripletCorpusEntry>>) -> Result<DatasetBundle> {
    if examples.is_empty() {
        return Err(Error::Dataset(format!("{name}: no records")));
    }
    let pool = match &triplets {
        None => examples.clone(),
        Some(entries) => {
            let mut seen = std::collections::HashSet::new();
            entries
                .iter()
                .flat_map(|e| [&e.test_sample, &e.semantic, &e.lexical, &e.baseline])
                .filter(|e| seen.insert(e.input_text.clone()))
                .cloned()
                .collect()
        }
    };
    let label_space = LabelSpace::infer(&pool)?;
    if let Some(n) = kind.expected_classes() {
        if label_space.len() != n {
            return Err(Error::Dataset(format!(
                "{name}: expected {n} classes, found {} ({:?})",
                label_space.len(),
                label_space.labels()
            )));
        }
    }
    Ok(DatasetBundle {
        name,
        kind,
        examples,
        label_space,
        task_word: kind.task_word().to_string(),
        instruction: kind.instruction().map(str::to_string),
        markers: kind.markers(),
        pool,
        triplets,
    })
}

/// Loads a built-in id (`capitals`, `triplets-trec`, ...) or a
/// `kind:path` pair such as `trec:/data/trec.jsonl`.
pub fn load_dataset(spec: &str) -> Result<DatasetBundle> {
    let (kind, path) = match spec.split_once(':') {
        Some((k, p)) => (k.parse::<DatasetKind>()?, Some(p)),
        None => (spec.parse::<DatasetKind>()?, None),
    };
    match path {
        Some(p) => load_dataset_file(kind, Path::new(p)),
        None => {
            let text = kind.builtin_text().ok_or_else(|| {
                Error::Dataset(format!("{kind} is not bundled; pass {kind}:<path to JSON-lines export>"))
            })?;
            load_from_text(kind, text, kind.name())
        }
    }
}

pub fn load_dataset_file(kind: DatasetKind, path: &Path) -> Result<DatasetBundle> {
    let text = std::fs::read_to_string(path)?;
    load_from_text(kind, &text, &path.display().to_string())
}

fn load_from_text(kind: DatasetKind, text: &str, origin: &str) -> Result<DatasetBundle> {
    if kind.is_triplet() {
        let entries = parse_triplets(text, origin)?;
        let examples = entries.iter().map(|e| e.test_sample.clone()).collect();
        bundle(kind, kind.name().to_string(), examples, Some(entries))
    } else {
        bundle(kind, kind.name().to_string(), parse_examples(text, origin)?, None)
    }
}

/// Translation prompt for the generation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvoCorpus {
    pub markers: Markers,
    pub demos: Vec<Example>,
    pub test_input: String,
    pub targets: Vec<String>,
}

impl SvoCorpus {
    pub fn builtin() -> Result<Self> {
        Ok(serde_json::from_str(SVO_TRANSLATION_JSON)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn spec(&self) -> PromptSpec {
        PromptSpec::new(self.markers.clone(), self.demos.clone(), self.test_input.clone())
    }
}
