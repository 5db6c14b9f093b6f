//! Summary and per-sample report types. The summary schema is the set of
//! types below; unknown fields are rejected on read.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ExperimentKind};
use crate::coordinate::QuadrantReport;
use crate::error::Result;
use crate::evaluator::{LsbProportions, MeanStd, PositionalHistogram};
use crate::lens::ProfileRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub toolkit_version: String,
    pub model_id: String,
    pub dataset: Option<String>,
    pub seeds: Vec<u64>,
    /// True when the numbers depend on the model's learned behavior rather
    /// than on the toolkit's algorithms alone.
    pub model_behavioral: bool,
    pub samples: usize,
    pub config: ExperimentConfig,
    pub metrics: Metrics,
    pub files: Vec<String>,
}

impl ExperimentReport {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionAccuracy {
    pub condition: String,
    pub accuracy: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotPoint {
    pub shots: usize,
    pub instruction: bool,
    pub accuracy: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionCase {
    pub prompt_without: String,
    pub prompt_with: String,
    pub without: Vec<ProfileRecord>,
    pub with: Vec<ProfileRecord>,
    pub pir_without: f64,
    pub pir_with: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCurve {
    pub target: String,
    pub token_id: u32,
    /// Token positions of the final label sentence.
    pub positions: Vec<usize>,
    pub tokens: Vec<String>,
    pub pir: Vec<f64>,
    pub peak_layers: Vec<usize>,
    /// Index into `positions` of the highest PIR (earliest on ties).
    pub argmax_index: usize,
    pub argmax_position: usize,
    pub argmax_token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PirSample {
    pub sample: usize,
    pub seed: u64,
    pub pir: f64,
    pub peak_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PirRun {
    pub task_word: String,
    pub k: usize,
    pub irrelevant_labels: Option<Vec<String>>,
    pub samples: Vec<PirSample>,
    pub mean_pir: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Metrics {
    Q1 {
        k: usize,
        conditions: Vec<ConditionAccuracy>,
    },
    Q2Shots {
        points: Vec<ShotPoint>,
    },
    Q2RandomLabels {
        k: usize,
        correct: MeanStd,
        random: MeanStd,
    },
    Q3Position {
        k: usize,
        histogram: PositionalHistogram,
        shares: Vec<f64>,
        other_share: f64,
        per_seed: Vec<PositionalHistogram>,
    },
    Q4Copy {
        k: usize,
        copy_rate: MeanStd,
        uniform_baseline: f64,
        ratio: f64,
    },
    Triplets {
        repeats: usize,
        proportions: LsbProportions,
        per_seed: Vec<LsbProportions>,
    },
    Instruction {
        case_study: InstructionCase,
        accuracy_without: Option<MeanStd>,
        accuracy_with: Option<MeanStd>,
    },
    GenerationSweep {
        curves: Vec<SweepCurve>,
    },
    Diagnose {
        reports: Vec<QuadrantReport>,
    },
    Pir {
        run: PirRun,
    },
}

/// One CSV row per evaluated prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub condition: String,
    pub sample: usize,
    pub seed: Option<u64>,
    pub prediction_id: Option<u32>,
    pub prediction: String,
    pub gold: String,
    pub correct: Option<bool>,
    pub value: Option<f64>,
}

pub fn write_rows(path: &Path, rows: &[SampleRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<SampleRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}
