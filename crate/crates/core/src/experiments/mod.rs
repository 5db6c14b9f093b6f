//! Experiment driver: configuration, runners and report files.

mod plot;
pub mod report;
mod runs;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{load_model, LanguageModel, REFERENCE_MODEL};
use crate::coordinate::Thresholds;
use crate::error::{Error, Result};
use crate::evaluator::DEFAULT_SEEDS;
use crate::prompt::PromptSpec;
use crate::similarity::DissimilarityFilter;

pub use report::{ExperimentReport, Metrics, PirRun, PirSample, SampleRow};
pub use runs::{pir_run, prompt_seed, sweep_curves};

pub const SUMMARY_FILE: &str = "summary.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const FAILURE_FILE: &str = "failure.json";
pub const DEFAULT_SHOTS: [usize; 4] = [0, 1, 6, 12];
pub const DEFAULT_MAX_SAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Q1,
    Q2Shots,
    Q2RandomLabels,
    Q3Position,
    Q4Copy,
    Triplets,
    Instruction,
    GenerationSweep,
    Diagnose,
    Pir,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 10] = [
        ExperimentKind::Q1,
        ExperimentKind::Q2Shots,
        ExperimentKind::Q2RandomLabels,
        ExperimentKind::Q3Position,
        ExperimentKind::Q4Copy,
        ExperimentKind::Triplets,
        ExperimentKind::Instruction,
        ExperimentKind::GenerationSweep,
        ExperimentKind::Diagnose,
        ExperimentKind::Pir,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Q1 => "q1",
            ExperimentKind::Q2Shots => "q2_shots",
            ExperimentKind::Q2RandomLabels => "q2_random_labels",
            ExperimentKind::Q3Position => "q3_position",
            ExperimentKind::Q4Copy => "q4_copy",
            ExperimentKind::Triplets => "triplets",
            ExperimentKind::Instruction => "instruction",
            ExperimentKind::GenerationSweep => "generation_sweep",
            ExperimentKind::Diagnose => "diagnose",
            ExperimentKind::Pir => "pir",
        }
    }

    /// Dataset used when the config names none.
    pub fn default_dataset(self) -> Option<&'static str> {
        match self {
            ExperimentKind::Q1
            | ExperimentKind::Q2Shots
            | ExperimentKind::Q2RandomLabels
            | ExperimentKind::Diagnose
            | ExperimentKind::Pir => Some("capitals"),
            ExperimentKind::Q3Position => Some("triplets-emo"),
            ExperimentKind::Q4Copy | ExperimentKind::Instruction => Some("triplets-trec"),
            ExperimentKind::Triplets => Some("triplets-sst2"),
            ExperimentKind::GenerationSweep => None,
        }
    }

    /// Shot count when the config leaves `k` unset. Label-coverage runs use
    /// the label-space size instead.
    pub fn default_k(self) -> usize {
        match self {
            ExperimentKind::Q4Copy => 12,
            ExperimentKind::Instruction | ExperimentKind::Pir => 1,
            ExperimentKind::Triplets => 9,
            _ => 6,
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

fn default_model() -> String {
    REFERENCE_MODEL.to_string()
}

fn default_shots() -> Vec<usize> {
    DEFAULT_SHOTS.to_vec()
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("iclscope-out")
}

fn default_max_samples() -> usize {
    DEFAULT_MAX_SAMPLES
}

fn default_true() -> bool {
    true
}

fn default_repeats() -> usize {
    3
}

/// Everything needed to replay a run. Serialized verbatim into the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_model")]
    pub model_id: String,
    #[serde(default)]
    pub dataset_id: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_max_samples")]
    pub max_samples: usize,
    #[serde(default)]
    pub filter: DissimilarityFilter,
    /// Apply the semantic cap when picking dissimilar demos.
    #[serde(default = "default_true")]
    pub semantic_filter: bool,
    #[serde(default = "default_repeats")]
    pub triplet_repeats: usize,
    /// Labels substituted into demos by the `pir` run.
    #[serde(default)]
    pub irrelevant_labels: Option<Vec<String>>,
    /// Explicit prompt for `diagnose`.
    #[serde(default)]
    pub prompt: Option<PromptSpec>,
    /// Overrides the dataset's task word.
    #[serde(default)]
    pub task_word: Option<String>,
    /// Translation corpus for the generation sweep; the packaged one if unset.
    #[serde(default)]
    pub svo_corpus: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            model_id: default_model(),
            dataset_id: None,
            k: None,
            shots: default_shots(),
            seeds: default_seeds(),
            thresholds: Thresholds::default(),
            output_dir: default_output_dir(),
            max_samples: DEFAULT_MAX_SAMPLES,
            filter: DissimilarityFilter::default(),
            semantic_filter: true,
            triplet_repeats: 3,
            irrelevant_labels: None,
            prompt: None,
            task_word: None,
            svo_corpus: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn dataset(&self) -> Option<String> {
        self.dataset_id
            .clone()
            .or_else(|| self.experiment.default_dataset().map(str::to_string))
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.max_samples == 0 {
            return Err(Error::Config("max_samples must be positive".into()));
        }
        if self.triplet_repeats == 0 {
            return Err(Error::Config("triplet_repeats must be positive".into()));
        }
        match (self.experiment, self.k) {
            (ExperimentKind::Q1 | ExperimentKind::Q4Copy | ExperimentKind::Diagnose, Some(0)) => {
                return Err(Error::Config(format!("{} needs k >= 1", self.experiment)))
            }
            (ExperimentKind::Triplets, Some(k)) if k != 3 * self.triplet_repeats => {
                return Err(Error::Config(format!(
                    "triplet prompts hold {} demos, not {k}",
                    3 * self.triplet_repeats
                )))
            }
            _ => {}
        }
        if self.experiment == ExperimentKind::Q2Shots && self.shots.is_empty() {
            return Err(Error::Config("shot list is empty".into()));
        }
        if let Some(labels) = &self.irrelevant_labels {
            if labels.is_empty() {
                return Err(Error::Config("irrelevant label list is empty".into()));
            }
        }
        Ok(())
    }
}

/// Loads the configured model and runs the experiment, writing report files.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let model = load_model(&config.model_id)?;
    run_with_model(config, model.as_ref())
}

/// As [`run`], with a caller-supplied model. A failure is also written to
/// `failure.json` in the output directory.
pub fn run_with_model(config: &ExperimentConfig, model: &dyn LanguageModel) -> Result<ExperimentReport> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;
    match runs::execute(config, model) {
        Ok(report) => Ok(report),
        Err(e) => {
            let (sample, experiment) = match &e {
                Error::Sample { sample, experiment, .. } => (Some(*sample), experiment.clone()),
                _ => (None, config.experiment.to_string()),
            };
            let failure = serde_json::json!({
                "experiment": experiment,
                "sample": sample,
                "error": e.to_string(),
            });
            std::fs::write(
                config.output_dir.join(FAILURE_FILE),
                serde_json::to_string_pretty(&failure)?,
            )?;
            Err(e)
        }
    }
}
