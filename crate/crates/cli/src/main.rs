use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use iclscope::backend::{load_model, trace, CaptureRequest, MODEL_CACHE_ENV};
use iclscope::coordinate::Thresholds;
use iclscope::datasets::{load_dataset, DatasetKind};
use iclscope::experiments::{self, ExperimentConfig, ExperimentKind, ExperimentReport, Metrics};
use iclscope::prompt::PromptSpec;

#[derive(Parser)]
#[command(name = "iclscope", version, about = "Logit-lens diagnostics for in-context learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Place prompts on the recognition/similarity plane.
    Diagnose {
        #[command(flatten)]
        run: RunArgs,
        /// PromptSpec JSON to diagnose instead of dataset-built prompts.
        #[arg(long)]
        prompt: Option<PathBuf>,
    },
    /// Task-token PIR at demo labels over a dataset.
    Pir {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated words that replace every demo label.
        #[arg(long, value_delimiter = ',')]
        irrelevant_labels: Option<Vec<String>>,
    },
    /// Run a named experiment.
    Experiment {
        /// q1, q2_shots, q2_random_labels, q3_position, q4_copy, triplets,
        /// instruction, generation_sweep or diagnose.
        name: String,
        #[command(flatten)]
        run: RunArgs,
        /// Shot list for q2_shots.
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
    },
    /// Activation traces.
    Trace {
        #[command(subcommand)]
        command: TraceCommand,
    },
    /// Dataset utilities.
    Datasets {
        #[command(subcommand)]
        command: DatasetsCommand,
    },
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Capture hidden states (and optionally attention rows) to an .icltrace file.
    Export {
        #[arg(long, env = "ICLSCOPE_MODEL", default_value = iclscope::backend::REFERENCE_MODEL)]
        model: String,
        /// Raw prompt text.
        #[arg(long, conflicts_with = "prompt")]
        text: Option<String>,
        /// PromptSpec JSON to render.
        #[arg(long)]
        prompt: Option<PathBuf>,
        /// Token positions to capture; defaults to the last token.
        #[arg(long, value_delimiter = ',')]
        positions: Option<Vec<usize>>,
        /// 1-based layers whose attention rows are kept.
        #[arg(long, value_delimiter = ',')]
        attention_layers: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetsCommand {
    /// List built-in and loadable datasets.
    List,
}

#[derive(Args)]
struct RunArgs {
    /// Model id resolved under the model cache, a model directory, or `toy`.
    #[arg(long, env = "ICLSCOPE_MODEL")]
    model: Option<String>,
    /// Built-in dataset id or `kind:path` for a JSON-lines export.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    tau_y: Option<f64>,
    #[arg(long)]
    tau_x: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_samples: Option<usize>,
    /// Overrides the dataset's task word.
    #[arg(long)]
    task_word: Option<String>,
    /// Skip the embedding-based dissimilarity cap.
    #[arg(long)]
    no_semantic_filter: bool,
    /// ExperimentConfig JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self, kind: ExperimentKind) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let cfg = ExperimentConfig::from_path(p).with_context(|| format!("reading {}", p.display()))?;
                if cfg.experiment != kind {
                    bail!("config file is for {}, not {kind}", cfg.experiment);
                }
                cfg
            }
            None => ExperimentConfig::new(kind),
        };
        if let Some(m) = &self.model {
            cfg.model_id = m.clone();
        }
        if let Some(d) = &self.dataset {
            cfg.dataset_id = Some(d.clone());
        }
        if self.k.is_some() {
            cfg.k = self.k;
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        cfg.thresholds = Thresholds {
            tau_y: self.tau_y.unwrap_or(cfg.thresholds.tau_y),
            tau_x: self.tau_x.unwrap_or(cfg.thresholds.tau_x),
        };
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(m) = self.max_samples {
            cfg.max_samples = m;
        }
        if let Some(w) = &self.task_word {
            cfg.task_word = Some(w.clone());
        }
        if self.no_semantic_filter {
            cfg.semantic_filter = false;
        }
        Ok(cfg)
    }
}

fn read_prompt(path: &PathBuf) -> Result<PromptSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let report = experiments::run(cfg).with_context(|| format!("{} failed", cfg.experiment))?;
    eprintln!(
        "wrote {} files to {}",
        report.files.len(),
        cfg.output_dir.display()
    );
    Ok(report)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Diagnose { run: args, prompt } => {
            let mut cfg = args.config(ExperimentKind::Diagnose)?;
            if let Some(p) = &prompt {
                cfg.prompt = Some(read_prompt(p)?);
            }
            let report = run(&cfg)?;
            if let Metrics::Diagnose { reports } = &report.metrics {
                println!("{}", serde_json::to_string_pretty(reports)?);
            }
        }
        Command::Pir { run: args, irrelevant_labels } => {
            let mut cfg = args.config(ExperimentKind::Pir)?;
            if irrelevant_labels.is_some() {
                cfg.irrelevant_labels = irrelevant_labels;
            }
            let report = run(&cfg)?;
            if let Metrics::Pir { run } = &report.metrics {
                println!("mean PIR of {:?}: {:.6} over {} prompts", run.task_word, run.mean_pir, run.samples.len());
            }
        }
        Command::Experiment { name, run: args, shots } => {
            let kind: ExperimentKind = name.parse()?;
            let mut cfg = args.config(kind)?;
            if let Some(s) = shots {
                cfg.shots = s;
            }
            let report = run(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report.metrics)?);
        }
        Command::Trace {
            command:
                TraceCommand::Export {
                    model,
                    text,
                    prompt,
                    positions,
                    attention_layers,
                    out,
                },
        } => {
            let text = match (text, prompt) {
                (Some(t), _) => t,
                (None, Some(p)) => read_prompt(&p)?.render()?,
                (None, None) => bail!("pass --text or --prompt"),
            };
            let model = load_model(&model)?;
            let tokens = model.tokenize(&text)?;
            let Some(last) = tokens.last_index() else {
                bail!("prompt text is empty");
            };
            let positions = positions.unwrap_or_else(|| vec![last]);
            let req = CaptureRequest::at(positions.iter().copied()).with_attention(attention_layers);
            let capture = model.forward_capture(&tokens, &req)?;
            trace::export_trace(&capture, model.handle(), &tokens, &out)?;
            eprintln!(
                "captured {} positions x {} layers into {}",
                positions.len(),
                capture.num_layers,
                out.display()
            );
        }
        Command::Datasets {
            command: DatasetsCommand::List,
        } => {
            for kind in DatasetKind::ALL {
                match kind.builtin_text() {
                    Some(_) => {
                        let b = load_dataset(kind.name())?;
                        println!(
                            "{:<14} built-in  {:>3} examples  {} labels  task word {:?}",
                            kind.name(),
                            b.len(),
                            b.label_space.len(),
                            b.task_word
                        );
                    }
                    None => println!(
                        "{:<14} external  load with --dataset {}:<file.jsonl> ({} classes)",
                        kind.name(),
                        kind.name(),
                        kind.expected_classes().unwrap_or(0)
                    ),
                }
            }
            println!("model cache: ${MODEL_CACHE_ENV} (default ~/.cache/iclscope/models)");
        }
    }
    Ok(())
}
