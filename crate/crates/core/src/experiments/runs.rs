use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::plot::{bar_chart, line_chart};
use super::report::*;
use super::{ExperimentConfig, ExperimentKind, SAMPLES_FILE, SUMMARY_FILE};
use crate::backend::{CaptureRequest, LanguageModel};
use crate::coordinate::{demo_label_profiles, diagnose, Quadrant};
use crate::datasets::{load_dataset, DatasetBundle, SvoCorpus, TREC_INSTRUCTION};
use crate::error::{Error, Result};
use crate::evaluator::{
    accuracy, copy_rate_of, label_token, predict, LsbTally, LsbTokens, MeanStd, PositionalHistogram,
    SampleRecord, Trial,
};
use crate::lens::{pir, rank_profile, LogitLens, ProfileRecord, SubTokenPolicy, TaskToken};
use crate::prompt::{
    build_label_coverage, build_standard, build_triplet_prompt, insert_similar_test, locate_label_positions,
    prepend_instruction, randomize_labels, tokens_in_span, Example, Markers, PromptSpec, SimilarMode,
};
use crate::similarity::{Embedder, MeanEmbedder};
use crate::VERSION;

/// Seed for the prompt of `sample` under run seed `seed`: one ChaCha
/// stream per sample.
pub fn prompt_seed(seed: u64, sample: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64);
    rng.random()
}

fn at_sample<T>(experiment: &str, sample: usize, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        e @ Error::Sample { .. } => e,
        e => Error::Sample {
            experiment: experiment.to_string(),
            sample,
            source: Box::new(e),
        },
    })
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    model: &'a dyn LanguageModel,
    embedder: MeanEmbedder<'a>,
    rows: Vec<SampleRow>,
    files: Vec<String>,
}

impl<'a> Ctx<'a> {
    fn emb(&self) -> Option<&dyn Embedder> {
        self.cfg.semantic_filter.then_some(&self.embedder as &dyn Embedder)
    }

    fn dataset(&self) -> Result<DatasetBundle> {
        let id = self
            .cfg
            .dataset()
            .ok_or_else(|| Error::Config(format!("{} needs a dataset", self.cfg.experiment)))?;
        load_dataset(&id)
    }

    fn k(&self) -> usize {
        self.cfg.k.unwrap_or(self.cfg.experiment.default_k())
    }

    fn n(&self, ds: &DatasetBundle) -> usize {
        ds.len().min(self.cfg.max_samples)
    }

    fn standard(&self, ds: &DatasetBundle, test: &Example, k: usize, seed: u64) -> Result<PromptSpec> {
        build_standard(&ds.pool, &test.input_text, k, seed, &ds.markers, &self.cfg.filter, self.emb())
    }

    fn file(&mut self, name: &str) -> std::path::PathBuf {
        self.files.push(name.to_string());
        self.cfg.output_dir.join(name)
    }

    fn push_records(&mut self, records: Vec<SampleRecord>) {
        self.rows.extend(records.into_iter().map(|r| SampleRow {
            condition: r.condition,
            sample: r.sample,
            seed: Some(r.seed),
            prediction_id: Some(r.prediction_id),
            prediction: r.prediction,
            gold: r.gold,
            correct: Some(r.correct),
            value: None,
        }));
    }

    fn task_token(&self, word: &str) -> Result<TaskToken> {
        let word = self.cfg.task_word.as_deref().unwrap_or(word);
        TaskToken::resolve(self.model.tokenizer(), word, SubTokenPolicy::FirstSubtoken)
    }
}

pub(super) fn execute(cfg: &ExperimentConfig, model: &dyn LanguageModel) -> Result<ExperimentReport> {
    let mut ctx = Ctx {
        cfg,
        model,
        embedder: MeanEmbedder::new(model),
        rows: Vec::new(),
        files: Vec::new(),
    };
    let (metrics, samples, dataset) = match cfg.experiment {
        ExperimentKind::Q1 => q1(&mut ctx)?,
        ExperimentKind::Q2Shots => q2_shots(&mut ctx)?,
        ExperimentKind::Q2RandomLabels => q2_random_labels(&mut ctx)?,
        ExperimentKind::Q3Position => q3_position(&mut ctx)?,
        ExperimentKind::Q4Copy => q4_copy(&mut ctx)?,
        ExperimentKind::Triplets => triplets(&mut ctx)?,
        ExperimentKind::Instruction => instruction(&mut ctx)?,
        ExperimentKind::GenerationSweep => generation_sweep(&mut ctx)?,
        ExperimentKind::Diagnose => diagnose_run(&mut ctx)?,
        ExperimentKind::Pir => {
            let ds = ctx.dataset()?;
            let run = pir_run(model, &ds, cfg)?;
            for s in &run.samples {
                ctx.rows.push(SampleRow {
                    condition: "pir".into(),
                    sample: s.sample,
                    seed: Some(s.seed),
                    prediction_id: None,
                    prediction: String::new(),
                    gold: ds.examples[s.sample].label_text.clone(),
                    correct: None,
                    value: Some(s.pir),
                });
            }
            let n = run.samples.len() / cfg.seeds.len();
            (Metrics::Pir { run }, n, Some(ds.name))
        }
    };
    let csv_path = ctx.file(SAMPLES_FILE);
    write_rows(&csv_path, &ctx.rows)?;
    ctx.files.push(SUMMARY_FILE.to_string());
    let report = ExperimentReport {
        experiment: cfg.experiment,
        toolkit_version: VERSION.to_string(),
        model_id: model.handle().model_id.clone(),
        dataset,
        seeds: cfg.seeds.clone(),
        model_behavioral: true,
        samples,
        config: cfg.clone(),
        metrics,
        files: ctx.files,
    };
    std::fs::write(cfg.output_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

type RunOutput = (Metrics, usize, Option<String>);

fn q1(ctx: &mut Ctx) -> Result<RunOutput> {
    let ds = ctx.dataset()?;
    let (k, n) = (ctx.k(), ctx.n(&ds));
    let mut conditions = Vec::new();
    for cond in ["similar_correct", "similar_incorrect", "no_similar"] {
        let (acc, recs) = accuracy(ctx.model, n, &ctx.cfg.seeds, cond, |i, seed| {
            let test = &ds.examples[i];
            let s = prompt_seed(seed, i);
            let spec = match cond {
                "no_similar" => ctx.standard(&ds, test, k, s)?,
                _ => {
                    let mode = if cond == "similar_correct" {
                        SimilarMode::Correct
                    } else {
                        SimilarMode::Incorrect
                    };
                    let base = ctx.standard(&ds, test, k - 1, s)?;
                    insert_similar_test(&base, &test.label_text, &ds.label_space, mode, s)?.spec
                }
            };
            Ok(Trial {
                spec,
                gold: test.label_text.clone(),
            })
        })?;
        ctx.push_records(recs);
        conditions.push(ConditionAccuracy {
            condition: cond.to_string(),
            accuracy: acc,
        });
    }
    let bars: Vec<_> = conditions.iter().map(|c| (c.condition.clone(), c.accuracy.mean)).collect();
    let path = ctx.file("q1_accuracy.svg");
    bar_chart(&path, &format!("Accuracy on {}", ds.name), "accuracy", &bars)?;
    Ok((Metrics::Q1 { k, conditions }, n, Some(ds.name)))
}

fn q2_shots(ctx: &mut Ctx) -> Result<RunOutput> {
    let ds = ctx.dataset()?;
    let n = ctx.n(&ds);
    let mut plan: Vec<(usize, bool)> = ctx
        .cfg
        .shots
        .iter()
        .map(|&s| (s, s == 0 && ds.instruction.is_some()))
        .collect();
    if ds.instruction.is_some() {
        plan.push((1, true));
    }
    let mut points = Vec::new();
    for (shots, with_instruction) in plan {
        let cond = format!("{shots}-shot{}", if with_instruction { "+instruction" } else { "" });
        let (acc, recs) = accuracy(ctx.model, n, &ctx.cfg.seeds, &cond, |i, seed| {
            let test = &ds.examples[i];
            let mut spec = ctx.standard(&ds, test, shots, prompt_seed(seed, i))?;
            if with_instruction {
                spec = prepend_instruction(&spec, ds.instruction.as_deref().unwrap_or_default())?;
            }
            Ok(Trial {
                spec,
                gold: test.label_text.clone(),
            })
        })?;
        ctx.push_records(recs);
        points.push(ShotPoint {
            shots,
            instruction: with_instruction,
            accuracy: acc,
        });
    }
    let bars: Vec<_> = points
        .iter()
        .map(|p| (format!("{}{}", p.shots, if p.instruction { "+I" } else { "" }), p.accuracy.mean))
        .collect();
    let path = ctx.file("q2_shots.svg");
    bar_chart(&path, &format!("Accuracy by shots on {}", ds.name), "accuracy", &bars)?;
    Ok((Metrics::Q2Shots { points }, n, Some(ds.name)))
}

fn q2_random_labels(ctx: &mut Ctx) -> Result<RunOutput> {
    let ds = ctx.dataset()?;
    let (k, n) = (ctx.k(), ctx.n(&ds));
    let mut results = Vec::new();
    for random in [false, true] {
        let cond = if random { "random_labels" } else { "correct_labels" };
        let (acc, recs) = accuracy(ctx.model, n, &ctx.cfg.seeds, cond, |i, seed| {
            let test = &ds.examples[i];
            let s = prompt_seed(seed, i);
            let mut spec = ctx.standard(&ds, test, k, s)?;
            if random && k > 0 {
                spec = randomize_labels(&spec, &ds.label_space, s.rotate_left(17))?;
            }
            Ok(Trial {
                spec,
                gold: test.label_text.clone(),
            })
        })?;
        ctx.push_records(recs);
        results.push(acc);
    }
    let random = results.pop().expect("two conditions");
    let correct = results.pop().expect("two conditions");
    let path = ctx.file("q2_random_labels.svg");
    bar_chart(
        &path,
        &format!("Correct vs random labels on {}", ds.name),
        "accuracy",
        &[("correct".into(), correct.mean), ("random".into(), random.mean)],
    )?;
    Ok((Metrics::Q2RandomLabels { k, correct, random }, n, Some(ds.name)))
}

fn q3_position(ctx: &mut Ctx) -> Result<RunOutput> {
    let ds = ctx.dataset()?;
    let k = ds.label_space.len();
    if let Some(want) = ctx.cfg.k {
        if want != k {
            return Err(Error::Config(format!(
                "label-coverage prompts hold one demo per label ({k}), not {want}"
            )));
        }
    }
    let n = ctx.n(&ds);
    let tok = ctx.model.tokenizer();
    let mut per_seed = vec![PositionalHistogram::default(); ctx.cfg.seeds.len()];
    for i in 0..n {
        let test = &ds.examples[i];
        let pools = at_sample("q3_position", i, || {
            ds.label_space
                .labels()
                .iter()
                .map(|l| {
                    let mut pool = Vec::new();
                    for e in ds.pool.iter().filter(|e| &e.label_text == l) {
                        if e.input_text != test.input_text
                            && ctx.cfg.filter.admits(&test.input_text, &e.input_text, ctx.emb())?
                        {
                            pool.push(e);
                        }
                    }
                    if pool.is_empty() {
                        return Err(Error::MissingExemplar(l.clone()));
                    }
                    Ok(pool)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for (si, &seed) in ctx.cfg.seeds.iter().enumerate() {
            let s = prompt_seed(seed, i);
            let out = at_sample("q3_position", i, || {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let exemplars: Vec<Example> = pools
                    .iter()
                    .map(|p| (*p.choose(&mut rng).expect("non-empty pool")).clone())
                    .collect();
                let spec = build_label_coverage(&ds.label_space, &exemplars, &test.input_text, &ds.markers, s)?;
                let pred = predict(&spec, ctx.model)?;
                let tokens = spec
                    .demos
                    .iter()
                    .map(|d| label_token(tok, &d.label_text))
                    .collect::<Result<Vec<_>>>()?;
                let gold = label_token(tok, &test.label_text)?;
                Ok((pred, tokens, gold))
            })?;
            let (pred, tokens, gold) = out;
            let pos = per_seed[si].record(pred.top_token_id, &tokens);
            ctx.rows.push(SampleRow {
                condition: "label_coverage".into(),
                sample: i,
                seed: Some(seed),
                prediction_id: Some(pred.top_token_id),
                prediction: pred.top_token_text,
                gold: test.label_text.clone(),
                correct: Some(pred.top_token_id == gold),
                value: pos.map(|p| p as f64),
            });
        }
    }
    let mut histogram = PositionalHistogram::default();
    for h in &per_seed {
        histogram.merge(h);
    }
    let shares: Vec<f64> = (0..k).map(|p| histogram.share(p)).collect();
    let other_share = if histogram.total() == 0 {
        0.0
    } else {
        histogram.other_count as f64 / histogram.total() as f64
    };
    let mut bars: Vec<_> = shares.iter().enumerate().map(|(p, s)| (format!("pos {p}"), *s)).collect();
    bars.push(("other".into(), other_share));
    let path = ctx.file("q3_position.svg");
    bar_chart(&path, &format!("Predicted label position on {}", ds.name), "share", &bars)?;
    Ok((
        Metrics::Q3Position {
            k,
            histogram,
            shares,
            other_share,
            per_seed,
        },
        n,
        Some(ds.name),
    ))
}

fn q4_copy(ctx: &mut Ctx) -> Result<RunOutput> {
    let ds = ctx.dataset()?;
    let (k, n) = (ctx.k(), ctx.n(&ds));
    let tok = ctx.model.tokenizer();
    let mut per_seed = Vec::new();
    for &seed in &ctx.cfg.seeds {
        let mut preds = Vec::with_capacity(n);
        let mut assigned = Vec::with_capacity(n);
        for i in 0..n {
            let test = &ds.examples[i];
            let s = prompt_seed(seed, i);
            let (pred, label, label_id) = at_sample("q4_copy", i, || {
                let base = ctx.standard(&ds, test, k - 1, s)?;
                let ins = insert_similar_test(&base, &test.label_text, &ds.label_space, SimilarMode::Incorrect, s)?;
                let pred = predict(&ins.spec, ctx.model)?;
                let id = label_token(tok, &ins.label)?;
                Ok((pred, ins.label, id))
            })?;
            preds.push(pred.top_token_id);
            assigned.push(Some(label_id));
            ctx.rows.push(SampleRow {
                condition: "similar_incorrect".into(),
                sample: i,
                seed: Some(seed),
                prediction_id: Some(pred.top_token_id),
                prediction: pred.top_token_text,
                gold: label,
                correct: Some(pred.top_token_id == label_id),
                value: None,
            });
        }
        per_seed.push(copy_rate_of(&preds, &assigned)?);
    }
    let copy_rate = MeanStd::from_values(per_seed)?;
    let uniform_baseline = 1.0 / ds.label_space.len() as f64;
    let ratio = copy_rate.mean / uniform_baseline;
    let path = ctx.file("q4_copy.svg");
    bar_chart(
        &path,
        &format!("Copy rate on {}", ds.name),
        "rate",
        &[("copy rate".into(), copy_rate.mean), ("uniform".into(), uniform_baseline)],
    )?;
    Ok((
        Metrics::Q4Copy {
            k,
            copy_rate,
            uniform_baseline,
            ratio,
        },
        n,
        Some(ds.name),
    ))
}

fn triplets(ctx: &mut Ctx) -> Result<RunOutput> {
    let ds = ctx.dataset()?;
    let entries = ds
        .triplets
        .clone()
        .ok_or_else(|| Error::Config(format!("{} is not a triplet corpus", ds.name)))?;
    let n = entries.len().min(ctx.cfg.max_samples);
    let repeats = ctx.cfg.triplet_repeats;
    let tokens = LsbTokens::resolve(ctx.model.tokenizer())?;
    let mut total = LsbTally::default();
    let mut per_seed = Vec::new();
    for &seed in &ctx.cfg.seeds {
        let mut tally = LsbTally::default();
        for (i, entry) in entries.iter().take(n).enumerate() {
            let pred = at_sample("triplets", i, || {
                let spec = build_triplet_prompt(entry, repeats, prompt_seed(seed, i), &ds.markers)?;
                predict(&spec, ctx.model)
            })?;
            tally.record(pred.top_token_id, &tokens);
            ctx.rows.push(SampleRow {
                condition: "triplets".into(),
                sample: i,
                seed: Some(seed),
                prediction_id: Some(pred.top_token_id),
                prediction: pred.top_token_text,
                gold: entry.test_sample.label_text.clone(),
                correct: None,
                value: None,
            });
        }
        total.l += tally.l;
        total.s += tally.s;
        total.b += tally.b;
        total.others += tally.others;
        per_seed.push(tally.proportions()?);
    }
    let proportions = total.proportions()?;
    let path = ctx.file("triplets.svg");
    bar_chart(
        &path,
        &format!("l/s/b preference on {}", ds.name),
        "proportion",
        &[
            ("l".into(), proportions.l),
            ("s".into(), proportions.s),
            ("b".into(), proportions.b),
            ("others".into(), proportions.others),
        ],
    )?;
    Ok((
        Metrics::Triplets {
            repeats,
            proportions,
            per_seed,
        },
        n,
        Some(ds.name),
    ))
}

fn max_pir(profiles: &[ProfileRecord]) -> f64 {
    profiles.iter().map(|p| p.pir).fold(0.0, f64::max)
}

fn inverse_rank_series(name: &str, profiles: &[ProfileRecord]) -> Vec<(String, Vec<(f64, f64)>)> {
    profiles
        .iter()
        .map(|p| {
            let pts = p
                .ranks
                .iter()
                .enumerate()
                .map(|(l, r)| ((l + 1) as f64, 1.0 / *r as f64))
                .collect();
            (format!("{name} @{}", p.position), pts)
        })
        .collect()
}

fn instruction(ctx: &mut Ctx) -> Result<RunOutput> {
    let base = PromptSpec::new(
        Markers::question(),
        vec![Example::new("Who killed Gandhi?", "Human")],
        "What is a fear of shadows?",
    );
    let with_spec = prepend_instruction(&base, TREC_INSTRUCTION)?;
    let task = ctx.task_token("question")?;
    let without = demo_label_profiles(&base, &task, ctx.model)?;
    let with = demo_label_profiles(&with_spec, &task, ctx.model)?;
    let case_study = InstructionCase {
        prompt_without: base.render()?,
        prompt_with: with_spec.render()?,
        pir_without: max_pir(&without),
        pir_with: max_pir(&with),
        without,
        with,
    };
    let mut series = inverse_rank_series("without", &case_study.without);
    series.extend(inverse_rank_series("with", &case_study.with));
    let path = ctx.file("instruction_pir.svg");
    line_chart(&path, "Inverse rank of the task token by layer", "layer", "1 / rank", &series)?;

    let ds = ctx.dataset()?;
    let (k, n) = (ctx.k(), ctx.n(&ds));
    let mut accs = Vec::new();
    for with_instruction in [false, true] {
        if with_instruction && ds.instruction.is_none() {
            accs.push(None);
            continue;
        }
        let cond = if with_instruction { "with_instruction" } else { "without_instruction" };
        let (acc, recs) = accuracy(ctx.model, n, &ctx.cfg.seeds, cond, |i, seed| {
            let test = &ds.examples[i];
            let mut spec = ctx.standard(&ds, test, k, prompt_seed(seed, i))?;
            if with_instruction {
                spec = prepend_instruction(&spec, ds.instruction.as_deref().unwrap_or_default())?;
            }
            Ok(Trial {
                spec,
                gold: test.label_text.clone(),
            })
        })?;
        ctx.push_records(recs);
        accs.push(Some(acc));
    }
    let accuracy_with = accs.pop().flatten();
    let accuracy_without = accs.pop().flatten();
    Ok((
        Metrics::Instruction {
            case_study,
            accuracy_without,
            accuracy_with,
        },
        n,
        Some(ds.name),
    ))
}

/// PIR of each target word at every token of the final demo label.
pub fn sweep_curves(model: &dyn LanguageModel, corpus: &SvoCorpus) -> Result<Vec<SweepCurve>> {
    let spec = corpus.spec();
    let rendered = spec.render_with_spans()?;
    let span = rendered
        .demo_labels
        .last()
        .cloned()
        .ok_or_else(|| Error::InvalidPrompt("translation prompt has no demos".into()))?;
    let tokens = model.tokenize(&rendered.text)?;
    let tok = model.tokenizer();
    locate_label_positions(&spec, &tokens, tok)?;
    let positions = tokens_in_span(&tokens, tok, span)?;
    if positions.is_empty() {
        return Err(Error::MarkerNotFound {
            marker: spec.markers.label.clone(),
        });
    }
    let capture = model.forward_capture(&tokens, &CaptureRequest::at(positions.iter().copied()))?;
    let lens = LogitLens::for_model(model);
    let texts = positions
        .iter()
        .map(|&p| tok.decode(&tokens.token_ids[p..=p]))
        .collect::<Result<Vec<_>>>()?;
    corpus
        .targets
        .iter()
        .map(|target| {
            let task = TaskToken::resolve(tok, target, SubTokenPolicy::FirstSubtoken)?;
            let values = positions
                .iter()
                .map(|&p| pir(&rank_profile(&capture, &lens, p, &task)?))
                .collect::<Result<Vec<_>>>()?;
            let argmax_index = values
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if v.value > values[best].value { i } else { best });
            Ok(SweepCurve {
                target: target.clone(),
                token_id: task.token_id,
                positions: positions.clone(),
                tokens: texts.clone(),
                pir: values.iter().map(|v| v.value).collect(),
                peak_layers: values.iter().map(|v| v.peak_layer).collect(),
                argmax_index,
                argmax_position: positions[argmax_index],
                argmax_token: texts[argmax_index].clone(),
            })
        })
        .collect()
}

fn generation_sweep(ctx: &mut Ctx) -> Result<RunOutput> {
    let corpus = match &ctx.cfg.svo_corpus {
        Some(p) => SvoCorpus::from_path(p)?,
        None => SvoCorpus::builtin()?,
    };
    let curves = sweep_curves(ctx.model, &corpus)?;
    for c in &curves {
        for (i, (&p, v)) in c.positions.iter().zip(&c.pir).enumerate() {
            ctx.rows.push(SampleRow {
                condition: c.target.clone(),
                sample: i,
                seed: None,
                prediction_id: Some(ctx.model.tokenize(&c.tokens[i]).map(|t| t.token_ids[0]).unwrap_or(0)),
                prediction: c.tokens[i].clone(),
                gold: String::new(),
                correct: Some(p == c.argmax_position),
                value: Some(*v),
            });
        }
    }
    let series: Vec<_> = curves
        .iter()
        .map(|c| {
            let pts = c.pir.iter().enumerate().map(|(i, v)| (i as f64, *v)).collect();
            (c.target.clone(), pts)
        })
        .collect();
    let path = ctx.file("generation_sweep.svg");
    line_chart(&path, "PIR along the final label sentence", "token index", "PIR", &series)?;
    Ok((Metrics::GenerationSweep { curves }, 1, None))
}

fn diagnose_run(ctx: &mut Ctx) -> Result<RunOutput> {
    let ds = ctx.dataset()?;
    let task = ctx.task_token(&ds.task_word)?;
    let specs: Vec<PromptSpec> = match &ctx.cfg.prompt {
        Some(p) => vec![p.clone()],
        None => {
            let (k, seed) = (ctx.k(), ctx.cfg.seeds[0]);
            (0..ctx.n(&ds))
                .map(|i| at_sample("diagnose", i, || ctx.standard(&ds, &ds.examples[i], k, prompt_seed(seed, i))))
                .collect::<Result<_>>()?
        }
    };
    let mut reports = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let r = at_sample(
            "diagnose",
            i,
            || diagnose(spec, &task, ctx.model, ctx.emb(), ctx.cfg.thresholds),
        )?;
        ctx.rows.push(SampleRow {
            condition: "diagnose".into(),
            sample: i,
            seed: spec.seed,
            prediction_id: None,
            prediction: r.quadrant.to_string(),
            gold: String::new(),
            correct: None,
            value: Some(r.raw_pir),
        });
        reports.push(r);
    }
    let bars: Vec<_> = [Quadrant::Q1, Quadrant::Q2, Quadrant::Q3, Quadrant::Q4]
        .iter()
        .map(|q| (q.to_string(), reports.iter().filter(|r| r.quadrant == *q).count() as f64))
        .collect();
    let path = ctx.file("diagnose_quadrants.svg");
    bar_chart(&path, "Quadrant counts", "prompts", &bars)?;
    let n = reports.len();
    let dataset = ctx.cfg.prompt.is_none().then_some(ds.name);
    Ok((Metrics::Diagnose { reports }, n, dataset))
}

/// Best PIR over demo labels for standard prompts, optionally with demo
/// labels replaced by the configured irrelevant words (cycled by demo and
/// sample index).
pub fn pir_run(model: &dyn LanguageModel, ds: &DatasetBundle, cfg: &ExperimentConfig) -> Result<PirRun> {
    let k = cfg.k.unwrap_or(ExperimentKind::Pir.default_k());
    if k == 0 {
        return Err(Error::Config("pir needs k >= 1".into()));
    }
    let embedder = MeanEmbedder::new(model);
    let emb = cfg.semantic_filter.then_some(&embedder as &dyn Embedder);
    let word = cfg.task_word.clone().unwrap_or_else(|| ds.task_word.clone());
    let task = TaskToken::resolve(model.tokenizer(), &word, SubTokenPolicy::FirstSubtoken)?;
    let n = ds.len().min(cfg.max_samples);
    let mut samples = Vec::new();
    for &seed in &cfg.seeds {
        for i in 0..n {
            let test = &ds.examples[i];
            let best = at_sample("pir", i, || {
                let mut spec = build_standard(
                    &ds.pool,
                    &test.input_text,
                    k,
                    prompt_seed(seed, i),
                    &ds.markers,
                    &cfg.filter,
                    emb,
                )?;
                if let Some(labels) = &cfg.irrelevant_labels {
                    for (j, d) in spec.demos.iter_mut().enumerate() {
                        d.label_text = labels[(i + j) % labels.len()].clone();
                    }
                }
                let profiles = demo_label_profiles(&spec, &task, model)?;
                profiles
                    .into_iter()
                    .reduce(|a, b| if b.pir > a.pir { b } else { a })
                    .ok_or(Error::EmptyProfile)
            })?;
            samples.push(PirSample {
                sample: i,
                seed,
                pir: best.pir,
                peak_layer: best.peak_layer,
            });
        }
    }
    let mean_pir = samples.iter().map(|s| s.pir).sum::<f64>() / samples.len().max(1) as f64;
    Ok(PirRun {
        task_word: word,
        k,
        irrelevant_labels: cfg.irrelevant_labels.clone(),
        samples,
        mean_pir,
    })
}
