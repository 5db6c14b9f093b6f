//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Model-behavioral criteria run on the reference model (`gpt2-xl`, or the
//! id/directory in `ICLSCOPE_MODEL`). When it cannot be loaded they fail
//! with the load error.

use std::time::{Duration, Instant};

use iclscope::backend::{load_model, LanguageModel, REFERENCE_MODEL};
use iclscope::datasets::{load_dataset, SvoCorpus};
use iclscope::experiments::{pir_run, run_with_model, sweep_curves, ExperimentConfig, ExperimentKind, Metrics};
use iclscope::lens::{pir_of_ranks, rank_of};
use iclscope::prompt::{
    build_label_coverage, build_triplet_prompt, insert_similar_test, parse_back, Example, LabelSpace, Markers,
    PromptSpec, SimilarMode, TripletCorpusEntry,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Algorithmic = fn() -> Outcome;
type Behavioral = fn(&dyn LanguageModel) -> iclscope::Result<Outcome>;

const MINUTE: Duration = Duration::from_secs(60);

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    match (out, limit) {
        (Ok(_), Some(l)) if took >= l => Err(format!("took {took:.1?}, limit {l:?}")),
        (Ok(msg), _) => Ok(format!("{msg}; {took:.1?}")),
        (Err(msg), _) => Err(format!("{msg}; {took:.1?}")),
    }
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn brute_rank(logits: &[f32], target: usize) -> usize {
    let mut sorted = logits.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    1 + sorted.iter().position(|&v| v == logits[target]).unwrap()
}

fn rank_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut sizes = vec![10usize, 50_000];
    while sizes.len() < 10_000 {
        // Log-uniform over [10, 50000] so every scale is exercised.
        let s = (10f64.ln() + rng.random::<f64>() * (50_000f64.ln() - 10f64.ln())).exp();
        sizes.push((s.round() as usize).clamp(10, 50_000));
    }
    for (i, &n) in sizes.iter().enumerate() {
        // Every third vector draws from a small value set to force ties.
        let logits: Vec<f32> = if i % 3 == 0 {
            (0..n).map(|_| rng.random_range(-8i32..8) as f32).collect()
        } else {
            (0..n).map(|_| rng.random_range(-20.0f32..20.0)).collect()
        };
        let target = rng.random_range(0..n);
        let got = rank_of(&logits, target as u32).map_err(|e| e.to_string())?;
        let want = brute_rank(&logits, target);
        if got != want {
            return Err(format!("vector {i} (size {n}): rank_of {got}, oracle {want}"));
        }
    }
    Ok(format!("{} vectors, sizes 10..=50000", sizes.len()))
}

fn pir_properties() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    let strat = (1usize..60_000).prop_flat_map(|vocab| {
        (
            Just(vocab),
            prop::collection::vec(1..=vocab, 1..64),
            1..=vocab,
        )
    });
    runner
        .run(&strat, |(vocab, ranks, extra)| {
            let p = pir_of_ranks(&ranks).unwrap();
            prop_assert!(p.value >= 1.0 / vocab as f64 && p.value <= 1.0);
            let best = *ranks.iter().min().unwrap();
            prop_assert_eq!(p.value, 1.0 / best as f64);
            prop_assert_eq!(ranks[p.peak_layer - 1], best);
            prop_assert_eq!(ranks.iter().position(|&r| r == best).unwrap() + 1, p.peak_layer);
            let mut longer = ranks.clone();
            longer.push(extra);
            let q = pir_of_ranks(&longer).unwrap();
            prop_assert!(q.value >= p.value);
            prop_assert!(q.peak_layer == p.peak_layer || q.peak_layer == longer.len());
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("10000 random profiles".into())
}

fn payload() -> impl Strategy<Value = String> {
    "[A-Za-z0-9][A-Za-z0-9 ,.'?!-]{0,30}"
}

fn prompt_round_trip() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 1_000,
        failure_persistence: None,
        ..Config::default()
    });
    let markers = prop_oneof![
        Just(Markers::word()),
        Just(Markers::sentence()),
        Just(Markers::question()),
    ];
    let labels = prop::collection::btree_set("[a-z]{1,10}", 2..8);
    let strat = (
        markers,
        prop::collection::vec((payload(), payload()), 0..10),
        payload(),
        labels,
        prop::collection::vec(payload(), 8),
        any::<u64>(),
        prop::option::of("[A-Za-z ,.]{1,40}"),
    );
    runner
        .run(&strat, |(markers, demos, test, labels, inputs, seed, instruction)| {
            let mut spec = PromptSpec::new(
                markers.clone(),
                demos.into_iter().map(|(i, l)| Example::new(i, l)).collect(),
                test.clone(),
            );
            spec.instruction = instruction.filter(|s| !s.trim().is_empty());
            let text = spec.render().unwrap();
            prop_assert_eq!(&parse_back(&text, &markers).unwrap(), &spec);

            let space = LabelSpace::new(labels).unwrap();
            let exemplars: Vec<Example> =
                space.labels().iter().zip(&inputs).map(|(l, i)| Example::new(i.clone(), l.clone())).collect();
            let cov = build_label_coverage(&space, &exemplars, &test, &markers, seed).unwrap();
            let mut got: Vec<String> = cov.demos.iter().map(|d| d.label_text.clone()).collect();
            got.sort();
            let mut want = space.labels().to_vec();
            want.sort();
            prop_assert_eq!(got, want);

            let gold = space.labels()[(seed as usize) % space.len()].clone();
            let wrong = insert_similar_test(&spec, &gold, &space, SimilarMode::Incorrect, seed).unwrap();
            prop_assert_ne!(&wrong.label, &gold);
            prop_assert!(space.contains(&wrong.label));
            prop_assert_eq!(&wrong.spec.demos[wrong.position].input_text, &test);

            let entry = TripletCorpusEntry {
                test_sample: Example::new(test.clone(), gold.clone()),
                semantic: Example::new(inputs[0].clone(), gold.clone()),
                lexical: Example::new(inputs[1].clone(), wrong.label.clone()),
                baseline: Example::new(inputs[2].clone(), wrong.label.clone()),
            };
            let t = build_triplet_prompt(&entry, 3, seed, &markers).unwrap();
            prop_assert_eq!(t.k(), 9);
            for (label, source) in [("l", &entry.lexical), ("s", &entry.semantic), ("b", &entry.baseline)] {
                let hits: Vec<&Example> = t.demos.iter().filter(|d| d.label_text == label).collect();
                prop_assert_eq!(hits.len(), 3);
                prop_assert!(hits.iter().all(|d| d.input_text == source.input_text));
            }
            prop_assert_eq!(&parse_back(&t.render().unwrap(), &markers).unwrap().demos, &t.demos);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("1000 fuzzed cases".into())
}

struct Reference {
    id: String,
    model: Result<Box<dyn LanguageModel>, String>,
}

impl Reference {
    fn load() -> Self {
        let id = std::env::var("ICLSCOPE_MODEL").unwrap_or_else(|_| REFERENCE_MODEL.to_string());
        let model = load_model(&id).map_err(|e| e.to_string());
        Self { id, model }
    }

    fn with(&self, f: impl FnOnce(&dyn LanguageModel) -> iclscope::Result<Outcome>) -> Outcome {
        match &self.model {
            Ok(m) => f(m.as_ref()).unwrap_or_else(|e| Err(format!("run error: {e}"))),
            Err(e) => Err(format!("reference model {:?} unavailable: {e}", self.id)),
        }
    }
}

fn cfg(kind: ExperimentKind, model: &dyn LanguageModel, out: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(kind);
    c.model_id = model.handle().model_id.clone();
    c.output_dir = out.to_path_buf();
    c
}

fn metrics(model: &dyn LanguageModel, c: &ExperimentConfig) -> iclscope::Result<Metrics> {
    Ok(run_with_model(c, model)?.metrics)
}

fn pir_separation(model: &dyn LanguageModel) -> iclscope::Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let ds = load_dataset("capitals")?;
    let mut c = cfg(ExperimentKind::Pir, model, dir.path());
    c.k = Some(1);
    c.seeds = vec![0];
    c.max_samples = 20;
    let correct = pir_run(model, &ds, &c)?.mean_pir;
    c.irrelevant_labels = Some(vec!["foo".into(), "bar".into()]);
    let irrelevant = pir_run(model, &ds, &c)?.mean_pir;
    Ok(check(
        correct >= 10.0 * irrelevant && correct >= 0.5,
        format!("mean PIR correct {correct:.4}, foo/bar {irrelevant:.4}"),
    ))
}

fn recognition_split(model: &dyn LanguageModel) -> iclscope::Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let tau = iclscope::coordinate::Thresholds::default().tau_y;
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, above) in [("capitals", true), ("colors", true), ("triplets-trec", false), ("triplets-emo", false)] {
        let ds = load_dataset(name)?;
        let mut c = cfg(ExperimentKind::Pir, model, dir.path());
        c.k = Some(1);
        c.seeds = vec![0];
        c.max_samples = 20;
        let run = pir_run(model, &ds, &c)?;
        let hits = run.samples.iter().filter(|s| (s.pir > tau) == above).count();
        ok &= run.samples.len() >= 20 && 2 * hits > run.samples.len();
        parts.push(format!("{name} {hits}/{} on the expected side", run.samples.len()));
    }
    Ok(check(ok, parts.join(", ")))
}

fn positional_bias(model: &dyn LanguageModel) -> iclscope::Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let c = cfg(ExperimentKind::Q3Position, model, dir.path());
    let Metrics::Q3Position { histogram, shares, .. } = metrics(model, &c)? else {
        unreachable!()
    };
    let first = shares.first().copied().unwrap_or(0.0);
    Ok(check(
        histogram.total() >= 100 && shares.iter().skip(1).all(|&s| first > s),
        format!("{} samples, shares {shares:.3?}", histogram.total()),
    ))
}

fn copy_rate(model: &dyn LanguageModel) -> iclscope::Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let mut parts = Vec::new();
    let mut ok = true;
    for name in ["triplets-trec", "triplets-emo"] {
        let mut c = cfg(ExperimentKind::Q4Copy, model, dir.path());
        c.dataset_id = Some(name.into());
        c.k = Some(12);
        let Metrics::Q4Copy { copy_rate, uniform_baseline, .. } = metrics(model, &c)? else {
            unreachable!()
        };
        ok &= copy_rate.mean >= 3.0 * uniform_baseline;
        parts.push(format!("{name} copy {:.3} vs 3x{uniform_baseline:.3}", copy_rate.mean));
    }
    Ok(check(ok, parts.join(", ")))
}

fn diminishing_returns(model: &dyn LanguageModel) -> iclscope::Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let mut parts = Vec::new();
    let mut ok = true;
    for name in ["capitals", "colors"] {
        let mut c = cfg(ExperimentKind::Q2Shots, model, dir.path());
        c.dataset_id = Some(name.into());
        c.shots = vec![0, 1, 6];
        let Metrics::Q2Shots { points } = metrics(model, &c)? else {
            unreachable!()
        };
        let acc = |shots: usize| {
            points
                .iter()
                .find(|p| p.shots == shots && (shots == 0 || !p.instruction))
                .map(|p| p.accuracy.mean)
                .unwrap_or(f64::NAN)
        };
        let (a0, a1, a6) = (acc(0), acc(1), acc(6));
        ok &= a1 - a0 > 0.0 && a6 - a1 < a1 - a0;
        parts.push(format!("{name} 0/1/6-shot {a0:.3}/{a1:.3}/{a6:.3}"));
    }
    Ok(check(ok, parts.join(", ")))
}

fn instruction_remedy(model: &dyn LanguageModel) -> iclscope::Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let mut c = cfg(ExperimentKind::Instruction, model, dir.path());
    c.max_samples = 1;
    c.seeds = vec![0];
    let Metrics::Instruction { case_study, .. } = metrics(model, &c)? else {
        unreachable!()
    };
    let (without, with) = (case_study.pir_without, case_study.pir_with);
    Ok(check(
        with > without && with >= 1.0 / 20.0,
        format!("PIR without {without:.4}, with {with:.4}"),
    ))
}

fn generation_sweep(model: &dyn LanguageModel) -> iclscope::Result<Outcome> {
    let curves = sweep_curves(model, &SvoCorpus::builtin()?)?;
    let found: Vec<(String, usize, String)> = curves
        .iter()
        .map(|c| (c.target.clone(), c.argmax_position, c.argmax_token.clone()))
        .collect();
    let positions: Vec<usize> = found.iter().map(|f| f.1).collect();
    let ordered = positions.len() == 3 && positions.windows(2).all(|w| w[0] < w[1]);
    Ok(check(ordered, format!("argmax tokens {found:?}")))
}

fn main() {
    let reference = Reference::load();
    let algorithmic: [(&str, Algorithmic); 3] = [
        ("rank oracle", rank_oracle),
        ("PIR bounds and monotonicity", pir_properties),
        ("prompt round trip", prompt_round_trip),
    ];
    let behavioral: [(&str, Behavioral); 7] = [
        ("PIR separation", pir_separation),
        ("task-recognition split", recognition_split),
        ("Q3 positional bias", positional_bias),
        ("Q4 copy rate", copy_rate),
        ("Q2 diminishing returns", diminishing_returns),
        ("instruction remedy", instruction_remedy),
        ("generation sweep", generation_sweep),
    ];

    let mut failed = 0;
    let mut report = |name: &str, kind: &str, out: Outcome| {
        match &out {
            Ok(detail) => println!("PASS [{kind}] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{kind}] {name}: {detail}");
            }
        }
    };
    for (name, f) in algorithmic {
        report(name, "algorithmic", timed(Some(MINUTE), f));
    }
    for (name, f) in behavioral {
        report(name, "model-behavioral", timed(None, || reference.with(f)));
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
