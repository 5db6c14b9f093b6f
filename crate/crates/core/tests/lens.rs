use std::path::PathBuf;

use iclscope::backend::{CaptureRequest, Gpt2Model, LanguageModel, TokenSequence};
use iclscope::lens::{
    attention_report, pir, pir_sweep, rank_of, rank_profile, LogitLens, SubTokenPolicy, TaskToken,
};

fn fixture() -> Gpt2Model {
    Gpt2Model::load_dir(
        &PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny-gpt2"),
        "tiny",
    )
    .unwrap()
}

fn tokens(model: &dyn LanguageModel, text: &str) -> TokenSequence {
    model.tokenize(text).unwrap()
}

/// Straight-line projection: final norm then every unembedding row.
fn project_by_hand(model: &dyn LanguageModel, hidden: &[f32]) -> Vec<f32> {
    let norm = model.final_norm().unwrap();
    let n = hidden.len() as f64;
    let mean = hidden.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = hidden.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let normed: Vec<f64> = hidden
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 - mean) / (var + norm.eps as f64).sqrt() * norm.weight[i] as f64 + norm.bias[i] as f64)
        .collect();
    let e = model.unembedding();
    e.values()
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(&normed).map(|(&w, &x)| w as f64 * x).sum::<f64>() as f32)
        .collect()
}

#[test]
fn ranks_match_hand_projection() {
    let model = fixture();
    let seq = tokens(&model, "Word: France\nLabel: Paris\nWord: Italy\nLabel: ");
    let last = seq.len() - 1;
    let cap = model.forward_capture(&seq, &CaptureRequest::at([2, last])).unwrap();
    let lens = LogitLens::for_model(&model);
    for target_id in [0u32, 17, 256, 257, 300] {
        let target = TaskToken {
            surface: format!("#{target_id}"),
            token_id: target_id,
            sub_token_policy: SubTokenPolicy::FirstSubtoken,
        };
        for pos in [2, last] {
            let profile = rank_profile(&cap, &lens, pos, &target).unwrap();
            assert_eq!(profile.ranks.len(), 2);
            for (l, &r) in profile.ranks.iter().enumerate() {
                let logits = project_by_hand(&model, cap.hidden_at(l + 1, pos).unwrap());
                let want = 1 + logits.iter().filter(|&&v| v > logits[target_id as usize]).count();
                assert_eq!(r, want, "target {target_id} pos {pos} layer {}", l + 1);
            }
        }
    }
}

#[test]
fn final_layer_projection_agrees_with_final_logits() {
    for model in [fixture(), Gpt2Model::toy(9)] {
        let seq = tokens(&model, "Word: Germany\nLabel: Berlin\nWord: Japan\nLabel: ");
        let last = seq.len() - 1;
        let cap = model.forward_capture(&seq, &CaptureRequest::at([last])).unwrap();
        let lens = LogitLens::for_model(&model);
        let projected = lens.project(cap.hidden_at(model.handle().num_layers, last).unwrap()).unwrap();
        for (a, b) in projected.iter().zip(&cap.final_logits) {
            assert!((a - b).abs() < 1e-4 * (1.0 + b.abs()));
        }
        let top = |v: &[f32]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
        assert_eq!(top(&projected), top(&cap.final_logits));
    }
}

#[test]
fn unembedding_shape_and_stability() {
    let model = Gpt2Model::toy(2);
    let e = model.unembedding();
    assert_eq!(e.shape(), (model.handle().vocab_size, model.handle().hidden_dim));
    assert_eq!(e.values(), model.unembedding().values());
}

#[test]
fn sweep_matches_single_profiles() {
    let model = Gpt2Model::toy(3);
    let seq = tokens(&model, "Word: Canada\nLabel: Ottawa\nWord: Peru\nLabel: ");
    let positions: Vec<usize> = vec![1, 4, seq.len() - 1];
    let cap = model.forward_capture(&seq, &CaptureRequest::at(positions.clone())).unwrap();
    let lens = LogitLens::for_model(&model);
    let target = TaskToken::resolve(model.tokenizer(), "capital", SubTokenPolicy::FirstSubtoken).unwrap();
    let sweep = pir_sweep(&cap, &lens, &positions, &target).unwrap();
    assert_eq!(sweep.len(), positions.len());
    for (&p, v) in positions.iter().zip(&sweep) {
        assert_eq!(*v, pir(&rank_profile(&cap, &lens, p, &target).unwrap()).unwrap());
        assert!(v.value >= 1.0 / model.handle().vocab_size as f64 && v.value <= 1.0);
    }
    let single = pir_sweep(&cap, &lens, &positions[..1], &target).unwrap();
    assert_eq!(single[0], sweep[0]);
}

#[test]
fn projection_policies_agree() {
    let model = Gpt2Model::toy(5);
    let seq = tokens(&model, "Word: Chile\nLabel: ");
    let last = seq.len() - 1;
    let cap = model.forward_capture(&seq, &CaptureRequest::at([last])).unwrap();
    let h = cap.hidden_at(2, last).unwrap();
    let a = LogitLens::for_model(&model).with_exec(iclscope::Exec::Sequential).project(h).unwrap();
    let b = LogitLens::for_model(&model).with_exec(iclscope::Exec::Parallel).project(h).unwrap();
    assert_eq!(a, b);
}

#[test]
fn attention_rows_sum_to_one_and_mark_labels() {
    let model = fixture();
    let seq = tokens(&model, "Word: France\nLabel: Paris\nWord: Italy\nLabel: ");
    let q = seq.len() - 1;
    let cap = model
        .forward_capture(&seq, &CaptureRequest::at([q]).with_attention([1, 2]))
        .unwrap();
    for layer in [1, 2] {
        let row = attention_report(&cap, layer, q, &[3, 7]).unwrap();
        assert!((row.scores.iter().sum::<f32>() - 1.0).abs() < 1e-4);
        assert!(row.scores.iter().all(|&v| v >= 0.0));
        assert!(matches!(row.label_argmax, Some(3) | Some(7)));
        let empty = attention_report(&cap, layer, q, &[]).unwrap();
        assert_eq!(empty.label_argmax, None);
    }
    assert!(attention_report(&cap, 1, 0, &[]).is_err());
}

#[test]
fn task_token_uses_word_initial_form() {
    let bpe = iclscope::backend::Gpt2Bpe::new().unwrap();
    use iclscope::backend::Tokenizer;
    let t = TaskToken::resolve(&bpe, "capital", SubTokenPolicy::FirstSubtoken).unwrap();
    assert_eq!(bpe.decode(&[t.token_id]).unwrap(), " capital");
    assert_eq!(rank_of(&[0.0, 1.0], 1).unwrap(), 1);
}
