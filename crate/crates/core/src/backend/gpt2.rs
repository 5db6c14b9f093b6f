//! GPT-2 family forward pass with residual-stream and attention capture.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use half::{bf16, f16};
use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::linalg::{affine, gelu, matvec, softmax_in_place, LayerNorm};
use super::tokenizer::{GreedyVocab, Gpt2Bpe, Tokenizer};
use super::{
    CaptureRequest, CaptureResult, LanguageModel, ModelHandle, TokenSequence, UnembeddingMatrix,
};
use crate::error::{Error, Result};
use crate::par::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gpt2Config {
    pub n_layer: usize,
    pub n_embd: usize,
    pub n_head: usize,
    pub vocab_size: usize,
    pub n_positions: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_epsilon: f32,
}

fn default_eps() -> f32 {
    1e-5
}

impl Gpt2Config {
    fn validate(&self) -> Result<()> {
        if self.n_layer == 0 || self.n_embd == 0 || self.vocab_size == 0 || self.n_head == 0 {
            return Err(Error::ShapeMismatch("config dimensions must be positive".into()));
        }
        if !self.n_embd.is_multiple_of(self.n_head) {
            return Err(Error::ShapeMismatch(format!(
                "n_embd {} not divisible by n_head {}",
                self.n_embd, self.n_head
            )));
        }
        Ok(())
    }
}

/// One transformer block. Projection weights use the `(in, out)` layout of
/// the original checkpoints, so `y = x @ w + b`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln_1: LayerNorm,
    pub attn_w: Array2<f32>,
    pub attn_b: Vec<f32>,
    pub attn_proj_w: Array2<f32>,
    pub attn_proj_b: Vec<f32>,
    pub ln_2: LayerNorm,
    pub fc_w: Array2<f32>,
    pub fc_b: Vec<f32>,
    pub mlp_proj_w: Array2<f32>,
    pub mlp_proj_b: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Gpt2Weights {
    pub wte: Array2<f32>,
    pub wpe: Array2<f32>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    /// Untied output head; `None` means the head is `wte`.
    pub lm_head: Option<Array2<f32>>,
}

pub struct Gpt2Model {
    handle: ModelHandle,
    config: Gpt2Config,
    tokenizer: Box<dyn Tokenizer>,
    wte: Arc<Array2<f32>>,
    head: Arc<Array2<f32>>,
    wpe: Array2<f32>,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    exec: Exec,
    in_flight: Mutex<()>,
}

impl std::fmt::Debug for Gpt2Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gpt2Model")
            .field("handle", &self.handle)
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Gpt2Model {
    pub fn from_parts(
        model_id: &str,
        config: Gpt2Config,
        tokenizer: Box<dyn Tokenizer>,
        weights: Gpt2Weights,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.n_embd;
        let check = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::ShapeMismatch(format!("{what}: got {got:?}, expected {want:?}")))
            }
        };
        check("wte", weights.wte.dim(), (config.vocab_size, d))?;
        if weights.wpe.ncols() != d {
            return Err(Error::ShapeMismatch("wpe width".into()));
        }
        if weights.blocks.len() != config.n_layer {
            return Err(Error::ShapeMismatch(format!(
                "{} blocks for n_layer {}",
                weights.blocks.len(),
                config.n_layer
            )));
        }
        for (i, b) in weights.blocks.iter().enumerate() {
            check(&format!("h.{i}.attn.c_attn"), b.attn_w.dim(), (d, 3 * d))?;
            check(&format!("h.{i}.attn.c_proj"), b.attn_proj_w.dim(), (d, d))?;
            check(&format!("h.{i}.mlp.c_proj"), b.mlp_proj_w.dim(), (b.fc_w.ncols(), d))?;
            if b.fc_w.nrows() != d {
                return Err(Error::ShapeMismatch(format!("h.{i}.mlp.c_fc rows")));
            }
        }
        if tokenizer.vocab_size() > config.vocab_size {
            return Err(Error::ShapeMismatch(format!(
                "tokenizer has {} ids but the model only {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let wte = Arc::new(weights.wte);
        let head = match weights.lm_head {
            Some(h) => {
                check("lm_head", h.dim(), (config.vocab_size, d))?;
                Arc::new(h)
            }
            None => Arc::clone(&wte),
        };
        Ok(Self {
            handle: ModelHandle {
                model_id: model_id.to_string(),
                num_layers: config.n_layer,
                hidden_dim: d,
                vocab_size: config.vocab_size,
            },
            config,
            tokenizer,
            wte,
            head,
            wpe: weights.wpe,
            blocks: weights.blocks,
            ln_f: weights.ln_f,
            exec: Exec::default(),
            in_flight: Mutex::new(()),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &Gpt2Config {
        &self.config
    }

    /// Loads `config.json` plus every `*.safetensors` file in `dir`.
    ///
    /// The tokenizer is `greedy_vocab.json` when present, otherwise the
    /// GPT-2 BPE table.
    pub fn load_dir(dir: &Path, model_id: &str) -> Result<Self> {
        let load_err = |message: String| Error::ModelLoad {
            path: dir.to_path_buf(),
            message,
        };
        let config: Gpt2Config = serde_json::from_str(
            &std::fs::read_to_string(dir.join("config.json"))
                .map_err(|e| load_err(format!("config.json: {e}")))?,
        )?;
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(load_err("no .safetensors files".into()));
        }
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
        for file in &files {
            let handle = std::fs::File::open(file)?;
            // SAFETY: the mapping is read-only and dropped before returning.
            let mmap = unsafe { memmap2::Mmap::map(&handle)? };
            let st = SafeTensors::deserialize(&mmap)
                .map_err(|e| load_err(format!("{}: {e}", file.display())))?;
            for (name, view) in st.tensors() {
                let data = to_f32(view.dtype(), view.data())
                    .ok_or_else(|| load_err(format!("{name}: unsupported dtype {:?}", view.dtype())))?;
                let key = name.strip_prefix("transformer.").unwrap_or(&name).to_string();
                tensors.insert(key, (view.shape().to_vec(), data));
            }
        }
        let weights = weights_from_tensors(&config, &mut tensors).map_err(load_err)?;
        let vocab_path = dir.join("greedy_vocab.json");
        let tokenizer: Box<dyn Tokenizer> = if vocab_path.is_file() {
            Box::new(GreedyVocab::from_json(&std::fs::read_to_string(vocab_path)?)?)
        } else {
            Box::new(Gpt2Bpe::new()?)
        };
        Self::from_parts(model_id, config, tokenizer, weights)
    }

    /// Seeded random GPT-2 with a small greedy vocabulary. Exercises every
    /// code path; carries no linguistic knowledge.
    pub fn toy(seed: u64) -> Self {
        let tokenizer = toy_vocab();
        let config = Gpt2Config {
            n_layer: 4,
            n_embd: 32,
            n_head: 4,
            vocab_size: tokenizer.vocab_size(),
            n_positions: 1024,
            layer_norm_epsilon: 1e-5,
        };
        let weights = Gpt2Weights::random(&config, seed, 0.2);
        Self::from_parts(&format!("toy:{seed}"), config, Box::new(tokenizer), weights)
            .expect("toy shapes are consistent")
    }

    fn run(&self, ids: &[u32], req: &CaptureRequest) -> CaptureResult {
        let t = ids.len();
        let d = self.config.n_embd;
        let n_head = self.config.n_head;
        let hd = d / n_head;
        let scale = 1.0 / (hd as f32).sqrt();
        let exec = self.exec;

        let mut x = Array2::<f32>::zeros((t, d));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&self.wte.row(id as usize));
            row += &self.wpe.row(i);
        }

        let mut hidden = BTreeMap::new();
        let mut attention_rows = BTreeMap::new();
        for (li, block) in self.blocks.iter().enumerate() {
            let layer = li + 1;
            let want_attn = req.want_attention_layers.contains(&layer);
            let a = block.ln_1.apply_rows(&x);
            let qkv = affine(exec, a.view(), &block.attn_w, &block.attn_b);

            // per head: (output (t, hd), attention probs (t, t))
            let heads = exec.map_range(n_head, |h| {
                let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
                let k = qkv.slice(s![.., d + h * hd..d + (h + 1) * hd]);
                let v = qkv.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
                let mut probs = q.dot(&k.t());
                for (i, mut row) in probs.axis_iter_mut(Axis(0)).enumerate() {
                    let row = row.as_slice_mut().expect("row-major scores");
                    let (live, masked) = row.split_at_mut(i + 1);
                    live.iter_mut().for_each(|v| *v *= scale);
                    softmax_in_place(live);
                    masked.fill(0.0);
                }
                (probs.dot(&v), probs)
            });

            let mut merged = Array2::<f32>::zeros((t, d));
            for (h, (out, _)) in heads.iter().enumerate() {
                merged.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(out);
            }
            if want_attn {
                for &pos in &req.positions {
                    let mut row = vec![0.0f32; t];
                    for (_, probs) in &heads {
                        for (slot, p) in row.iter_mut().zip(probs.row(pos)) {
                            *slot += p;
                        }
                    }
                    row.iter_mut().for_each(|v| *v /= n_head as f32);
                    attention_rows.insert((layer, pos), row);
                }
            }

            x += &affine(exec, merged.view(), &block.attn_proj_w, &block.attn_proj_b);
            let m = block.ln_2.apply_rows(&x);
            let mut f = affine(exec, m.view(), &block.fc_w, &block.fc_b);
            f.mapv_inplace(gelu);
            x += &affine(exec, f.view(), &block.mlp_proj_w, &block.mlp_proj_b);

            for &pos in &req.positions {
                hidden.insert((layer, pos), x.row(pos).to_vec());
            }
        }

        let last = x.index_axis(Axis(0), t - 1).to_vec();
        let final_logits = matvec(exec, &self.head, &self.ln_f.apply(&last));
        CaptureResult {
            num_layers: self.config.n_layer,
            seq_len: t,
            hidden,
            attention_rows,
            final_logits,
        }
    }
}

impl LanguageModel for Gpt2Model {
    fn handle(&self) -> &ModelHandle {
        &self.handle
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    fn forward_capture(&self, prompt: &TokenSequence, req: &CaptureRequest) -> Result<CaptureResult> {
        let len = prompt.len();
        if len == 0 {
            return Err(Error::EmptyInput("prompt tokens"));
        }
        if len > self.config.n_positions {
            return Err(Error::OutOfRange(format!(
                "prompt of {len} tokens exceeds the context of {}",
                self.config.n_positions
            )));
        }
        if let Some(&id) = prompt
            .token_ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id: id as usize,
                vocab_size: self.config.vocab_size,
            });
        }
        if let Some(&position) = req.positions.iter().find(|&&p| p >= len) {
            return Err(Error::PositionOutOfRange { position, len });
        }
        if let Some(&layer) = req
            .want_attention_layers
            .iter()
            .find(|&&l| l == 0 || l > self.config.n_layer)
        {
            return Err(Error::LayerOutOfRange {
                layer,
                num_layers: self.config.n_layer,
            });
        }
        let _guard = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        Ok(self.run(&prompt.token_ids, req))
    }

    fn unembedding(&self) -> UnembeddingMatrix {
        UnembeddingMatrix::new(Arc::clone(&self.head))
    }

    fn final_norm(&self) -> Option<&LayerNorm> {
        Some(&self.ln_f)
    }

    fn token_embedding(&self, id: u32) -> Result<Vec<f32>> {
        if id as usize >= self.wte.nrows() {
            return Err(Error::TokenOutOfRange {
                id: id as usize,
                vocab_size: self.wte.nrows(),
            });
        }
        Ok(self.wte.row(id as usize).to_vec())
    }
}

impl Gpt2Weights {
    /// Uniform weights in `[-scale, scale]`, unit layer norms.
    pub fn random(config: &Gpt2Config, seed: u64, scale: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.n_embd;
        let mut mat = |r: usize, c: usize| {
            Array2::from_shape_simple_fn((r, c), || rng.random_range(-scale..=scale))
        };
        let wte = mat(config.vocab_size, d);
        let wpe = mat(config.n_positions, d);
        let blocks = (0..config.n_layer)
            .map(|_| Block {
                ln_1: LayerNorm::identity(d, config.layer_norm_epsilon),
                attn_w: mat(d, 3 * d),
                attn_b: mat(1, 3 * d).into_raw_vec_and_offset().0,
                attn_proj_w: mat(d, d),
                attn_proj_b: mat(1, d).into_raw_vec_and_offset().0,
                ln_2: LayerNorm::identity(d, config.layer_norm_epsilon),
                fc_w: mat(d, 4 * d),
                fc_b: mat(1, 4 * d).into_raw_vec_and_offset().0,
                mlp_proj_w: mat(4 * d, d),
                mlp_proj_b: mat(1, d).into_raw_vec_and_offset().0,
            })
            .collect();
        Self {
            wte,
            wpe,
            blocks,
            ln_f: LayerNorm::identity(d, config.layer_norm_epsilon),
            lm_head: None,
        }
    }
}

fn to_f32(dtype: Dtype, bytes: &[u8]) -> Option<Vec<f32>> {
    match dtype {
        Dtype::F32 => Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::F16 => Some(
            bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        ),
        Dtype::BF16 => Some(
            bytes
                .chunks_exact(2)
                .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        ),
        _ => None,
    }
}

type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn take_matrix(t: &mut TensorMap, name: &str, shape: (usize, usize)) -> std::result::Result<Array2<f32>, String> {
    let (dims, data) = t.remove(name).ok_or_else(|| format!("missing tensor {name}"))?;
    if dims != [shape.0, shape.1] {
        return Err(format!("{name}: shape {dims:?}, expected {shape:?}"));
    }
    Array2::from_shape_vec(shape, data).map_err(|e| format!("{name}: {e}"))
}

fn take_vector(t: &mut TensorMap, name: &str, len: usize) -> std::result::Result<Vec<f32>, String> {
    let (dims, data) = t.remove(name).ok_or_else(|| format!("missing tensor {name}"))?;
    if dims != [len] {
        return Err(format!("{name}: shape {dims:?}, expected [{len}]"));
    }
    Ok(data)
}

fn take_norm(t: &mut TensorMap, prefix: &str, d: usize, eps: f32) -> std::result::Result<LayerNorm, String> {
    Ok(LayerNorm {
        weight: take_vector(t, &format!("{prefix}.weight"), d)?,
        bias: take_vector(t, &format!("{prefix}.bias"), d)?,
        eps,
    })
}

fn weights_from_tensors(config: &Gpt2Config, t: &mut TensorMap) -> std::result::Result<Gpt2Weights, String> {
    let d = config.n_embd;
    let eps = config.layer_norm_epsilon;
    let wte = take_matrix(t, "wte.weight", (config.vocab_size, d))?;
    let wpe_rows = t.get("wpe.weight").map(|(s, _)| s[0]).unwrap_or(config.n_positions);
    let wpe = take_matrix(t, "wpe.weight", (wpe_rows, d))?;
    let mut blocks = Vec::with_capacity(config.n_layer);
    for i in 0..config.n_layer {
        let p = format!("h.{i}");
        let inner = t
            .get(&format!("{p}.mlp.c_fc.weight"))
            .map(|(s, _)| s.get(1).copied().unwrap_or(4 * d))
            .unwrap_or(4 * d);
        blocks.push(Block {
            ln_1: take_norm(t, &format!("{p}.ln_1"), d, eps)?,
            attn_w: take_matrix(t, &format!("{p}.attn.c_attn.weight"), (d, 3 * d))?,
            attn_b: take_vector(t, &format!("{p}.attn.c_attn.bias"), 3 * d)?,
            attn_proj_w: take_matrix(t, &format!("{p}.attn.c_proj.weight"), (d, d))?,
            attn_proj_b: take_vector(t, &format!("{p}.attn.c_proj.bias"), d)?,
            ln_2: take_norm(t, &format!("{p}.ln_2"), d, eps)?,
            fc_w: take_matrix(t, &format!("{p}.mlp.c_fc.weight"), (d, inner))?,
            fc_b: take_vector(t, &format!("{p}.mlp.c_fc.bias"), inner)?,
            mlp_proj_w: take_matrix(t, &format!("{p}.mlp.c_proj.weight"), (inner, d))?,
            mlp_proj_b: take_vector(t, &format!("{p}.mlp.c_proj.bias"), d)?,
        });
    }
    let ln_f = take_norm(t, "ln_f", d, eps)?;
    let lm_head = match t.remove("lm_head.weight") {
        Some((dims, data)) => {
            let head = Array2::from_shape_vec((dims[0], dims.get(1).copied().unwrap_or(0)), data)
                .map_err(|e| format!("lm_head.weight: {e}"))?;
            (head != wte).then_some(head)
        }
        None => None,
    };
    Ok(Gpt2Weights {
        wte,
        wpe,
        blocks,
        ln_f,
        lm_head,
    })
}

const TOY_WORDS: &[&str] = &[
    "Word:", "Label:", "Sentence:", "Question:", "Label", "Word", "Sentence", "Question",
    " capital", " color", " question", " emotion", " positive", " negative", " subject", " verb",
    " object", " foo", " bar", " the", " of", " is", " a", " and", " to", " in", " what", " What",
    " Who", " who", " you", " I", " my", " The", " Please", " classify", " identify", " given",
    " city", " country",
];

fn toy_vocab() -> GreedyVocab {
    let mut words: Vec<String> = TOY_WORDS.iter().map(|s| s.to_string()).collect();
    for line in crate::datasets::CAPITALS_JSONL
        .lines()
        .chain(crate::datasets::COLORS_JSONL.lines())
    {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(line) {
            for key in ["input", "label"] {
                if let Some(s) = v[key].as_str() {
                    words.push(s.to_string());
                    words.push(format!(" {s}"));
                }
            }
        }
    }
    GreedyVocab::new(words)
}
