//! Tiny decoder-only transformer exposing every layer's residual stream.
//!
//! Pre-norm blocks, learned absolute positional embeddings, GELU MLPs.
//! Every forward pass returns a [`LayerTrace`] with the residual stream
//! after each block (index 0 = embeddings), and hidden states at any layer
//! can be replaced by a patch, which is how constituent-aware pooling is
//! evaluated.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::util::derive_seed;

/// Token identifier in the generator vocabulary.
pub type TokenId = u32;

/// Additive pre-softmax value for masked attention edges.
const MASK_NEG: Scalar = -1e30;

const CHECKPOINT_VERSION: u32 = 1;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
}

impl TransformerConfig {
    /// Desk-scale default: 4 layers, 64-wide, 4 heads.
    pub fn desk_default(vocab_size: usize) -> Self {
        TransformerConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_mlp: 256,
            vocab_size,
            max_seq: 64,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_mlp,
            self.vocab_size,
            self.max_seq,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::config("all model dimensions must be >= 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// A plain (off-tape) parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<Scalar>,
}

impl Param {
    fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            shape,
            values: vec![0.0; n],
        }
    }

    fn randn(shape: Vec<usize>, std: Scalar, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| (normal.sample(rng) as Scalar) * std)
            .collect();
        Param { shape, values }
    }

    fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            shape,
            values: vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone)]
struct BlockParams {
    ln1_gain: Param,
    ln1_bias: Param,
    wq: Param,
    wk: Param,
    wv: Param,
    wo: Param,
    ln2_gain: Param,
    ln2_bias: Param,
    w_up: Param,
    b_up: Param,
    w_down: Param,
    b_down: Param,
}

/// The model: config plus parameters. Read-only during evaluation; training
/// mutates parameters through [`Transformer::params_mut`].
#[derive(Debug, Clone)]
pub struct Transformer {
    cfg: TransformerConfig,
    tok_emb: Param,
    pos_emb: Param,
    blocks: Vec<BlockParams>,
    ln_f_gain: Param,
    ln_f_bias: Param,
    w_out: Param,
}

/// Tape-resident copies of the parameters for one tape's lifetime.
pub struct ModelLeaves {
    tape: Tape,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<BlockLeaves>,
    ln_f_gain: Tensor,
    ln_f_bias: Tensor,
    w_out: Tensor,
}

struct BlockLeaves {
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    w_up: Tensor,
    b_up: Tensor,
    w_down: Tensor,
    b_down: Tensor,
}

impl ModelLeaves {
    /// All parameter tensors in declaration order, aligned with
    /// [`Transformer::params`].
    pub fn all(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            v.extend([
                &b.ln1_gain,
                &b.ln1_bias,
                &b.wq,
                &b.wk,
                &b.wv,
                &b.wo,
                &b.ln2_gain,
                &b.ln2_bias,
                &b.w_up,
                &b.b_up,
                &b.w_down,
                &b.b_down,
            ]);
        }
        v.extend([&self.ln_f_gain, &self.ln_f_bias, &self.w_out]);
        v
    }
}

/// Replacement hidden states, keyed by layer index into `hidden`.
pub type PatchMap = BTreeMap<usize, PatchTensor>;

/// A raw `[rows, d_model]` hidden-state replacement.
#[derive(Debug, Clone)]
pub struct PatchTensor {
    pub rows: usize,
    pub values: Vec<Scalar>,
}

/// Per-layer residual stream of one forward pass.
///
/// `hidden[k]` is the tensor consumed by block `k+1` (so a patched layer
/// stores its patch), `hidden[0]` is the embedding output, and the block
/// contribution tensors satisfy
/// `hidden[k+1] = hidden[k] + attn_out[k] + mlp_out[k]` whenever layer `k+1`
/// was not patched.
pub struct LayerTrace {
    pub hidden: Vec<Tensor>,
    pub attn_out: Vec<Tensor>,
    pub mlp_out: Vec<Tensor>,
    pub word_spans: Vec<(usize, usize)>,
}

impl LayerTrace {
    pub fn n_layers(&self) -> usize {
        self.hidden.len() - 1
    }
}

impl Transformer {
    /// Fresh model with N(0, 0.02) weights, unit LN gains, zero biases.
    pub fn new(cfg: TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model-init"));
        let d = cfg.d_model;
        let std = 0.02;
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1_gain: Param::ones(vec![d]),
                ln1_bias: Param::zeros(vec![d]),
                wq: Param::randn(vec![d, d], std, &mut rng),
                wk: Param::randn(vec![d, d], std, &mut rng),
                wv: Param::randn(vec![d, d], std, &mut rng),
                wo: Param::randn(vec![d, d], std, &mut rng),
                ln2_gain: Param::ones(vec![d]),
                ln2_bias: Param::zeros(vec![d]),
                w_up: Param::randn(vec![d, cfg.d_mlp], std, &mut rng),
                b_up: Param::zeros(vec![cfg.d_mlp]),
                w_down: Param::randn(vec![cfg.d_mlp, d], std, &mut rng),
                b_down: Param::zeros(vec![d]),
            })
            .collect();
        Ok(Transformer {
            tok_emb: Param::randn(vec![cfg.vocab_size, d], std, &mut rng),
            pos_emb: Param::randn(vec![cfg.max_seq, d], std, &mut rng),
            blocks,
            ln_f_gain: Param::ones(vec![d]),
            ln_f_bias: Param::zeros(vec![d]),
            w_out: Param::randn(vec![d, cfg.vocab_size], std, &mut rng),
            cfg,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// Named parameters in declaration order.
    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut v: Vec<(String, &Param)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend([
                (format!("block{i}.ln1.gain"), &b.ln1_gain),
                (format!("block{i}.ln1.bias"), &b.ln1_bias),
                (format!("block{i}.attn.wq"), &b.wq),
                (format!("block{i}.attn.wk"), &b.wk),
                (format!("block{i}.attn.wv"), &b.wv),
                (format!("block{i}.attn.wo"), &b.wo),
                (format!("block{i}.ln2.gain"), &b.ln2_gain),
                (format!("block{i}.ln2.bias"), &b.ln2_bias),
                (format!("block{i}.mlp.w_up"), &b.w_up),
                (format!("block{i}.mlp.b_up"), &b.b_up),
                (format!("block{i}.mlp.w_down"), &b.w_down),
                (format!("block{i}.mlp.b_down"), &b.b_down),
            ]);
        }
        v.extend([
            ("ln_f.gain".into(), &self.ln_f_gain),
            ("ln_f.bias".into(), &self.ln_f_bias),
            ("w_out".into(), &self.w_out),
        ]);
        v
    }

    /// Mutable parameter views, same order as [`Transformer::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            v.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w_up,
                &mut b.b_up,
                &mut b.w_down,
                &mut b.b_down,
            ]);
        }
        v.extend([&mut self.ln_f_gain, &mut self.ln_f_bias, &mut self.w_out]);
        v
    }

    /// Total number of scalar parameters.
    pub fn n_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.values.len()).sum()
    }

    /// Reads one scalar in the flat-index view of the parameters
    /// (declaration order).
    pub fn get_flat(&self, mut idx: usize) -> Scalar {
        for (_, p) in self.params() {
            if idx < p.values.len() {
                return p.values[idx];
            }
            idx -= p.values.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Writes one scalar in the flat-index view of the parameters.
    pub fn set_flat(&mut self, mut idx: usize, v: Scalar) {
        for p in self.params_mut() {
            if idx < p.values.len() {
                p.values[idx] = v;
                return;
            }
            idx -= p.values.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Overwrites all parameters from one flat slice in declaration order.
    pub fn set_all_flat(&mut self, flat: &[Scalar]) {
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.values.len();
            p.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// Inserts all parameters as leaves on `tape`.
    pub fn leaves(&self, tape: &Tape) -> Result<ModelLeaves> {
        let leaf = |p: &Param| tape.leaf(p.values.clone(), p.shape.clone());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push(BlockLeaves {
                ln1_gain: leaf(&b.ln1_gain)?,
                ln1_bias: leaf(&b.ln1_bias)?,
                wq: leaf(&b.wq)?,
                wk: leaf(&b.wk)?,
                wv: leaf(&b.wv)?,
                wo: leaf(&b.wo)?,
                ln2_gain: leaf(&b.ln2_gain)?,
                ln2_bias: leaf(&b.ln2_bias)?,
                w_up: leaf(&b.w_up)?,
                b_up: leaf(&b.b_up)?,
                w_down: leaf(&b.w_down)?,
                b_down: leaf(&b.b_down)?,
            });
        }
        Ok(ModelLeaves {
            tape: tape.clone(),
            tok_emb: leaf(&self.tok_emb)?,
            pos_emb: leaf(&self.pos_emb)?,
            blocks,
            ln_f_gain: leaf(&self.ln_f_gain)?,
            ln_f_bias: leaf(&self.ln_f_bias)?,
            w_out: leaf(&self.w_out)?,
        })
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::contract("forward: empty token sequence"));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::contract(format!(
                "input length {} exceeds max_seq {}; refusing to truncate",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        for &t in tokens {
            if t as usize >= self.cfg.vocab_size {
                return Err(Error::IndexOutOfRange {
                    what: "token id",
                    index: t as usize,
                    bound: self.cfg.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Forward pass on an existing tape (training path).
    ///
    /// `patches` replaces the hidden state at the given layer index before
    /// the next block consumes it; all later blocks then run on the patched
    /// (possibly shorter) sequence. Returns `[seq, vocab]` logits and the
    /// trace.
    pub fn forward_on(
        &self,
        leaves: &ModelLeaves,
        tokens: &[TokenId],
        word_spans: &[(usize, usize)],
        patches: &PatchMap,
    ) -> Result<(Tensor, LayerTrace)> {
        self.check_tokens(tokens)?;
        let d = self.cfg.d_model;
        for (&layer, patch) in patches {
            if layer > self.cfg.n_layers {
                return Err(Error::IndexOutOfRange {
                    what: "patch layer",
                    index: layer,
                    bound: self.cfg.n_layers + 1,
                });
            }
            if patch.rows == 0
                || patch.rows > self.cfg.max_seq
                || patch.values.len() != patch.rows * d
            {
                return Err(Error::contract(format!(
                    "patch at layer {layer} has {} values for {} rows of width {d}",
                    patch.values.len(),
                    patch.rows
                )));
            }
        }
        let tape = &leaves.tape;

        let token_rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let embedded = leaves
            .tok_emb
            .gather_rows(&token_rows)?
            .add(&leaves.pos_emb.gather_rows(&positions)?)?;

        let apply_patch = |layer: usize, computed: Tensor| -> Result<Tensor> {
            match patches.get(&layer) {
                Some(p) => tape.leaf(p.values.clone(), vec![p.rows, d]),
                None => Ok(computed),
            }
        };

        let mut hidden = Vec::with_capacity(self.cfg.n_layers + 1);
        let mut attn_outs = Vec::with_capacity(self.cfg.n_layers);
        let mut mlp_outs = Vec::with_capacity(self.cfg.n_layers);
        hidden.push(apply_patch(0, embedded)?);

        for (b, block) in leaves.blocks.iter().enumerate() {
            let x = hidden.last().expect("nonempty hidden").clone();
            let seq = x.shape()[0];
            let mask = causal_mask(tape, seq)?;

            let a = x.layer_norm(&block.ln1_gain, &block.ln1_bias)?;
            let q = a.matmul(&block.wq)?;
            let k = a.matmul(&block.wk)?;
            let v = a.matmul(&block.wv)?;
            let dh = d / self.cfg.n_heads;
            let scale = 1.0 / (dh as Scalar).sqrt();
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            for h in 0..self.cfg.n_heads {
                let qh = q.slice_cols(h * dh, dh)?;
                let kh = k.slice_cols(h * dh, dh)?;
                let vh = v.slice_cols(h * dh, dh)?;
                let scores = qh
                    .matmul(&kh.transpose()?)?
                    .mul_scalar(scale)
                    .add(&mask)?;
                let probs = scores.softmax(1)?;
                heads.push(probs.matmul(&vh)?);
            }
            let attn = Tensor::concat_cols(&heads)?.matmul(&block.wo)?;
            let x_mid = x.add(&attn)?;

            let m = x_mid.layer_norm(&block.ln2_gain, &block.ln2_bias)?;
            let mlp = m
                .matmul(&block.w_up)?
                .add_rowvec(&block.b_up)?
                .gelu()
                .matmul(&block.w_down)?
                .add_rowvec(&block.b_down)?;
            let x_next = x_mid.add(&mlp)?;

            attn_outs.push(attn);
            mlp_outs.push(mlp);
            hidden.push(apply_patch(b + 1, x_next)?);
        }

        let last = hidden.last().expect("nonempty hidden");
        let final_norm = last.layer_norm(&leaves.ln_f_gain, &leaves.ln_f_bias)?;
        let logits = final_norm.matmul(&leaves.w_out)?;

        Ok((
            logits,
            LayerTrace {
                hidden,
                attn_out: attn_outs,
                mlp_out: mlp_outs,
                word_spans: word_spans.to_vec(),
            },
        ))
    }

    /// Inference-mode forward on a fresh tape.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        word_spans: &[(usize, usize)],
        patches: &PatchMap,
    ) -> Result<(Tensor, LayerTrace)> {
        let tape = Tape::inference();
        let leaves = self.leaves(&tape)?;
        self.forward_on(&leaves, tokens, word_spans, patches)
    }

    /// Greedy next-token choice at the final position; exact ties go to the
    /// lowest token id.
    pub fn generate_next(&self, tokens: &[TokenId]) -> Result<TokenId> {
        let (logits, _) = self.forward(tokens, &[], &PatchMap::new())?;
        let v = self.cfg.vocab_size;
        let last = &logits.values()[(tokens.len() - 1) * v..tokens.len() * v];
        Ok(argmax_lowest(last) as TokenId)
    }

    /// Writes a versioned JSON checkpoint; values round-trip bit-exactly.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            params: self
                .params()
                .into_iter()
                .map(|(name, p)| NamedParam {
                    name,
                    param: p.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&file)?;
        crate::data::io::write_atomic(path, json.as_bytes())?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Transformer::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&text)?;
        if file.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                file.format_version
            )));
        }
        let mut model = Transformer::new(file.config, 0)?;
        let expected: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
        if expected.len() != file.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                file.params.len()
            )));
        }
        for (slot, (name, stored)) in model
            .params_mut()
            .into_iter()
            .zip(expected.iter().zip(file.params.into_iter()))
        {
            if *name != stored.name || slot.shape != stored.param.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch at {name}: stored {} {:?}",
                    stored.name, stored.param.shape
                )));
            }
            slot.values = stored.param.values;
        }
        Ok(model)
    }
}

/// Index of the maximum value, first occurrence on ties.
pub fn argmax_lowest(xs: &[Scalar]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn causal_mask(tape: &Tape, seq: usize) -> Result<Tensor> {
    let mut m = vec![0.0; seq * seq];
    for i in 0..seq {
        for j in (i + 1)..seq {
            m[i * seq + j] = MASK_NEG;
        }
    }
    tape.leaf(m, vec![seq, seq])
}

#[derive(Serialize, Deserialize)]
struct NamedParam {
    name: String,
    #[serde(flatten)]
    param: Param,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: TransformerConfig,
    params: Vec<NamedParam>,
}

/// Scrambles parameters with a seeded uniform draw; diagnostic helper for
/// chance-level baselines.
pub fn randomize_params(model: &mut Transformer, seed: u64, scale: Scalar) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "randomize"));
    for p in model.params_mut() {
        for v in p.values.iter_mut() {
            *v = (rng.gen::<f64>() as Scalar * 2.0 - 1.0) * scale;
        }
    }
}
