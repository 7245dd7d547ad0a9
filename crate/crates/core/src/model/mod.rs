//! A tiny deterministic decoder-only transformer.
//!
//! Pre-norm blocks (RMSNorm → multi-head causal attention with rotary
//! position embedding → residual, RMSNorm → SwiGLU → residual), a final
//! RMSNorm and an untied LM head. Tokens are raw bytes by default.
//!
//! `hidden_states[0]` is the raw embedding lookup (no norm applied);
//! `hidden_states[k + 1]` is the residual stream after block `k`.

mod cache;
mod config;

pub use cache::KVCache;
pub use config::ModelConfig;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;
use thiserror::Error;

use crate::tensor::{self, dot, linear_row, rmsnorm_row, silu_scalar, Tensor, TensorError};

/// Epsilon used by every RMSNorm in the model and by the routers.
pub const RMSNORM_EPS: f32 = 1e-6;

const ROPE_BASE: f32 = 10_000.0;

pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("model config line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },
    #[error("token id {token} is outside the vocabulary of {vocab}")]
    TokenOutOfVocab { token: TokenId, vocab: usize },
    #[error("sequence overflow: {cached} cached + {new} new tokens exceeds max_seq_len {max}")]
    SequenceOverflow {
        cached: usize,
        new: usize,
        max: usize,
    },
    #[error("forward called with an empty token sequence")]
    EmptyInput,
    #[error("KV cache was built for a different model shape")]
    CacheMismatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    attn_norm: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ffn_norm: Tensor,
    w_gate: Tensor,
    w_up: Tensor,
    w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    config: ModelConfig,
    embedding: Tensor,
    blocks: Vec<Block>,
    final_norm: Tensor,
    lm_head: Tensor,
    rope_cos: Vec<f32>,
    rope_sin: Vec<f32>,
}

/// Result of one forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[seq × vocab]`
    pub logits: Tensor,
    /// `L + 1` tensors of `[seq × d]` when capture was requested, else empty.
    pub hidden_states: Vec<Tensor>,
}

impl ReferenceModel {
    /// Build a model whose weights are a pure function of `config`.
    ///
    /// Every matrix is filled from one splitmix64 stream with N(0, 0.02/√L),
    /// in declaration order: embedding, then per block wq, wk, wv, wo,
    /// w_gate, w_up, w_down, then the LM head. Norm gains start at 1.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let std = 0.02 / (config.num_layers as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("std is positive");
        let mut rng = SplitMix64::seed_from_u64(config.seed);
        let mut fill = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Tensor::matrix(rows, cols, data)
        };

        let embedding = fill(config.vocab_size, d);
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                attn_norm: Tensor::vector(vec![1.0; d]),
                wq: fill(d, d),
                wk: fill(d, d),
                wv: fill(d, d),
                wo: fill(d, d),
                ffn_norm: Tensor::vector(vec![1.0; d]),
                w_gate: fill(f, d),
                w_up: fill(f, d),
                w_down: fill(d, f),
            })
            .collect();
        let lm_head = fill(config.vocab_size, d);

        let half = config.head_dim() / 2;
        let mut rope_cos = Vec::with_capacity(config.max_seq_len * half);
        let mut rope_sin = Vec::with_capacity(config.max_seq_len * half);
        for pos in 0..config.max_seq_len {
            for i in 0..half {
                let freq = ROPE_BASE.powf(-((2 * i) as f32) / config.head_dim() as f32);
                let angle = pos as f32 * freq;
                rope_cos.push(angle.cos());
                rope_sin.push(angle.sin());
            }
        }

        Ok(Self {
            config,
            embedding,
            blocks,
            final_norm: Tensor::vector(vec![1.0; d]),
            lm_head,
            rope_cos,
            rope_sin,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn final_norm_gain(&self) -> &Tensor {
        &self.final_norm
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    pub fn lm_head(&self) -> &Tensor {
        &self.lm_head
    }

    pub fn new_cache(&self) -> KVCache {
        KVCache::new(&self.config)
    }

    /// Final norm followed by the LM head, applied to any layer's hidden
    /// state. This is the early-exit logit path; the baseline logits of
    /// [`forward`](Self::forward) are produced by the same function.
    pub fn lm_head_from_hidden(&self, h: &Tensor) -> Result<Tensor, ModelError> {
        let d = self.config.hidden_dim;
        if h.last_dim() != d || h.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "lm_head_from_hidden",
                lhs: h.shape().to_vec(),
                rhs: vec![d],
            }
            .into());
        }
        let normed = tensor::rmsnorm(h, Some(&self.final_norm), RMSNORM_EPS)?;
        Ok(tensor::matmul_transposed(&normed, &self.lm_head)?)
    }

    /// Logits for a single hidden row. Bitwise equal to the matching row of
    /// [`lm_head_from_hidden`](Self::lm_head_from_hidden).
    pub fn lm_head_row(&self, h: &[f32], out: &mut [f32]) {
        let mut normed = vec![0.0; h.len()];
        rmsnorm_row(h, Some(self.final_norm.data()), RMSNORM_EPS, &mut normed);
        linear_row(&normed, self.lm_head.data(), out);
    }

    /// Run `tokens` through every layer, appending their keys and values to
    /// `cache`.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        cache: &mut KVCache,
        capture_hidden: bool,
    ) -> Result<ForwardOutput, ModelError> {
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if !cache.matches(cfg) {
            return Err(ModelError::CacheMismatch);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfVocab {
                token: bad,
                vocab: cfg.vocab_size,
            });
        }
        let start = cache.len();
        if start + tokens.len() > cfg.max_seq_len {
            return Err(ModelError::SequenceOverflow {
                cached: start,
                new: tokens.len(),
                max: cfg.max_seq_len,
            });
        }

        let seq = tokens.len();
        let mut h = Vec::with_capacity(seq * d);
        for &t in tokens {
            h.extend_from_slice(self.embedding.row(t as usize));
        }

        let mut hidden_states = Vec::new();
        if capture_hidden {
            hidden_states.reserve(cfg.num_layers + 1);
            hidden_states.push(Tensor::matrix(seq, d, h.clone()));
        }

        let mut scratch = Scratch::new(cfg);
        for (layer, block) in self.blocks.iter().enumerate() {
            self.block_forward(layer, block, &mut h, start, cache, &mut scratch);
            if capture_hidden {
                hidden_states.push(Tensor::matrix(seq, d, h.clone()));
            }
        }

        let logits = self.lm_head_from_hidden(&Tensor::matrix(seq, d, h))?;
        if !logits.all_finite() {
            return Err(TensorError::NonFinite { op: "forward" }.into());
        }
        Ok(ForwardOutput {
            logits,
            hidden_states,
        })
    }

    fn block_forward(
        &self,
        layer: usize,
        block: &Block,
        h: &mut [f32],
        start: usize,
        cache: &mut KVCache,
        s: &mut Scratch,
    ) {
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();

        // Project and cache keys/values for every new position first; each
        // query below only reads positions at or before its own.
        let seq = h.len() / d;
        let mut queries = vec![0.0f32; seq * d];
        for t in 0..seq {
            let pos = start + t;
            rmsnorm_row(
                &h[t * d..(t + 1) * d],
                Some(block.attn_norm.data()),
                RMSNORM_EPS,
                &mut s.x,
            );
            let q = &mut queries[t * d..(t + 1) * d];
            linear_row(&s.x, block.wq.data(), q);
            linear_row(&s.x, block.wk.data(), &mut s.k);
            linear_row(&s.x, block.wv.data(), &mut s.v);
            self.apply_rope(q, pos);
            self.apply_rope(&mut s.k, pos);
            cache.push(layer, &s.k, &s.v);
        }

        let keys = cache.keys(layer);
        let values = cache.values(layer);
        for t in 0..seq {
            let pos = start + t;
            let span = pos + 1;
            s.attn.fill(0.0);
            for head in 0..cfg.num_heads {
                let cols = head * hd..(head + 1) * hd;
                let q = &queries[t * d + cols.start..t * d + cols.end];
                let scores = &mut s.scores[..span];
                for (j, sc) in scores.iter_mut().enumerate() {
                    *sc = dot(q, &keys[j * d + cols.start..j * d + cols.end]) * scale;
                }
                tensor::softmax_in_place(scores);
                let out = &mut s.attn[cols.clone()];
                for (j, &w) in scores.iter().enumerate() {
                    tensor::axpy(w, &values[j * d + cols.start..j * d + cols.end], out);
                }
            }
            linear_row(&s.attn, block.wo.data(), &mut s.proj);
            let row = &mut h[t * d..(t + 1) * d];
            for (r, p) in row.iter_mut().zip(&s.proj) {
                *r += p;
            }

            rmsnorm_row(row, Some(block.ffn_norm.data()), RMSNORM_EPS, &mut s.x);
            linear_row(&s.x, block.w_gate.data(), &mut s.gate);
            linear_row(&s.x, block.w_up.data(), &mut s.up);
            for (g, u) in s.gate.iter_mut().zip(&s.up) {
                *g = silu_scalar(*g) * u;
            }
            linear_row(&s.gate, block.w_down.data(), &mut s.proj);
            for (r, p) in row.iter_mut().zip(&s.proj) {
                *r += p;
            }
        }
    }

    /// Rotate each head's (i, i + half) pairs by the position angle.
    fn apply_rope(&self, x: &mut [f32], pos: usize) {
        let hd = self.config.head_dim();
        let half = hd / 2;
        let cos = &self.rope_cos[pos * half..(pos + 1) * half];
        let sin = &self.rope_sin[pos * half..(pos + 1) * half];
        for head in x.chunks_exact_mut(hd) {
            for i in 0..half {
                let (a, b) = (head[i], head[i + half]);
                head[i] = a * cos[i] - b * sin[i];
                head[i + half] = a * sin[i] + b * cos[i];
            }
        }
    }
}

struct Scratch {
    x: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    attn: Vec<f32>,
    proj: Vec<f32>,
    gate: Vec<f32>,
    up: Vec<f32>,
    scores: Vec<f32>,
}

impl Scratch {
    fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        Self {
            x: vec![0.0; d],
            k: vec![0.0; d],
            v: vec![0.0; d],
            attn: vec![0.0; d],
            proj: vec![0.0; d],
            gate: vec![0.0; cfg.ffn_dim],
            up: vec![0.0; cfg.ffn_dim],
            scores: vec![0.0; cfg.max_seq_len],
        }
    }
}
