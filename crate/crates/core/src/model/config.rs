use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Shape and seed of a [`ReferenceModel`](super::ReferenceModel).
///
/// Serialized as a `key = value` text file:
///
/// ```text
/// # comments start with '#'
/// num_layers = 12
/// hidden_dim = 64
/// num_heads = 4
/// ffn_dim = 256
/// vocab_size = 256
/// max_seq_len = 512
/// seed = 0
/// ```
///
/// Keys may appear in any order; omitted keys take the defaults above.
/// Unknown or repeated keys are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 12,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size: 256,
            max_seq_len: 512,
            seed: 0,
        }
    }
}

const KEYS: [&str; 7] = [
    "num_layers",
    "hidden_dim",
    "num_heads",
    "ffn_dim",
    "vocab_size",
    "max_seq_len",
    "seed",
];

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_layers < 2 {
            return fail(format!("num_layers must be >= 2, got {}", self.num_layers));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 {
            return fail("hidden_dim and num_heads must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!(
                "head_dim {} must be even for rotary",
                self.head_dim()
            ));
        }
        if self.ffn_dim == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return fail("ffn_dim, vocab_size and max_seq_len must be positive".into());
        }
        Ok(())
    }

    /// Parse the text form. The result is validated.
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut cfg = Self::default();
        let mut seen = [false; KEYS.len()];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| ModelError::ConfigParse {
                line: lineno + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let idx = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| parse_err(format!("unknown key `{key}`")))?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(parse_err(format!("duplicate key `{key}`")));
            }
            let n: u64 = value.parse().map_err(|_| {
                parse_err(format!(
                    "`{key}` expects an unsigned integer, got `{value}`"
                ))
            })?;
            let as_usize = || {
                usize::try_from(n)
                    .ok()
                    .filter(|&v| v <= u32::MAX as usize)
                    .ok_or_else(|| parse_err(format!("`{key}` out of range")))
            };
            match key {
                "num_layers" => cfg.num_layers = as_usize()?,
                "hidden_dim" => cfg.hidden_dim = as_usize()?,
                "num_heads" => cfg.num_heads = as_usize()?,
                "ffn_dim" => cfg.ffn_dim = as_usize()?,
                "vocab_size" => cfg.vocab_size = as_usize()?,
                "max_seq_len" => cfg.max_seq_len = as_usize()?,
                "seed" => cfg.seed = n,
                _ => unreachable!(),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("num_layers", self.num_layers as u64),
            ("hidden_dim", self.hidden_dim as u64),
            ("num_heads", self.num_heads as u64),
            ("ffn_dim", self.ffn_dim as u64),
            ("vocab_size", self.vocab_size as u64),
            ("max_seq_len", self.max_seq_len as u64),
            ("seed", self.seed),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
