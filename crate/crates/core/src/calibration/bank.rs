//! Router bank and its binary checkpoint format.
//!
//! All integers are `u32` and all floats `f32`, little-endian:
//!
//! ```text
//! offset  field
//! 0       magic "TIDE"
//! 4       version (1)
//! 8       hidden_dim d
//! 12      bottleneck b
//! 16      checkpoint interval c
//! 20      tau
//! 24      rmsnorm eps
//! 28      num_layers L
//! 32      n_checkpoints n
//! 36      n × { layer, W_down [b × d] row-major, W_up [b] }
//! end-4   CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Total size is `40 + n · (4 + 4 · (d·b + b))` bytes.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::router_ops::Router;

pub const BANK_MAGIC: [u8; 4] = *b"TIDE";
pub const BANK_VERSION: u32 = 1;

const HEADER_LEN: usize = 36;
const CRC_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("bad magic {found:?}, expected \"TIDE\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported bank version {0} (this build reads version {BANK_VERSION})")]
    UnsupportedVersion(u32),
    #[error("bank file truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("bank dimensions inconsistent with its contents: {0}")]
    DimensionMismatch(String),
    #[error("bank checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("invalid bank: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Shape and calibration settings shared by every router in a bank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankMeta {
    pub hidden_dim: usize,
    pub bottleneck: usize,
    pub interval: usize,
    pub tau: f32,
    pub rmsnorm_eps: f32,
    pub num_layers: usize,
}

impl BankMeta {
    fn validate(&self) -> Result<(), BankError> {
        let bad = |m: String| Err(BankError::Invalid(m));
        if self.hidden_dim == 0 || self.bottleneck == 0 {
            return bad("hidden_dim and bottleneck must be positive".into());
        }
        if self.interval == 0 {
            return bad("checkpoint interval must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau {} outside (0, 1)", self.tau));
        }
        if !(self.rmsnorm_eps.is_finite() && self.rmsnorm_eps >= 0.0) {
            return bad(format!(
                "rmsnorm eps {} is not a finite non-negative value",
                self.rmsnorm_eps
            ));
        }
        if self.num_layers < 2 {
            return bad(format!("num_layers {} < 2", self.num_layers));
        }
        Ok(())
    }
}

/// Trained routers keyed by checkpoint layer, in ascending layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterBank {
    meta: BankMeta,
    routers: Vec<Router>,
}

impl RouterBank {
    /// Routers must match `meta` in shape, sit on the checkpoint grid
    /// (`layer % interval == interval - 1`, `layer < num_layers`) and be
    /// strictly increasing by layer.
    pub fn new(meta: BankMeta, routers: Vec<Router>) -> Result<Self, BankError> {
        meta.validate()?;
        if routers.is_empty() {
            return Err(BankError::Invalid("bank holds no routers".into()));
        }
        for (i, r) in routers.iter().enumerate() {
            if r.dim() != meta.hidden_dim || r.bottleneck() != meta.bottleneck {
                return Err(BankError::DimensionMismatch(format!(
                    "router {} is {}×{}, bank declares {}×{}",
                    r.layer,
                    r.bottleneck(),
                    r.dim(),
                    meta.bottleneck,
                    meta.hidden_dim
                )));
            }
            if r.layer >= meta.num_layers || r.layer % meta.interval != meta.interval - 1 {
                return Err(BankError::Invalid(format!(
                    "layer {} is not a checkpoint for L={} c={}",
                    r.layer, meta.num_layers, meta.interval
                )));
            }
            if i > 0 && routers[i - 1].layer >= r.layer {
                return Err(BankError::Invalid(
                    "router layers must be strictly increasing".into(),
                ));
            }
            if !r.w_down.iter().chain(&r.w_up).all(|v| v.is_finite()) {
                return Err(BankError::Invalid(format!(
                    "router {} has non-finite weights",
                    r.layer
                )));
            }
        }
        Ok(Self { meta, routers })
    }

    /// Fixture bank with hand-set routers: those listed in `fire` score
    /// close to 1 on any hidden state that is not near-zero in its first
    /// `bottleneck / 2` coordinates, the rest score at most 0.5. Only
    /// meaningful for exit thresholds at or above 0.5.
    pub fn rigged(meta: BankMeta, layers: &[usize], fire: &[usize]) -> Result<Self, BankError> {
        const GAIN: f32 = 50.0;
        let (d, b) = (meta.hidden_dim, meta.bottleneck);
        let routers = layers
            .iter()
            .map(|&layer| {
                // Paired rows ±GAIN·e_j make Σ silu(z) + silu(−z) = Σ z·tanh(z/2) ≥ 0.
                let mut w_down = vec![0.0f32; b * d];
                for row in 0..b {
                    let col = (row / 2) % d;
                    w_down[row * d + col] = if row % 2 == 0 { GAIN } else { -GAIN };
                }
                let sign = if fire.contains(&layer) { 1.0 } else { -1.0 };
                Router::new(layer, d, w_down, vec![sign; b])
            })
            .collect();
        Self::new(meta, routers)
    }

    pub fn meta(&self) -> &BankMeta {
        &self.meta
    }

    pub fn routers(&self) -> &[Router] {
        &self.routers
    }

    pub fn layers(&self) -> Vec<usize> {
        self.routers.iter().map(|r| r.layer).collect()
    }

    pub fn router(&self, layer: usize) -> Option<&Router> {
        self.routers.iter().find(|r| r.layer == layer)
    }

    /// Exact encoded size for the given shape.
    pub fn encoded_len(hidden_dim: usize, bottleneck: usize, n_checkpoints: usize) -> usize {
        HEADER_LEN + n_checkpoints * (4 + 4 * (hidden_dim * bottleneck + bottleneck)) + CRC_LEN
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.meta;
        let mut buf = Vec::with_capacity(Self::encoded_len(
            m.hidden_dim,
            m.bottleneck,
            self.routers.len(),
        ));
        buf.extend_from_slice(&BANK_MAGIC);
        for v in [
            BANK_VERSION,
            m.hidden_dim as u32,
            m.bottleneck as u32,
            m.interval as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&m.tau.to_le_bytes());
        buf.extend_from_slice(&m.rmsnorm_eps.to_le_bytes());
        buf.extend_from_slice(&(m.num_layers as u32).to_le_bytes());
        buf.extend_from_slice(&(self.routers.len() as u32).to_le_bytes());
        for r in &self.routers {
            buf.extend_from_slice(&(r.layer as u32).to_le_bytes());
            for w in r.w_down.iter().chain(&r.w_up) {
                buf.extend_from_slice(&w.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    /// Decode a bank, checking in order: magic, version, declared size
    /// against actual size, checksum, then semantic validity.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BankError> {
        let actual = bytes.len() as u64;
        let truncated = |expected: usize| BankError::Truncated {
            expected: expected as u64,
            actual,
        };
        if bytes.len() < 4 {
            return Err(truncated(HEADER_LEN + CRC_LEN));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != BANK_MAGIC {
            return Err(BankError::BadMagic { found: magic });
        }
        if bytes.len() < 8 {
            return Err(truncated(HEADER_LEN + CRC_LEN));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != BANK_VERSION {
            return Err(BankError::UnsupportedVersion(version));
        }
        if bytes.len() < HEADER_LEN + CRC_LEN {
            return Err(truncated(HEADER_LEN + CRC_LEN));
        }
        let (d, b) = (u32_at(8) as u64, u32_at(12) as u64);
        let n = u32_at(32) as u64;
        let expected = (d * b + b)
            .checked_mul(4)
            .and_then(|w| w.checked_add(4))
            .and_then(|per| per.checked_mul(n))
            .and_then(|body| body.checked_add((HEADER_LEN + CRC_LEN) as u64))
            .ok_or_else(|| {
                BankError::DimensionMismatch(format!("declared shape d={d} b={b} n={n} overflows"))
            })?;
        if actual < expected {
            return Err(BankError::Truncated { expected, actual });
        }
        if actual > expected {
            return Err(BankError::DimensionMismatch(format!(
                "header declares d={d} b={b} n={n} ({expected} bytes) but file holds {actual}"
            )));
        }
        let body = &bytes[..bytes.len() - CRC_LEN];
        let stored = u32_at(bytes.len() - CRC_LEN);
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(BankError::ChecksumMismatch { stored, computed });
        }

        let meta = BankMeta {
            hidden_dim: d as usize,
            bottleneck: b as usize,
            interval: u32_at(16) as usize,
            tau: f32_at(20),
            rmsnorm_eps: f32_at(24),
            num_layers: u32_at(28) as usize,
        };
        let (d, b) = (d as usize, b as usize);
        let mut off = HEADER_LEN;
        let read_f32s = |off: &mut usize, count: usize| {
            let v: Vec<f32> = bytes[*off..*off + 4 * count]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *off += 4 * count;
            v
        };
        let mut routers = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let layer = u32_at(off) as usize;
            off += 4;
            let w_down = read_f32s(&mut off, d * b);
            let w_up = read_f32s(&mut off, b);
            routers.push(Router::new(layer, d, w_down, w_up));
        }
        Self::new(meta, routers)
    }

    pub fn save(&self, path: &Path) -> Result<(), BankError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BankError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
