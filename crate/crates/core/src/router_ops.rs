//! CPU reference versions of the four routing kernels: fused
//! norm-and-route scoring, stable batch compaction, exit scatter and fused
//! exit projection. Each has a composed or naive counterpart used as its
//! test oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    self, rms_scale, rmsnorm_row, sigmoid_scalar, silu_scalar, Tensor, TensorError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RouteError {
    #[error("hidden width {got} does not match router input width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("mask length {mask} does not match batch size {batch}")]
    MaskLength { mask: usize, batch: usize },
    #[error("{rows} rows supplied for {positions} positions")]
    PositionCount { rows: usize, positions: usize },
    #[error("position {position} is out of range for a batch of {batch}")]
    PositionOutOfRange { position: usize, batch: usize },
    #[error("positions must be strictly increasing (saw {prev} then {next})")]
    PositionsNotIncreasing { prev: usize, next: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Bottleneck MLP scoring convergence at one checkpoint layer:
/// `σ(W_up · SiLU(W_down · rmsnorm(h)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub layer: usize,
    /// `[bottleneck × dim]`, row-major.
    pub w_down: Vec<f32>,
    /// `[bottleneck]`
    pub w_up: Vec<f32>,
    dim: usize,
    bottleneck: usize,
}

impl Router {
    pub fn new(layer: usize, dim: usize, w_down: Vec<f32>, w_up: Vec<f32>) -> Self {
        let bottleneck = w_up.len();
        assert_eq!(
            w_down.len(),
            dim * bottleneck,
            "w_down must be bottleneck × dim"
        );
        Self {
            layer,
            w_down,
            w_up,
            dim,
            bottleneck,
        }
    }

    pub fn zeros(layer: usize, dim: usize, bottleneck: usize) -> Self {
        Self::new(
            layer,
            dim,
            vec![0.0; dim * bottleneck],
            vec![0.0; bottleneck],
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    pub fn param_count(&self) -> usize {
        self.w_down.len() + self.w_up.len()
    }

    /// Pre-sigmoid score for one row. Normalization is folded into the
    /// down-projection so no normalized copy of the row is materialized.
    #[inline]
    pub fn logit_row(&self, h: &[f32], eps: f32) -> f32 {
        let inv = rms_scale(h, eps);
        let mut acc = 0.0f32;
        for (wrow, &wu) in self.w_down.chunks_exact(self.dim).zip(&self.w_up) {
            let z = dot_scaled(h, inv, wrow);
            acc += wu * silu_scalar(z);
        }
        acc
    }

    #[inline]
    pub fn score_row(&self, h: &[f32], eps: f32) -> f32 {
        sigmoid_scalar(self.logit_row(h, eps))
    }
}

/// `Σ (h_i · inv) · w_i` with the same lane split as [`tensor::dot`], so the
/// result is bitwise equal to `dot(normalized_h, w)`.
#[inline]
fn dot_scaled(h: &[f32], inv: f32, w: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ch = h.chunks_exact(8);
    let cw = w.chunks_exact(8);
    let (rh, rw) = (ch.remainder(), cw.remainder());
    for (x, y) in ch.zip(cw) {
        for l in 0..8 {
            acc[l] += (x[l] * inv) * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in rh.iter().zip(rw) {
        tail += (x * inv) * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn check_width(h: &Tensor, router: &Router) -> Result<(), RouteError> {
    if h.last_dim() != router.dim {
        return Err(RouteError::WidthMismatch {
            expected: router.dim,
            got: h.last_dim(),
        });
    }
    Ok(())
}

/// One score per row of `h`, computed in a single pass per row with only a
/// scalar accumulator as scratch. Rows are scored in parallel; each row's
/// arithmetic is sequential, so the output does not depend on thread count.
pub fn fused_layernorm_route(
    h: &Tensor,
    router: &Router,
    eps: f32,
) -> Result<Vec<f32>, RouteError> {
    check_width(h, router)?;
    let d = router.dim;
    let mut scores = vec![0.0f32; h.rows()];
    h.data()
        .par_chunks_exact(d)
        .zip(scores.par_iter_mut())
        .for_each(|(row, s)| *s = router.score_row(row, eps));
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(TensorError::NonFinite {
            op: "fused_layernorm_route",
        }
        .into());
    }
    Ok(scores)
}

/// The same scores built from separate tensor operations:
/// rmsnorm → matmul → silu → matmul → sigmoid.
pub fn route_scores(h: &Tensor, router: &Router, eps: f32) -> Result<Vec<f32>, RouteError> {
    check_width(h, router)?;
    let rows = h.rows();
    let h2 = Tensor::new(vec![rows, router.dim], h.data().to_vec())?;
    let normed = tensor::rmsnorm(&h2, None, eps)?;
    let w_down = Tensor::matrix(router.bottleneck, router.dim, router.w_down.clone());
    let z = tensor::matmul_transposed(&normed, &w_down)?;
    let a = tensor::silu(&z);
    let w_up = Tensor::matrix(1, router.bottleneck, router.w_up.clone());
    let logits = tensor::matmul_transposed(&a, &w_up)?;
    Ok(tensor::sigmoid(&logits).into_data())
}

/// Stable partition of a batch into continuing and exiting rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactionResult {
    pub continuing: Tensor,
    pub exiting: Tensor,
    /// Original row index of each continuing row.
    pub continuing_index: Vec<usize>,
    /// Original row index of each exiting row.
    pub exiting_index: Vec<usize>,
}

/// Batches up to this size take the ballot path in [`batch_compact`].
pub const BALLOT_MAX_BATCH: usize = 32;

const WARP: usize = 32;

/// Partition rows by `exit_mask` (true = exiting), preserving relative
/// order in both partitions.
pub fn batch_compact(h: &Tensor, exit_mask: &[bool]) -> Result<CompactionResult, RouteError> {
    if exit_mask.len() <= BALLOT_MAX_BATCH {
        compact_ballot(h, exit_mask)
    } else {
        compact_prefix_sum(h, exit_mask)
    }
}

fn check_mask(h: &Tensor, exit_mask: &[bool]) -> Result<(), RouteError> {
    if exit_mask.len() != h.rows() {
        return Err(RouteError::MaskLength {
            mask: exit_mask.len(),
            batch: h.rows(),
        });
    }
    Ok(())
}

/// Ballot strategy: the mask is packed into 32-bit words; a row's slot in
/// its partition is the running offset plus the popcount of the lanes below
/// it in its word.
pub fn compact_ballot(h: &Tensor, exit_mask: &[bool]) -> Result<CompactionResult, RouteError> {
    check_mask(h, exit_mask)?;
    let batch = exit_mask.len();
    let n_exit = exit_mask.iter().filter(|&&m| m).count();
    let mut continuing_index = vec![0usize; batch - n_exit];
    let mut exiting_index = vec![0usize; n_exit];
    let (mut exit_base, mut cont_base) = (0usize, 0usize);
    for (w, lanes) in exit_mask.chunks(WARP).enumerate() {
        let ballot = lanes
            .iter()
            .enumerate()
            .fold(0u32, |acc, (lane, &m)| acc | ((m as u32) << lane));
        let active = if lanes.len() == WARP {
            u32::MAX
        } else {
            (1u32 << lanes.len()) - 1
        };
        let stay = !ballot & active;
        for lane in 0..lanes.len() {
            let below = (1u32 << lane) - 1;
            let row = w * WARP + lane;
            if ballot >> lane & 1 == 1 {
                exiting_index[exit_base + (ballot & below).count_ones() as usize] = row;
            } else {
                continuing_index[cont_base + (stay & below).count_ones() as usize] = row;
            }
        }
        exit_base += ballot.count_ones() as usize;
        cont_base += stay.count_ones() as usize;
    }
    Ok(gather(h, continuing_index, exiting_index))
}

/// Prefix-sum strategy: an exclusive scan of the mask gives each exiting
/// row its destination; continuing rows take `i - exits_before(i)`.
pub fn compact_prefix_sum(h: &Tensor, exit_mask: &[bool]) -> Result<CompactionResult, RouteError> {
    check_mask(h, exit_mask)?;
    let scan: Vec<usize> = exit_mask
        .iter()
        .scan(0usize, |acc, &m| {
            let before = *acc;
            *acc += m as usize;
            Some(before)
        })
        .collect();
    let n_exit = scan
        .last()
        .map_or(0, |&s| s + *exit_mask.last().unwrap() as usize);
    let mut continuing_index = vec![0usize; exit_mask.len() - n_exit];
    let mut exiting_index = vec![0usize; n_exit];
    for (i, (&m, &before)) in exit_mask.iter().zip(&scan).enumerate() {
        if m {
            exiting_index[before] = i;
        } else {
            continuing_index[i - before] = i;
        }
    }
    Ok(gather(h, continuing_index, exiting_index))
}

fn gather(h: &Tensor, continuing_index: Vec<usize>, exiting_index: Vec<usize>) -> CompactionResult {
    let d = h.last_dim();
    let take = |idx: &[usize]| {
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(h.row(i));
        }
        Tensor::matrix(idx.len(), d, data)
    };
    CompactionResult {
        continuing: take(&continuing_index),
        exiting: take(&exiting_index),
        continuing_index,
        exiting_index,
    }
}

fn check_positions(rows: &Tensor, positions: &[usize], out: &Tensor) -> Result<(), RouteError> {
    let n = rows.rows();
    if n != positions.len() {
        return Err(RouteError::PositionCount {
            rows: n,
            positions: positions.len(),
        });
    }
    if !positions.is_empty() && rows.last_dim() != out.last_dim() {
        return Err(RouteError::WidthMismatch {
            expected: out.last_dim(),
            got: rows.last_dim(),
        });
    }
    let batch = out.rows();
    for (j, &p) in positions.iter().enumerate() {
        if p >= batch {
            return Err(RouteError::PositionOutOfRange { position: p, batch });
        }
        if j > 0 && positions[j - 1] >= p {
            return Err(RouteError::PositionsNotIncreasing {
                prev: positions[j - 1],
                next: p,
            });
        }
    }
    Ok(())
}

/// `out[positions[j]] = exited[j]`; other rows of `out` are left as is.
pub fn exit_scatter(
    exited: &Tensor,
    positions: &[usize],
    out: &mut Tensor,
) -> Result<(), RouteError> {
    check_positions(exited, positions, out)?;
    for (j, &p) in positions.iter().enumerate() {
        out.row_mut(p).copy_from_slice(exited.row(j));
    }
    Ok(())
}

/// `out[positions[j]] = rmsnorm(exited[j]) * gain`, normalizing straight
/// into the destination row.
pub fn exit_projection(
    exited: &Tensor,
    gain: Option<&Tensor>,
    eps: f32,
    positions: &[usize],
    out: &mut Tensor,
) -> Result<(), RouteError> {
    check_positions(exited, positions, out)?;
    if let Some(g) = gain {
        if g.len() != out.last_dim() {
            return Err(RouteError::WidthMismatch {
                expected: out.last_dim(),
                got: g.len(),
            });
        }
    }
    for (j, &p) in positions.iter().enumerate() {
        rmsnorm_row(exited.row(j), gain.map(|g| g.data()), eps, out.row_mut(p));
    }
    Ok(())
}
