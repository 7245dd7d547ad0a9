//! Post-hoc early exit during generation.
//!
//! Every step runs the full model and keeps the KV cache complete. After
//! the forward pass, routers are evaluated on the captured hidden states at
//! ascending checkpoints; a token whose router score is strictly above the
//! threshold takes its logits from that checkpoint's hidden state (through
//! the final norm and LM head) instead of the last layer's.

mod report;

pub use report::{ExitReport, Histogram, PhaseStats, FINAL_KEY};

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::RouterBank;
use crate::model::{ForwardOutput, KVCache, ModelError, ReferenceModel, TokenId, RMSNORM_EPS};
use crate::router_ops::{batch_compact, exit_projection, fused_layernorm_route, RouteError};
use crate::tensor::{linear_row, Tensor};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid runtime config: {0}")]
    InvalidConfig(String),
    #[error("router bank does not fit the model: {0}")]
    DimensionMismatch(String),
    #[error("hidden states were not captured ({got} tensors, need {need})")]
    MissingHiddenStates { got: usize, need: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("{prompt} prompt tokens + {new} new tokens exceed max_seq_len {max}")]
    TooLong {
        prompt: usize,
        new: usize,
        max: usize,
    },
    #[error("sweep needs at least one prompt and one threshold")]
    EmptySweep,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Route(#[from] RouteError),
}

/// How exits are decided for a multi-token forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitMode {
    /// Each token takes its own earliest passing checkpoint.
    PerToken,
    /// The batch exits at the first checkpoint where every token passes.
    BatchUnanimous,
}

impl ExitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PerToken => "per-token",
            Self::BatchUnanimous => "batch-unanimous",
        }
    }
}

impl fmt::Display for ExitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-token" => Ok(Self::PerToken),
            "batch-unanimous" => Ok(Self::BatchUnanimous),
            _ => Err(format!(
                "unknown exit mode `{s}` (expected per-token or batch-unanimous)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    /// θ in (0, 1]. Scores must be strictly above it, so 1.0 disables exits.
    pub exit_threshold: f32,
    /// Checkpoints below this layer are never taken.
    pub k_min: usize,
    pub mode: ExitMode,
    pub max_new_tokens: usize,
    /// 0 selects greedy argmax.
    pub temperature: f32,
    pub seed: u64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            exit_threshold: 0.85,
            k_min: 0,
            mode: ExitMode::PerToken,
            max_new_tokens: 256,
            temperature: 0.0,
            seed: 0,
        }
    }
}

fn check_theta(theta: f32) -> Result<(), RuntimeError> {
    if theta > 0.0 && theta <= 1.0 {
        Ok(())
    } else {
        Err(RuntimeError::InvalidConfig(format!(
            "exit threshold {theta} outside (0, 1]"
        )))
    }
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        check_theta(self.exit_threshold)?;
        if self.max_new_tokens == 0 {
            return Err(RuntimeError::InvalidConfig(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(RuntimeError::InvalidConfig(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn check_bank(model: &ReferenceModel, bank: &RouterBank) -> Result<(), RuntimeError> {
    let m = bank.meta();
    if m.hidden_dim != model.hidden_dim() || m.num_layers != model.num_layers() {
        return Err(RuntimeError::DimensionMismatch(format!(
            "bank is for d={} L={}, model has d={} L={}",
            m.hidden_dim,
            m.num_layers,
            model.hidden_dim(),
            model.num_layers()
        )));
    }
    Ok(())
}

fn check_hidden(model: &ReferenceModel, hidden_states: &[Tensor]) -> Result<(), RuntimeError> {
    let need = model.num_layers() + 1;
    if hidden_states.len() != need {
        return Err(RuntimeError::MissingHiddenStates {
            got: hidden_states.len(),
            need,
        });
    }
    Ok(())
}

/// Logits after exit selection, one exit layer (or `None`) per position.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub logits: Tensor,
    pub exit_layers: Vec<Option<usize>>,
}

fn gather_rows(h: &Tensor, rows: &[usize]) -> Tensor {
    let d = h.last_dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(h.row(r));
    }
    Tensor::matrix(rows.len(), d, data)
}

/// Evaluate the bank against one forward pass and pick each position's
/// logits.
pub fn posthoc_select(
    model: &ReferenceModel,
    out: &ForwardOutput,
    bank: &RouterBank,
    config: &RuntimeConfig,
) -> Result<Selection, RuntimeError> {
    check_theta(config.exit_threshold)?;
    check_bank(model, bank)?;
    check_hidden(model, &out.hidden_states)?;
    let theta = config.exit_threshold;
    let eps = bank.meta().rmsnorm_eps;
    let seq = out.logits.rows();
    let routers = bank.routers().iter().filter(|r| r.layer >= config.k_min);

    match config.mode {
        ExitMode::BatchUnanimous => {
            for router in routers {
                let h = &out.hidden_states[router.layer + 1];
                let scores = fused_layernorm_route(h, router, eps)?;
                if scores.iter().all(|&s| s > theta) {
                    return Ok(Selection {
                        logits: model.lm_head_from_hidden(h)?,
                        exit_layers: vec![Some(router.layer); seq],
                    });
                }
            }
            Ok(Selection {
                logits: out.logits.clone(),
                exit_layers: vec![None; seq],
            })
        }
        ExitMode::PerToken => {
            let d = model.hidden_dim();
            let mut active: Vec<usize> = (0..seq).collect();
            let mut exit_layers = vec![None; seq];
            let mut normed = Tensor::zeros(vec![seq, d]);
            for router in routers {
                if active.is_empty() {
                    break;
                }
                let rows = gather_rows(&out.hidden_states[router.layer + 1], &active);
                let scores = fused_layernorm_route(&rows, router, eps)?;
                let mask: Vec<bool> = scores.iter().map(|&s| s > theta).collect();
                let split = batch_compact(&rows, &mask)?;
                let positions: Vec<usize> =
                    split.exiting_index.iter().map(|&j| active[j]).collect();
                exit_projection(
                    &split.exiting,
                    Some(model.final_norm_gain()),
                    RMSNORM_EPS,
                    &positions,
                    &mut normed,
                )?;
                for &p in &positions {
                    exit_layers[p] = Some(router.layer);
                }
                active = split.continuing_index.iter().map(|&j| active[j]).collect();
            }
            let mut logits = out.logits.clone();
            for (t, e) in exit_layers.iter().enumerate() {
                if e.is_some() {
                    linear_row(normed.row(t), model.lm_head().data(), logits.row_mut(t));
                }
            }
            Ok(Selection {
                logits,
                exit_layers,
            })
        }
    }
}

/// Router scores for every bank checkpoint over every position:
/// `scores[i][t]` is router `i` on token `t`.
pub fn checkpoint_scores(
    model: &ReferenceModel,
    hidden_states: &[Tensor],
    bank: &RouterBank,
) -> Result<Vec<Vec<f32>>, RuntimeError> {
    check_bank(model, bank)?;
    check_hidden(model, hidden_states)?;
    let eps = bank.meta().rmsnorm_eps;
    bank.routers()
        .iter()
        .map(|r| Ok(fused_layernorm_route(&hidden_states[r.layer + 1], r, eps)?))
        .collect()
}

/// Exit decision from precomputed scores; the same rule as
/// [`posthoc_select`].
pub fn exits_from_scores(
    layers: &[usize],
    scores: &[Vec<f32>],
    theta: f32,
    k_min: usize,
    mode: ExitMode,
) -> Vec<Option<usize>> {
    let seq = scores.first().map_or(0, Vec::len);
    let eligible = || layers.iter().zip(scores).filter(|(&k, _)| k >= k_min);
    match mode {
        ExitMode::PerToken => (0..seq)
            .map(|t| eligible().find(|(_, s)| s[t] > theta).map(|(&k, _)| k))
            .collect(),
        ExitMode::BatchUnanimous => {
            let k = eligible()
                .find(|(_, s)| s.iter().all(|&v| v > theta))
                .map(|(&k, _)| k);
            vec![k; seq]
        }
    }
}

fn argmax(row: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

fn sample(row: &[f32], temperature: f32, rng: &mut SplitMix64) -> TokenId {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let weights: Vec<f64> = row
        .iter()
        .map(|&v| ((v as f64 - max) / temperature as f64).exp())
        .collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => dist.sample(rng) as TokenId,
        Err(_) => argmax(row),
    }
}

/// Tokens, exit report and the final KV cache of one run.
#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub report: ExitReport,
    pub cache: KVCache,
}

/// Prefill `prompt`, then decode until `max_new_tokens` tokens exist.
///
/// The first new token comes from the prefill's last position; each of the
/// remaining `max_new_tokens - 1` decode steps forwards the previous token
/// through all layers, so the cache ends at `prompt.len() + max_new_tokens - 1`
/// entries per layer. With `bank = None` the run is the plain baseline.
pub fn generate(
    model: &ReferenceModel,
    bank: Option<&RouterBank>,
    prompt: &[TokenId],
    config: &RuntimeConfig,
) -> Result<Generation, RuntimeError> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(RuntimeError::EmptyPrompt);
    }
    if let Some(b) = bank {
        check_bank(model, b)?;
    }
    let max = model.config().max_seq_len;
    if prompt.len() + config.max_new_tokens - 1 > max {
        return Err(RuntimeError::TooLong {
            prompt: prompt.len(),
            new: config.max_new_tokens,
            max,
        });
    }

    let checkpoints = bank.map(RouterBank::layers).unwrap_or_default();
    let mut rng = SplitMix64::seed_from_u64(config.seed);
    let mut cache = model.new_cache();

    let step = |tokens: &[TokenId], cache: &mut KVCache| -> Result<Selection, RuntimeError> {
        let out = model.forward(tokens, cache, bank.is_some())?;
        match bank {
            Some(b) => posthoc_select(model, &out, b, config),
            None => Ok(Selection {
                exit_layers: vec![None; out.logits.rows()],
                logits: out.logits,
            }),
        }
    };
    let mut pick = |logits: &Tensor| {
        let row = logits.row(logits.rows() - 1);
        if config.temperature == 0.0 {
            argmax(row)
        } else {
            sample(row, config.temperature, &mut rng)
        }
    };

    let pre = step(prompt, &mut cache)?;
    let mut tokens = vec![pick(&pre.logits)];
    let mut decode_exits = Vec::with_capacity(config.max_new_tokens - 1);
    while tokens.len() < config.max_new_tokens {
        let sel = step(&tokens[tokens.len() - 1..], &mut cache)?;
        decode_exits.push(sel.exit_layers[0]);
        tokens.push(pick(&sel.logits));
    }

    let report = ExitReport::new(
        config,
        checkpoints.clone(),
        bank.is_some(),
        PhaseStats::new(&checkpoints, pre.exit_layers),
        PhaseStats::new(&checkpoints, decode_exits),
        tokens.clone(),
    );
    Ok(Generation {
        tokens,
        report,
        cache,
    })
}

/// One threshold's prefill exit statistics over all sweep prompts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub theta: f32,
    pub tokens_total: usize,
    pub exited: usize,
    pub exit_rate: f32,
    pub histogram: Histogram,
    /// Per prompt, per position.
    pub exit_layers: Vec<Vec<Option<usize>>>,
}

/// Prefill exit rates across thresholds, rows sorted by θ descending.
///
/// Router scores do not depend on θ, so each prompt is forwarded once and
/// every threshold is applied to the same scores. Prompts run in parallel.
pub fn sweep_thresholds(
    model: &ReferenceModel,
    bank: &RouterBank,
    prompts: &[Vec<TokenId>],
    thetas: &[f32],
    k_min: usize,
    mode: ExitMode,
) -> Result<Vec<SweepRow>, RuntimeError> {
    if prompts.is_empty() || thetas.is_empty() {
        return Err(RuntimeError::EmptySweep);
    }
    for &t in thetas {
        check_theta(t)?;
    }
    if prompts.iter().any(Vec::is_empty) {
        return Err(RuntimeError::EmptyPrompt);
    }
    check_bank(model, bank)?;
    let layers = bank.layers();
    let scores: Vec<Vec<Vec<f32>>> = prompts
        .par_iter()
        .map(|p| {
            let out = model.forward(p, &mut model.new_cache(), true)?;
            checkpoint_scores(model, &out.hidden_states, bank)
        })
        .collect::<Result<_, _>>()?;

    let mut sorted = thetas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted
        .into_iter()
        .map(|theta| {
            let exit_layers: Vec<Vec<Option<usize>>> = scores
                .iter()
                .map(|s| exits_from_scores(&layers, s, theta, k_min, mode))
                .collect();
            let flat: Vec<Option<usize>> = exit_layers.iter().flatten().copied().collect();
            let stats = PhaseStats::new(&layers, flat);
            SweepRow {
                theta,
                tokens_total: stats.tokens_total,
                exited: stats.exited,
                exit_rate: stats.exit_rate,
                histogram: stats.histogram,
                exit_layers,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{checkpoint_layers, BankMeta};
    use crate::model::ModelConfig;
    use crate::router_ops::Router;
    use rand::Rng;

    fn model() -> ReferenceModel {
        ReferenceModel::new(ModelConfig {
            num_layers: 8,
            hidden_dim: 32,
            num_heads: 2,
            ffn_dim: 64,
            max_seq_len: 128,
            ..Default::default()
        })
        .unwrap()
    }

    fn meta(m: &ReferenceModel) -> BankMeta {
        BankMeta {
            hidden_dim: m.hidden_dim(),
            bottleneck: 8,
            interval: 2,
            tau: 0.9,
            rmsnorm_eps: RMSNORM_EPS,
            num_layers: m.num_layers(),
        }
    }

    fn random_bank(m: &ReferenceModel, seed: u64) -> RouterBank {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let mt = meta(m);
        let routers = checkpoint_layers(m.num_layers(), 2, true)
            .into_iter()
            .map(|k| {
                let mut w = |n: usize| (0..n).map(|_| rng.random_range(-0.6f32..0.6)).collect();
                Router::new(k, mt.hidden_dim, w(mt.hidden_dim * 8), w(8))
            })
            .collect();
        RouterBank::new(mt, routers).unwrap()
    }

    fn cfg(theta: f32) -> RuntimeConfig {
        RuntimeConfig {
            exit_threshold: theta,
            max_new_tokens: 8,
            ..Default::default()
        }
    }

    fn prompt() -> Vec<TokenId> {
        b"the quick brown fox"
            .iter()
            .map(|&b| b as TokenId)
            .collect()
    }

    #[test]
    fn theta_one_is_baseline() {
        let m = model();
        let bank = random_bank(&m, 1);
        let out = m.forward(&prompt(), &mut m.new_cache(), true).unwrap();
        for mode in [ExitMode::PerToken, ExitMode::BatchUnanimous] {
            let sel = posthoc_select(&m, &out, &bank, &RuntimeConfig { mode, ..cfg(1.0) }).unwrap();
            assert_eq!(sel.logits, out.logits);
            assert!(sel.exit_layers.iter().all(Option::is_none));
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn per_token_choice_matches_brute_force() {
        let m = model();
        let out = m.forward(&prompt(), &mut m.new_cache(), true).unwrap();
        for seed in 0..6 {
            let bank = random_bank(&m, seed);
            let scores = checkpoint_scores(&m, &out.hidden_states, &bank).unwrap();
            for theta in [0.3, 0.5, 0.6, 0.7, 0.9] {
                for k_min in [0, 2, 4, 7] {
                    let c = RuntimeConfig {
                        k_min,
                        ..cfg(theta)
                    };
                    let sel = posthoc_select(&m, &out, &bank, &c).unwrap();
                    for t in 0..out.logits.rows() {
                        let expect = bank
                            .routers()
                            .iter()
                            .enumerate()
                            .filter(|(_, r)| r.layer >= k_min)
                            .find(|(i, _)| scores[*i][t] > theta)
                            .map(|(_, r)| r.layer);
                        assert_eq!(sel.exit_layers[t], expect);
                        let want = match expect {
                            Some(k) => m
                                .lm_head_from_hidden(&out.hidden_states[k + 1])
                                .unwrap()
                                .row(t)
                                .to_vec(),
                            None => out.logits.row(t).to_vec(),
                        };
                        assert_eq!(sel.logits.row(t), &want[..]);
                    }
                    let layers = bank.layers();
                    assert_eq!(
                        exits_from_scores(&layers, &scores, theta, k_min, ExitMode::PerToken),
                        sel.exit_layers
                    );
                }
            }
        }
    }

    #[test]
    fn rigged_bank_exits_at_fired_layer() {
        let m = model();
        let bank = RouterBank::rigged(meta(&m), &[1, 3, 5, 7], &[5]).unwrap();
        let out = m.forward(&prompt(), &mut m.new_cache(), true).unwrap();
        for mode in [ExitMode::PerToken, ExitMode::BatchUnanimous] {
            let sel =
                posthoc_select(&m, &out, &bank, &RuntimeConfig { mode, ..cfg(0.85) }).unwrap();
            assert!(sel.exit_layers.iter().all(|&e| e == Some(5)));
            assert_eq!(
                sel.logits,
                m.lm_head_from_hidden(&out.hidden_states[6]).unwrap()
            );
        }
        let high = posthoc_select(
            &m,
            &out,
            &bank,
            &RuntimeConfig {
                k_min: 6,
                ..cfg(0.85)
            },
        )
        .unwrap();
        assert_eq!(high.logits, out.logits);
    }

    #[test]
    fn unanimous_needs_every_token() {
        let layers = [1, 3];
        let scores = vec![vec![0.9, 0.2], vec![0.95, 0.96]];
        assert_eq!(
            exits_from_scores(&layers, &scores, 0.5, 0, ExitMode::BatchUnanimous),
            vec![Some(3), Some(3)]
        );
        assert_eq!(
            exits_from_scores(&layers, &scores, 0.5, 0, ExitMode::PerToken),
            vec![Some(1), Some(3)]
        );
    }

    #[test]
    fn generate_off_matches_baseline_and_cache() {
        let m = model();
        let bank = random_bank(&m, 3);
        let base = generate(&m, None, &prompt(), &cfg(1.0)).unwrap();
        let off = generate(&m, Some(&bank), &prompt(), &cfg(1.0)).unwrap();
        assert_eq!(base.tokens, off.tokens);
        assert_eq!(base.cache, off.cache);
        assert_eq!(off.report.exit_rate, 0.0);
        assert_eq!(off.cache.len(), prompt().len() + 7);
        assert_eq!(off.report.decode.tokens_total, 7);
        assert_eq!(off.report.prefill.tokens_total, prompt().len());
        assert_eq!(off.report.histogram.total(), off.report.tokens_total);
    }

    #[test]
    fn rigged_generation_reports_exits() {
        let m = model();
        let bank = RouterBank::rigged(meta(&m), &[1, 3, 5, 7], &[7]).unwrap();
        let g = generate(&m, Some(&bank), &prompt(), &cfg(0.85)).unwrap();
        assert_eq!(g.report.exit_rate, 1.0);
        assert_eq!(g.report.histogram.get("L7"), Some(g.report.tokens_total));
        let mut u = g.tokens.clone();
        u.sort();
        u.dedup();
        assert_eq!(g.report.unique_output_tokens, u.len());
        // Exit at the last layer reproduces the baseline.
        let base = generate(&m, None, &prompt(), &cfg(0.85)).unwrap();
        assert_eq!(g.tokens, base.tokens);
        for l in 0..m.num_layers() {
            assert_eq!(g.cache.layer_len(l), prompt().len() + 7);
        }
    }

    #[test]
    fn prefill_cache_is_independent_of_routers() {
        let m = model();
        let bank = RouterBank::rigged(meta(&m), &[1, 3], &[1]).unwrap();
        let c = RuntimeConfig {
            max_new_tokens: 1,
            ..cfg(0.85)
        };
        let a = generate(&m, Some(&bank), &prompt(), &c).unwrap();
        let b = generate(&m, None, &prompt(), &c).unwrap();
        assert_eq!(a.cache, b.cache);
        assert_eq!(a.report.prefill.exit_rate, 1.0);
    }

    #[test]
    fn sampling_is_seeded() {
        let m = model();
        let c = RuntimeConfig {
            temperature: 1.5,
            seed: 9,
            ..cfg(1.0)
        };
        let a = generate(&m, None, &prompt(), &c).unwrap();
        let b = generate(&m, None, &prompt(), &c).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn config_and_input_errors() {
        let m = model();
        for bad in [0.0, -0.1, 1.01, f32::NAN] {
            assert!(matches!(
                cfg(bad).validate(),
                Err(RuntimeError::InvalidConfig(_))
            ));
        }
        assert!(RuntimeConfig {
            max_new_tokens: 0,
            ..cfg(0.5)
        }
        .validate()
        .is_err());
        assert!(RuntimeConfig {
            temperature: -1.0,
            ..cfg(0.5)
        }
        .validate()
        .is_err());
        assert!(matches!(
            generate(&m, None, &[], &cfg(0.5)),
            Err(RuntimeError::EmptyPrompt)
        ));
        let long = RuntimeConfig {
            max_new_tokens: 200,
            ..cfg(0.5)
        };
        assert!(matches!(
            generate(&m, None, &prompt(), &long),
            Err(RuntimeError::TooLong { .. })
        ));

        let other = ReferenceModel::new(ModelConfig::default()).unwrap();
        let bank = random_bank(&m, 0);
        let out = other
            .forward(&[1, 2], &mut other.new_cache(), true)
            .unwrap();
        assert!(matches!(
            posthoc_select(&other, &out, &bank, &cfg(0.5)),
            Err(RuntimeError::DimensionMismatch(_))
        ));
        let no_capture = m.forward(&[1, 2], &mut m.new_cache(), false).unwrap();
        assert!(matches!(
            posthoc_select(&m, &no_capture, &bank, &cfg(0.5)),
            Err(RuntimeError::MissingHiddenStates { .. })
        ));
    }

    #[test]
    fn sweep_rows_descend_and_are_monotone() {
        let m = model();
        let bank = random_bank(&m, 4);
        let prompts: Vec<Vec<TokenId>> = ["alpha beta", "gamma", "delta epsilon zeta"]
            .iter()
            .map(|s| s.bytes().map(TokenId::from).collect())
            .collect();
        let rows = sweep_thresholds(
            &m,
            &bank,
            &prompts,
            &[0.5, 1.0, 0.7, 0.85],
            0,
            ExitMode::PerToken,
        )
        .unwrap();
        let thetas: Vec<f32> = rows.iter().map(|r| r.theta).collect();
        assert_eq!(thetas, [1.0, 0.85, 0.7, 0.5]);
        assert_eq!(rows[0].exit_rate, 0.0);
        for w in rows.windows(2) {
            assert!(w[1].exit_rate >= w[0].exit_rate);
            for (a, b) in w[0]
                .exit_layers
                .iter()
                .flatten()
                .zip(w[1].exit_layers.iter().flatten())
            {
                match (a, b) {
                    (Some(x), Some(y)) => assert!(y <= x),
                    (Some(_), None) => panic!("lower threshold lost an exit"),
                    _ => {}
                }
            }
        }
        for r in &rows {
            assert_eq!(r.histogram.total(), r.tokens_total);
            let c = RuntimeConfig {
                max_new_tokens: 1,
                ..cfg(r.theta)
            };
            for (p, layers) in prompts.iter().zip(&r.exit_layers) {
                let g = generate(&m, Some(&bank), p, &c).unwrap();
                assert_eq!(&g.report.prefill.exit_layers, layers);
            }
        }
        assert!(matches!(
            sweep_thresholds(&m, &bank, &[], &[0.5], 0, ExitMode::PerToken),
            Err(RuntimeError::EmptySweep)
        ));
    }

    #[test]
    fn report_json_key_order_is_stable() {
        let m = model();
        let bank = RouterBank::rigged(meta(&m), &[1, 3], &[3]).unwrap();
        let g = generate(&m, Some(&bank), &prompt(), &cfg(0.85)).unwrap();
        let s = serde_json::to_string(&g.report).unwrap();
        let keys = [
            "\"theta\"",
            "\"k_min\"",
            "\"mode\":\"per-token\"",
            "\"prefill\"",
            "\"decode\"",
            "\"unique_output_tokens\"",
        ];
        let pos: Vec<usize> = keys.iter().map(|k| s.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{s}");
        assert!(s.contains(r#""histogram":{"L1":0,"L3":"#));
    }
}
