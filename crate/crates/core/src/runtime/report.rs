use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;

use super::{ExitMode, RuntimeConfig};
use crate::model::TokenId;

/// Histogram key for tokens no router let out early.
pub const FINAL_KEY: &str = "final";

/// Exit counts keyed `L<layer>` in ascending checkpoint order, then
/// `final`. Every checkpoint is present, including those with zero count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    entries: Vec<(String, usize)>,
}

impl Histogram {
    pub fn new(checkpoints: &[usize], exit_layers: &[Option<usize>]) -> Self {
        let mut entries: Vec<(String, usize)> = checkpoints
            .iter()
            .map(|&k| (format!("L{k}"), 0))
            .chain(std::iter::once((FINAL_KEY.to_owned(), 0)))
            .collect();
        for e in exit_layers {
            let slot = match e {
                Some(k) => checkpoints.iter().position(|c| c == k),
                None => None,
            }
            .unwrap_or(checkpoints.len());
            entries[slot].1 += 1;
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, usize)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<usize> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|(_, v)| v).sum()
    }

    /// Add another histogram over the same checkpoints.
    pub fn merge(&mut self, other: &Histogram) {
        debug_assert_eq!(self.entries.len(), other.entries.len());
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            *a += b;
        }
    }
}

impl Serialize for Histogram {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.entries.len()))?;
        for (k, v) in &self.entries {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

/// Exit accounting for one phase (prefill or decode).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseStats {
    pub tokens_total: usize,
    pub exited: usize,
    pub exit_rate: f32,
    pub histogram: Histogram,
    /// Chosen exit layer per position, `null` when no router fired.
    pub exit_layers: Vec<Option<usize>>,
}

impl PhaseStats {
    pub fn new(checkpoints: &[usize], exit_layers: Vec<Option<usize>>) -> Self {
        let exited = exit_layers.iter().filter(|e| e.is_some()).count();
        let tokens_total = exit_layers.len();
        Self {
            tokens_total,
            exited,
            exit_rate: rate(exited, tokens_total),
            histogram: Histogram::new(checkpoints, &exit_layers),
            exit_layers,
        }
    }
}

fn rate(exited: usize, total: usize) -> f32 {
    if total == 0 {
        0.0
    } else {
        (exited as f64 / total as f64) as f32
    }
}

/// Outcome of one generation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitReport {
    pub theta: f32,
    pub k_min: usize,
    pub mode: ExitMode,
    /// True when exited positions take logits from their own exit layer;
    /// false when the whole batch switches layer together.
    pub per_token_logits: bool,
    pub routers_enabled: bool,
    pub checkpoints: Vec<usize>,
    pub prefill: PhaseStats,
    pub decode: PhaseStats,
    pub tokens_total: usize,
    pub exit_rate: f32,
    pub histogram: Histogram,
    pub output_tokens: Vec<TokenId>,
    pub unique_output_tokens: usize,
}

impl ExitReport {
    pub(super) fn new(
        config: &RuntimeConfig,
        checkpoints: Vec<usize>,
        routers_enabled: bool,
        prefill: PhaseStats,
        decode: PhaseStats,
        output_tokens: Vec<TokenId>,
    ) -> Self {
        let tokens_total = prefill.tokens_total + decode.tokens_total;
        let mut histogram = prefill.histogram.clone();
        histogram.merge(&decode.histogram);
        let mut uniq = output_tokens.clone();
        uniq.sort_unstable();
        uniq.dedup();
        Self {
            theta: config.exit_threshold,
            k_min: config.k_min,
            mode: config.mode,
            per_token_logits: config.mode == ExitMode::PerToken,
            routers_enabled,
            checkpoints,
            exit_rate: rate(prefill.exited + decode.exited, tokens_total),
            tokens_total,
            histogram,
            prefill,
            decode,
            unique_output_tokens: uniq.len(),
            output_tokens,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_order_and_totals() {
        let h = Histogram::new(&[3, 7, 11], &[Some(11), None, Some(3), Some(11)]);
        let keys: Vec<&str> = h.entries().iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, ["L3", "L7", "L11", "final"]);
        assert_eq!(h.get("L11"), Some(2));
        assert_eq!(h.get("L7"), Some(0));
        assert_eq!(h.get("final"), Some(1));
        assert_eq!(h.total(), 4);
        assert_eq!(
            serde_json::to_string(&h).unwrap(),
            r#"{"L3":1,"L7":0,"L11":2,"final":1}"#
        );
    }

    #[test]
    fn phase_rate_counts_router_exits() {
        let p = PhaseStats::new(&[3, 7], vec![Some(7), None, None, Some(3)]);
        assert_eq!(p.exited, 2);
        assert_eq!(p.exit_rate, 0.5);
        assert_eq!(p.histogram.total(), p.tokens_total);
        let empty = PhaseStats::new(&[3], vec![]);
        assert_eq!(empty.exit_rate, 0.0);
    }
}
