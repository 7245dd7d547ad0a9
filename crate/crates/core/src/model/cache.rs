use super::ModelConfig;

/// Per-layer key/value rows, `[seq × d]` each (heads packed along the row,
/// `head_dim` columns per head).
#[derive(Debug, Clone, PartialEq)]
struct LayerCache {
    keys: Vec<f32>,
    values: Vec<f32>,
}

/// Attention cache owned by one generation session.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    hidden_dim: usize,
    max_seq_len: usize,
    layers: Vec<LayerCache>,
}

impl KVCache {
    pub fn new(config: &ModelConfig) -> Self {
        let cap = config.max_seq_len.min(1024) * config.hidden_dim;
        Self {
            hidden_dim: config.hidden_dim,
            max_seq_len: config.max_seq_len,
            layers: (0..config.num_layers)
                .map(|_| LayerCache {
                    keys: Vec::with_capacity(cap),
                    values: Vec::with_capacity(cap),
                })
                .collect(),
        }
    }

    pub(super) fn matches(&self, config: &ModelConfig) -> bool {
        self.hidden_dim == config.hidden_dim
            && self.max_seq_len == config.max_seq_len
            && self.layers.len() == config.num_layers
    }

    pub(super) fn push(&mut self, layer: usize, k: &[f32], v: &[f32]) {
        let l = &mut self.layers[layer];
        l.keys.extend_from_slice(k);
        l.values.extend_from_slice(v);
    }

    /// Tokens processed so far (the length of layer 0).
    pub fn len(&self) -> usize {
        self.layer_len(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].keys.len() / self.hidden_dim
    }

    pub fn keys(&self, layer: usize) -> &[f32] {
        &self.layers[layer].keys
    }

    pub fn values(&self, layer: usize) -> &[f32] {
        &self.layers[layer].values
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.keys.clear();
            l.values.clear();
        }
    }
}
