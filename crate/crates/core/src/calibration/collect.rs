use rayon::prelude::*;

use super::CalibrationError;
use crate::corpus::{tokenize, Document};
use crate::model::ReferenceModel;

/// Hidden vectors for every corpus token, row-major `[n_tokens × d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenCollection {
    pub layers: Vec<usize>,
    pub hidden_dim: usize,
    /// One buffer per entry of `layers`: the output of that layer.
    pub per_layer: Vec<Vec<f32>>,
    /// Output of the last layer.
    pub final_states: Vec<f32>,
    pub n_tokens: usize,
    /// Forward passes run (documents longer than `max_seq_len` are split).
    pub chunks: usize,
}

/// Run each document through the model with hidden-state capture and keep
/// the outputs of `layers` and of the last layer. Documents are processed
/// in parallel; the result is concatenated in corpus order.
pub fn collect_hidden_states(
    model: &ReferenceModel,
    corpus: &[Document],
    layers: &[usize],
) -> Result<HiddenCollection, CalibrationError> {
    if corpus.is_empty() {
        return Err(CalibrationError::EmptyCorpus);
    }
    let cfg = model.config();
    let max = cfg.max_seq_len;
    let chunks: Vec<Vec<u32>> = corpus
        .iter()
        .flat_map(|doc| {
            tokenize(doc)
                .chunks(max)
                .map(<[u32]>::to_vec)
                .collect::<Vec<_>>()
        })
        .collect();
    if chunks.is_empty() {
        return Err(CalibrationError::EmptyCorpus);
    }

    let per_chunk: Vec<(Vec<Vec<f32>>, Vec<f32>)> = chunks
        .par_iter()
        .map(|tokens| {
            let out = model.forward(tokens, &mut model.new_cache(), true)?;
            let picked = layers
                .iter()
                .map(|&k| out.hidden_states[k + 1].data().to_vec())
                .collect();
            let last = out.hidden_states[cfg.num_layers].data().to_vec();
            Ok((picked, last))
        })
        .collect::<Result<_, CalibrationError>>()?;

    let d = cfg.hidden_dim;
    let n_tokens: usize = chunks.iter().map(Vec::len).sum();
    let mut per_layer = vec![Vec::with_capacity(n_tokens * d); layers.len()];
    let mut final_states = Vec::with_capacity(n_tokens * d);
    for (picked, last) in per_chunk {
        for (dst, src) in per_layer.iter_mut().zip(picked) {
            dst.extend_from_slice(&src);
        }
        final_states.extend_from_slice(&last);
    }
    Ok(HiddenCollection {
        layers: layers.to_vec(),
        hidden_dim: d,
        per_layer,
        final_states,
        n_tokens,
        chunks: chunks.len(),
    })
}
