use super::{CalibrationError, HiddenCollection};
use crate::tensor::{cosine_similarity, TensorError};

/// Hidden vectors with their convergence labels, one slice per checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationDataset {
    pub layers: Vec<usize>,
    pub hidden_dim: usize,
    /// `[n_tokens × d]` per checkpoint.
    pub hidden: Vec<Vec<f32>>,
    pub similarities: Vec<Vec<f32>>,
    pub labels: Vec<Vec<bool>>,
    pub n_tokens: usize,
    /// Pairs where either vector had zero norm; counted as similarity 0.
    pub zero_norm: usize,
}

/// Label each token at each checkpoint with `cos(h_k, h_final) > tau`.
pub fn compute_labels(
    collection: &HiddenCollection,
    tau: f32,
) -> Result<CalibrationDataset, CalibrationError> {
    let d = collection.hidden_dim;
    let n = collection.n_tokens;
    if collection.final_states.len() != n * d {
        return Err(CalibrationError::Misaligned {
            hidden: n * d,
            final_: collection.final_states.len(),
        });
    }
    let mut zero_norm = 0;
    let mut similarities = Vec::with_capacity(collection.layers.len());
    let mut labels = Vec::with_capacity(collection.layers.len());
    for buf in &collection.per_layer {
        if buf.len() != collection.final_states.len() {
            return Err(CalibrationError::Misaligned {
                hidden: buf.len(),
                final_: collection.final_states.len(),
            });
        }
        let mut sims = Vec::with_capacity(n);
        for (h, f) in buf
            .chunks_exact(d)
            .zip(collection.final_states.chunks_exact(d))
        {
            let s = match cosine_similarity(h, f) {
                Ok(s) => s,
                Err(TensorError::ZeroNorm) => {
                    zero_norm += 1;
                    0.0
                }
                Err(e) => return Err(crate::model::ModelError::from(e).into()),
            };
            sims.push(s);
        }
        labels.push(sims.iter().map(|&s| s > tau).collect());
        similarities.push(sims);
    }
    Ok(CalibrationDataset {
        layers: collection.layers.clone(),
        hidden_dim: d,
        hidden: collection.per_layer.clone(),
        similarities,
        labels,
        n_tokens: n,
        zero_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn collection(hidden: Vec<f32>, final_states: Vec<f32>, d: usize) -> HiddenCollection {
        HiddenCollection {
            layers: vec![3],
            hidden_dim: d,
            n_tokens: final_states.len() / d,
            per_layer: vec![hidden],
            final_states,
            chunks: 1,
        }
    }

    #[test]
    fn identical_vectors_all_converge() {
        let f = vec![0.5, -1.0, 2.0, 0.1, 3.0, 3.0];
        let ds = compute_labels(&collection(f.clone(), f, 3), 0.999).unwrap();
        assert_eq!(ds.labels[0], vec![true, true]);
    }

    #[test]
    fn antipodal_vectors_never_converge() {
        let f = vec![0.5, -1.0, 2.0, 0.1, 3.0, 3.0];
        let neg = f.iter().map(|v| -v).collect();
        let ds = compute_labels(&collection(neg, f, 3), 0.01).unwrap();
        assert_eq!(ds.labels[0], vec![false, false]);
    }

    #[test]
    fn straddling_threshold_matches_scalar_oracle() {
        // Unit final vector e1; hidden vectors at angles whose cosines sit
        // just either side of 0.98.
        let d = 2;
        let cosines = [0.97f64, 0.979, 0.9799, 0.9801, 0.981, 0.99, 1.0, -0.5];
        let mut hidden = Vec::new();
        let mut fin = Vec::new();
        for &c in &cosines {
            hidden.extend_from_slice(&[c as f32, (1.0 - c * c).max(0.0).sqrt() as f32]);
            fin.extend_from_slice(&[1.0, 0.0]);
        }
        let ds = compute_labels(&collection(hidden.clone(), fin.clone(), d), 0.98).unwrap();
        let oracle: Vec<bool> = hidden
            .chunks(2)
            .zip(fin.chunks(2))
            .map(|(h, f)| {
                let dot = h[0] as f64 * f[0] as f64 + h[1] as f64 * f[1] as f64;
                let nh = (h[0] as f64).hypot(h[1] as f64);
                let nf = (f[0] as f64).hypot(f[1] as f64);
                dot / (nh * nf) > 0.98
            })
            .collect();
        assert_eq!(ds.labels[0], oracle);
        assert_eq!(oracle, [false, false, false, true, true, true, true, false]);
    }

    #[test]
    fn zero_norm_counts_as_unconverged() {
        let ds = compute_labels(
            &collection(vec![0.0, 0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0, 1.0], 2),
            0.5,
        )
        .unwrap();
        assert_eq!(ds.zero_norm, 1);
        assert_eq!(ds.similarities[0][0], 0.0);
        assert_eq!(ds.labels[0], vec![false, true]);
    }

    #[test]
    fn misaligned_input_is_rejected() {
        let mut c = collection(vec![1.0; 4], vec![1.0; 4], 2);
        c.per_layer[0].pop();
        assert!(matches!(
            compute_labels(&c, 0.5),
            Err(CalibrationError::Misaligned { .. })
        ));
    }

    proptest! {
        #[test]
        fn raising_tau_never_adds_positives(
            vals in proptest::collection::vec(-1f32..1.0, 40),
            t1 in 0.01f32..0.99,
            t2 in 0.01f32..0.99,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let (h, f) = vals.split_at(20);
            let c = collection(h.to_vec(), f.to_vec(), 4);
            let a = compute_labels(&c, lo).unwrap();
            let b = compute_labels(&c, hi).unwrap();
            for (x, y) in a.labels[0].iter().zip(&b.labels[0]) {
                prop_assert!(!(*y && !*x));
            }
        }
    }
}
