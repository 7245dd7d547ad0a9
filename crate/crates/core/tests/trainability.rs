use posthoc_core::calibration::{train_router, CalibrationConfig};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;

#[test]
fn separable_labels_are_learned() {
    let (n, d) = (5000, 64);
    let mut rng = SplitMix64::seed_from_u64(11);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let w: Vec<f32> = (0..d).map(|_| normal.sample(&mut rng)).collect();
    let hidden: Vec<f32> = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
    let labels: Vec<bool> = hidden
        .chunks_exact(d)
        .map(|x| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f32>() > 0.0)
        .collect();
    let config = CalibrationConfig {
        epochs: 100,
        learning_rate: 1e-3,
        ..CalibrationConfig::default()
    };
    let t = train_router(3, &hidden, &labels, d, 32, &config).unwrap();
    assert!(t.accuracy >= 0.99, "accuracy {}", t.accuracy);
}
