use posthoc_core::calibration::loss_and_gradients;
use posthoc_core::router_ops::Router;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;

const EPS: f32 = 1e-6;

/// Mean BCE evaluated entirely in f64.
fn loss_f64(w_down: &[f64], w_up: &[f64], hidden: &[f32], labels: &[f32], d: usize) -> f64 {
    let b = w_up.len();
    let mut total = 0.0;
    for (row, &y) in hidden.chunks_exact(d).zip(labels) {
        let ms = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + EPS as f64).sqrt();
        let x: Vec<f64> = row.iter().map(|&v| v as f64 * inv).collect();
        let mut z = 0.0;
        for j in 0..b {
            let pre: f64 = (0..d).map(|i| w_down[j * d + i] * x[i]).sum();
            z += w_up[j] * pre / (1.0 + (-pre).exp());
        }
        let y = y as f64;
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    total / labels.len() as f64
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

#[test]
fn analytic_gradients_match_central_differences() {
    let (d, b, n) = (16, 8, 10);
    let mut rng = SplitMix64::seed_from_u64(7);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let w_down: Vec<f32> = (0..b * d).map(|_| normal.sample(&mut rng) * 0.5).collect();
    let w_up: Vec<f32> = (0..b).map(|_| normal.sample(&mut rng) * 0.5).collect();
    let hidden: Vec<f32> = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
    let labels: Vec<f32> = (0..n).map(|_| rng.random_range(0..2) as f32).collect();
    let router = Router::new(3, d, w_down.clone(), w_up.clone());
    let g = loss_and_gradients(&router, &hidden, &labels, EPS);

    let wd: Vec<f64> = w_down.iter().map(|&v| v as f64).collect();
    let wu: Vec<f64> = w_up.iter().map(|&v| v as f64).collect();
    let base = loss_f64(&wd, &wu, &hidden, &labels, d);
    assert!(
        (g.loss as f64 - base).abs() < 1e-5,
        "loss {} vs {base}",
        g.loss
    );

    let h = 1e-3;
    for _ in 0..5 {
        let i = rng.random_range(0..wd.len());
        let (mut p, mut m) = (wd.clone(), wd.clone());
        p[i] += h;
        m[i] -= h;
        let num = (loss_f64(&p, &wu, &hidden, &labels, d) - loss_f64(&m, &wu, &hidden, &labels, d))
            / (2.0 * h);
        let e = rel_err(g.w_down[i] as f64, num);
        assert!(
            e <= 1e-4,
            "w_down[{i}]: analytic {} numeric {num} rel {e:e}",
            g.w_down[i]
        );
    }
    for _ in 0..5 {
        let i = rng.random_range(0..wu.len());
        let (mut p, mut m) = (wu.clone(), wu.clone());
        p[i] += h;
        m[i] -= h;
        let num = (loss_f64(&wd, &p, &hidden, &labels, d) - loss_f64(&wd, &m, &hidden, &labels, d))
            / (2.0 * h);
        let e = rel_err(g.w_up[i] as f64, num);
        assert!(
            e <= 1e-4,
            "w_up[{i}]: analytic {} numeric {num} rel {e:e}",
            g.w_up[i]
        );
    }
}
