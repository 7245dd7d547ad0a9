//! Router training: binary cross-entropy on `σ(W_up · SiLU(W_down · x))`
//! with `x = rmsnorm(h)` treated as a fixed input feature, optimized with
//! Adam over shuffled mini-batches.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::{CalibrationConfig, CalibrationError};
use crate::model::RMSNORM_EPS;
use crate::router_ops::Router;
use crate::tensor::{axpy, dot, linear_row, rmsnorm_row, silu_scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRouter {
    pub router: Router,
    /// Mean BCE over the whole dataset with the final weights.
    pub final_loss: f32,
    /// Fraction of tokens where `score > 0.5` agrees with the label.
    pub accuracy: f32,
    pub single_class: bool,
}

/// `-[y·ln σ(z) + (1-y)·ln(1-σ(z))]`, computed from the logit without
/// forming `σ(z)`.
#[inline]
pub fn bce_with_logits(z: f32, y: f32) -> f32 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Mean-loss gradients for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f32,
    /// `[bottleneck × dim]`
    pub w_down: Vec<f32>,
    /// `[bottleneck]`
    pub w_up: Vec<f32>,
}

/// Mean BCE and its gradient with respect to both weight matrices over raw
/// hidden rows `hidden` (`[n × dim]`) and targets in `{0, 1}`.
pub fn loss_and_gradients(router: &Router, hidden: &[f32], labels: &[f32], eps: f32) -> Gradients {
    let d = router.dim();
    let mut normed = vec![0.0; hidden.len()];
    for (src, dst) in hidden.chunks_exact(d).zip(normed.chunks_exact_mut(d)) {
        rmsnorm_row(src, None, eps, dst);
    }
    let idx: Vec<usize> = (0..labels.len()).collect();
    let mut ws = Workspace::new(router);
    let loss = ws.accumulate(router, &normed, labels, &idx);
    Gradients {
        loss,
        w_down: ws.g_down,
        w_up: ws.g_up,
    }
}

struct Workspace {
    /// SiLU derivative at each pre-activation.
    da: Vec<f32>,
    a: Vec<f32>,
    g_down: Vec<f32>,
    g_up: Vec<f32>,
}

impl Workspace {
    fn new(router: &Router) -> Self {
        let b = router.bottleneck();
        Self {
            da: vec![0.0; b],
            a: vec![0.0; b],
            g_down: vec![0.0; b * router.dim()],
            g_up: vec![0.0; b],
        }
    }

    /// Zero the gradient buffers, then accumulate mean-loss gradients over
    /// the rows named by `idx`. Returns the mean loss.
    fn accumulate(
        &mut self,
        router: &Router,
        normed: &[f32],
        labels: &[f32],
        idx: &[usize],
    ) -> f32 {
        let d = router.dim();
        self.g_down.fill(0.0);
        self.g_up.fill(0.0);
        let scale = 1.0 / idx.len() as f32;
        let mut loss = 0.0f32;
        for &i in idx {
            let x = &normed[i * d..(i + 1) * d];
            linear_row(x, &router.w_down, &mut self.a);
            for (da, a) in self.da.iter_mut().zip(&mut self.a) {
                let z = *a;
                let den = 1.0 + (-z).exp();
                let s = 1.0 / den;
                *a = z / den;
                *da = s * (1.0 + z * (1.0 - s));
            }
            let logit = dot(&self.a, &router.w_up);
            let y = labels[i];
            loss += bce_with_logits(logit, y);
            // d(loss)/d(logit) = σ(logit) - y
            let g = (crate::tensor::sigmoid_scalar(logit) - y) * scale;
            axpy(g, &self.a, &mut self.g_up);
            for ((grow, &da), &wu) in self
                .g_down
                .chunks_exact_mut(d)
                .zip(&self.da)
                .zip(&router.w_up)
            {
                axpy(g * wu * da, x, grow);
            }
        }
        loss * scale
    }
}

struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    lr: f32,
    step: i32,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    fn new(cfg: &CalibrationConfig, n: usize) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            lr: cfg.learning_rate,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One update over the concatenation of `params`; `grads` lines up
    /// element for element.
    fn step(&mut self, params: [&mut [f32]; 2], grads: [&[f32]; 2]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let mut off = 0;
        for (p, g) in params.into_iter().zip(grads) {
            let m = &mut self.m[off..off + p.len()];
            let v = &mut self.v[off..off + p.len()];
            for (((w, &gi), mi), vi) in p.iter_mut().zip(g).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            off += p.len();
        }
    }
}

/// Uniform(-1/√fan_in, 1/√fan_in) initial weights from the router's seed.
fn init_router(layer: usize, dim: usize, bottleneck: usize, rng: &mut SplitMix64) -> Router {
    let sd = 1.0 / (dim as f32).sqrt();
    let su = 1.0 / (bottleneck as f32).sqrt();
    let w_down = (0..dim * bottleneck)
        .map(|_| rng.random_range(-sd..sd))
        .collect();
    let w_up = (0..bottleneck).map(|_| rng.random_range(-su..su)).collect();
    Router::new(layer, dim, w_down, w_up)
}

/// Fit one router to `(hidden, labels)`; `hidden` is `[n × dim]` raw
/// (un-normalized) hidden vectors. The RNG is seeded with
/// `config.seed ^ layer`, so routers trained in parallel are independent of
/// scheduling.
pub fn train_router(
    layer: usize,
    hidden: &[f32],
    labels: &[bool],
    dim: usize,
    bottleneck: usize,
    config: &CalibrationConfig,
) -> Result<TrainedRouter, CalibrationError> {
    let n = labels.len();
    if n == 0 || hidden.len() != n * dim {
        return Err(CalibrationError::EmptyDataset(layer));
    }
    let mut rng = SplitMix64::seed_from_u64(config.seed ^ layer as u64);
    let mut router = init_router(layer, dim, bottleneck, &mut rng);

    let mut normed = vec![0.0f32; hidden.len()];
    for (src, dst) in hidden.chunks_exact(dim).zip(normed.chunks_exact_mut(dim)) {
        rmsnorm_row(src, None, RMSNORM_EPS, dst);
    }
    let targets: Vec<f32> = labels.iter().map(|&y| y as u8 as f32).collect();

    let mut ws = Workspace::new(&router);
    let mut adam = Adam::new(config, router.param_count());
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let loss = ws.accumulate(&router, &normed, &targets, batch);
            if !loss.is_finite() {
                return Err(CalibrationError::NonFiniteLoss {
                    layer,
                    epoch,
                    lr: config.learning_rate,
                    batch_size: config.batch_size,
                });
            }
            adam.step(
                [&mut router.w_down, &mut router.w_up],
                [&ws.g_down, &ws.g_up],
            );
        }
    }

    let (final_loss, accuracy) = evaluate(&router, &normed, &targets);
    if !final_loss.is_finite() {
        return Err(CalibrationError::NonFiniteLoss {
            layer,
            epoch: config.epochs,
            lr: config.learning_rate,
            batch_size: config.batch_size,
        });
    }
    let positives = labels.iter().filter(|&&y| y).count();
    Ok(TrainedRouter {
        router,
        final_loss,
        accuracy,
        single_class: positives == 0 || positives == n,
    })
}

fn evaluate(router: &Router, normed: &[f32], targets: &[f32]) -> (f32, f32) {
    let d = router.dim();
    let mut z = vec![0.0f32; router.bottleneck()];
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for (x, &y) in normed.chunks_exact(d).zip(targets) {
        for (zi, wrow) in z.iter_mut().zip(router.w_down.chunks_exact(d)) {
            *zi = silu_scalar(dot(x, wrow));
        }
        let logit = dot(&z, &router.w_up);
        loss += bce_with_logits(logit, y) as f64;
        if (logit > 0.0) == (y > 0.5) {
            correct += 1;
        }
    }
    let n = targets.len() as f64;
    ((loss / n) as f32, (correct as f64 / n) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut SplitMix64, n: usize) -> Vec<f32> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn bce_matches_direct_formula() {
        for &(z, y) in &[(0.3f32, 1.0f32), (-2.0, 0.0), (4.0, 0.0), (-7.5, 1.0)] {
            let p = 1.0 / (1.0 + (-(z as f64)).exp());
            let direct = -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln());
            assert!((bce_with_logits(z, y) as f64 - direct).abs() < 1e-6);
        }
        assert!(bce_with_logits(200.0, 0.0).is_finite());
    }

    #[test]
    fn constant_positive_class_is_learned() {
        let mut rng = SplitMix64::seed_from_u64(1);
        let hidden = gaussian(&mut rng, 200 * 16);
        let labels = vec![true; 200];
        let cfg = CalibrationConfig {
            batch_size: 32,
            ..Default::default()
        };
        let t = train_router(7, &hidden, &labels, 16, 8, &cfg).unwrap();
        assert!(t.single_class);
        assert_eq!(t.accuracy, 1.0);
        assert_eq!(t.router.layer, 7);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = SplitMix64::seed_from_u64(2);
        let hidden = gaussian(&mut rng, 100 * 8);
        let labels: Vec<bool> = hidden.chunks(8).map(|r| r[0] > 0.0).collect();
        let cfg = CalibrationConfig {
            epochs: 5,
            batch_size: 16,
            ..Default::default()
        };
        let a = train_router(3, &hidden, &labels, 8, 4, &cfg).unwrap();
        let b = train_router(3, &hidden, &labels, 8, 4, &cfg).unwrap();
        assert_eq!(a, b);
        let c = train_router(
            3,
            &hidden,
            &labels,
            8,
            4,
            &CalibrationConfig { seed: 1, ..cfg },
        )
        .unwrap();
        assert_ne!(a.router, c.router);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = CalibrationConfig::default();
        assert!(matches!(
            train_router(3, &[], &[], 8, 4, &cfg),
            Err(CalibrationError::EmptyDataset(3))
        ));
    }

    #[test]
    fn exploding_learning_rate_reports_non_finite_loss() {
        let mut rng = SplitMix64::seed_from_u64(3);
        let hidden = gaussian(&mut rng, 64 * 8);
        let labels: Vec<bool> = hidden.chunks(8).map(|r| r[1] > 0.0).collect();
        let cfg = CalibrationConfig {
            learning_rate: 1e30,
            epochs: 50,
            batch_size: 8,
            ..Default::default()
        };
        match train_router(3, &hidden, &labels, 8, 4, &cfg) {
            Err(CalibrationError::NonFiniteLoss { layer: 3, .. }) => {}
            other => panic!("expected a non-finite loss, got {other:?}"),
        }
    }
}
