//! Analytic gradients against central finite differences.

use ssm_xbar::quant::QuantMap;
use ssm_xbar::ssm::{ModelConfig, ModelParams};
use ssm_xbar::train::{backward, forward_quantized, softmax_cross_entropy};

const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Floor on the denominator so exact zeros compare by absolute difference.
const FLOOR: f64 = 1e-8;

fn loss_at(p: &ModelParams, u: &[f64], label: usize) -> f64 {
    let (scores, _) = forward_quantized(p, &QuantMap::off(), u).unwrap();
    softmax_cross_entropy(&scores, label).0
}

fn finite_difference(p: &ModelParams, u: &[f64], label: usize) -> Vec<f64> {
    let base = p.flatten();
    (0..base.len())
        .map(|i| {
            let mut q = p.clone();
            let mut plus = base.clone();
            plus[i] += STEP;
            q.load_flat(&plus);
            let lp = loss_at(&q, u, label);
            let mut minus = base.clone();
            minus[i] -= STEP;
            q.load_flat(&minus);
            let lm = loss_at(&q, u, label);
            (lp - lm) / (2.0 * STEP)
        })
        .collect()
}

/// Worst relative error between analytic and finite-difference gradients.
pub fn worst_gradient_error(h: usize, n: usize, l: usize, seed: u64) -> f64 {
    let cfg = ModelConfig {
        n_layers: 1,
        h,
        n,
        n_classes: 2,
        sequence_length: l,
    };
    let mut p = ModelParams::init(&cfg, seed).unwrap();
    // larger steps so the recurrence does something within a few samples
    for k in &mut p.kernels {
        k.log_dt = 0.3f64.ln() + 0.1 * seed as f64 % 0.5;
    }
    let u: Vec<f64> = (0..l)
        .map(|t| ((seed as f64 + 1.3) * t as f64).sin() * 0.9)
        .collect();
    let label = (seed % 2) as usize;
    let (_, cache) = forward_quantized(&p, &QuantMap::off(), &u).unwrap();
    let (_, grads) = backward(&cache, label).unwrap();
    let fd = finite_difference(&p, &u, label);
    let mut worst = 0.0f64;
    for (i, (a, f)) in grads.flat.iter().zip(&fd).enumerate() {
        let rel = (a - f).abs() / a.abs().max(f.abs()).max(FLOOR);
        if rel >= REL_TOL {
            eprintln!("param {i}: analytic {a:e} vs fd {f:e} (rel {rel:e})");
        }
        worst = worst.max(rel);
    }
    worst
}
