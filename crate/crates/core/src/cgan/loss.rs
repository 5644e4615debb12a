//! Adversarial losses on probabilities, with gradients taken with respect to
//! the discriminator logits.
//!
//! Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log;
//! the gradient through a saturated clamp is zero, which is what finite
//! differences of the clamped loss see.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::nn::sigmoid;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GLossKind {
    /// Minimise `-log D(G(z))`.
    #[default]
    NonSaturating,
    /// Minimise `log(1 - D(G(z)))`.
    Saturating,
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    v.sum::<f64>() / n as f64
}

/// `-[mean log p_real + mean log(1 - p_fake)]`.
pub fn d_loss(p_real: &[f64], p_fake: &[f64]) -> f64 {
    -(mean(p_real.iter().map(|&p| clamp(p).ln())) + mean(p_fake.iter().map(|&p| (1.0 - clamp(p)).ln())))
}

pub fn g_loss(p_fake: &[f64], kind: GLossKind) -> f64 {
    match kind {
        GLossKind::NonSaturating => -mean(p_fake.iter().map(|&p| clamp(p).ln())),
        GLossKind::Saturating => mean(p_fake.iter().map(|&p| (1.0 - clamp(p)).ln())),
    }
}

/// `dp/dlogit` through the clamp.
fn dp(p: f64) -> f64 {
    if p < PROB_EPS || p > 1.0 - PROB_EPS {
        0.0
    } else {
        p * (1.0 - p)
    }
}

/// Gradient of the real-sample term of `d_loss` w.r.t. the real logits.
pub fn d_loss_real_grad(logits: &Array1<f64>) -> Array1<f64> {
    let n = logits.len() as f64;
    logits.mapv(|l| {
        let p = sigmoid(l);
        -dp(p) / clamp(p) / n
    })
}

/// Gradient of the fake-sample term of `d_loss` w.r.t. the fake logits.
pub fn d_loss_fake_grad(logits: &Array1<f64>) -> Array1<f64> {
    let n = logits.len() as f64;
    logits.mapv(|l| {
        let p = sigmoid(l);
        dp(p) / (1.0 - clamp(p)) / n
    })
}

pub fn g_loss_grad(logits: &Array1<f64>, kind: GLossKind) -> Array1<f64> {
    let n = logits.len() as f64;
    logits.mapv(|l| {
        let p = sigmoid(l);
        match kind {
            GLossKind::NonSaturating => -dp(p) / clamp(p) / n,
            GLossKind::Saturating => -dp(p) / (1.0 - clamp(p)) / n,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert!((d_loss(&[0.5], &[0.5]) - 4f64.ln()).abs() < 1e-12);
        assert!((g_loss(&[0.5], GLossKind::NonSaturating) - 2f64.ln()).abs() < 1e-12);
        assert!(d_loss(&[1.0 - PROB_EPS], &[PROB_EPS]) < 1e-6);
        assert!(g_loss(&[1.0 - 1e-9], GLossKind::NonSaturating) < 1e-6);
        assert!(d_loss(&[0.0], &[1.0]).is_finite());
    }

    #[test]
    fn generator_losses_are_monotone_in_opposite_directions() {
        let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        for w in grid.windows(2) {
            assert!(g_loss(&[w[1]], GLossKind::NonSaturating) < g_loss(&[w[0]], GLossKind::NonSaturating));
            assert!(g_loss(&[w[1]], GLossKind::Saturating) < g_loss(&[w[0]], GLossKind::Saturating));
        }
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let logits = Array1::from(vec![-3.0, -0.4, 0.0, 0.7, 2.5]);
        let h = 1e-6;
        let probs = |l: &Array1<f64>| l.iter().map(|&x| sigmoid(x)).collect::<Vec<_>>();
        let fd = |f: &dyn Fn(&Array1<f64>) -> f64, i: usize| {
            let (mut a, mut b) = (logits.clone(), logits.clone());
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        };
        let real = |l: &Array1<f64>| d_loss(&probs(l), &[]);
        let fake = |l: &Array1<f64>| d_loss(&[], &probs(l));
        let ns = |l: &Array1<f64>| g_loss(&probs(l), GLossKind::NonSaturating);
        let sat = |l: &Array1<f64>| g_loss(&probs(l), GLossKind::Saturating);
        let (gr, gf) = (d_loss_real_grad(&logits), d_loss_fake_grad(&logits));
        let (gn, gs) = (g_loss_grad(&logits, GLossKind::NonSaturating), g_loss_grad(&logits, GLossKind::Saturating));
        for i in 0..logits.len() {
            assert!((gr[i] - fd(&real, i)).abs() < 1e-7);
            assert!((gf[i] - fd(&fake, i)).abs() < 1e-7);
            assert!((gn[i] - fd(&ns, i)).abs() < 1e-7);
            assert!((gs[i] - fd(&sat, i)).abs() < 1e-7);
        }
    }
}
