//! Softmax policies, REINFORCE with a shared normalized baseline, and
//! cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Softmax restricted to entries where `feasible[i]` is true; infeasible
/// entries get probability exactly zero.
pub fn masked_softmax(scores: &[f64], feasible: &[bool]) -> Result<Vec<f64>> {
    assert_eq!(scores.len(), feasible.len(), "mask length");
    let max = scores.iter().zip(feasible).filter(|(_, &ok)| ok).map(|(&s, _)| s).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoFeasibleAction);
    }
    let mut out: Vec<f64> =
        scores.iter().zip(feasible).map(|(&s, &ok)| if ok { (s - max).exp() } else { 0.0 }).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Population standard deviation guard added to `δ`.
pub const ADVANTAGE_EPS: f64 = 1e-8;

/// `(R_i − μ) / (δ + ε)` with the population standard deviation `δ`.
pub fn normalize_advantage(rewards: &[f64]) -> Vec<f64> {
    // The rounded mean of identical values can differ from them by an ulp.
    if rewards.windows(2).all(|w| w[0] == w[1]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + ADVANTAGE_EPS;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    /// Rewards are costs (tour lengths); lower is better.
    Minimize,
    /// Rewards are utilities (negated costs); higher is better.
    Maximize,
}

/// Log-probability sums and rewards of `N` trajectories drawn for one problem.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, log_prob: f64, reward: f64) {
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
    }

    pub fn mean(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }

    pub fn std(&self) -> f64 {
        let mu = self.mean();
        (self.rewards.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / self.rewards.len() as f64).sqrt()
    }
}

/// Surrogate loss `Σ w_i · log p_i` together with the per-trajectory
/// coefficients `w_i`. Descending the loss follows the REINFORCE estimator:
/// back-propagating `w_i` into each trajectory's log-probability yields the
/// parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ReinforceLoss {
    pub value: f64,
    pub weights: Vec<f64>,
}

pub fn reinforce_loss(batch: &RolloutBatch, sense: Sense) -> Result<ReinforceLoss> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let sign = match sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let weights: Vec<f64> = normalize_advantage(&batch.rewards).into_iter().map(|a| sign * a / n as f64).collect();
    let value = weights.iter().zip(&batch.log_probs).map(|(w, lp)| w * lp).sum();
    Ok(ReinforceLoss { value, weights })
}

/// Adds `weight · ∂ log p(chosen) / ∂ scores` into `grad` for one softmax
/// decision over the feasible subset; `probs` must come from
/// [`masked_softmax`] on the same scores.
pub fn add_log_prob_grad(probs: &[f64], chosen: usize, weight: f64, grad: &mut [f64]) {
    for (g, &p) in grad.iter_mut().zip(probs) {
        if p > 0.0 {
            *g -= weight * p;
        }
    }
    grad[chosen] += weight;
}

/// Diagnostics of one policy-gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainStats {
    /// Mean sampled reward (a length when minimizing).
    pub mean_reward: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Floor applied to the target probability inside the logarithm.
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// Whether the target probability was below [`CE_FLOOR`].
    pub clamped: bool,
}

pub fn cross_entropy(probs: &[f64], target: usize) -> CrossEntropy {
    let p = probs[target];
    let clamped = p < CE_FLOOR;
    CrossEntropy { loss: -p.max(CE_FLOOR).ln(), clamped }
}

/// `∂(−log p_target)/∂scores = p − onehot(target)` for a softmax over scores.
pub fn cross_entropy_grad(probs: &[f64], target: usize) -> Vec<f64> {
    let mut g = probs.to_vec();
    g[target] -= 1.0;
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn softmax_examples() {
        let p = masked_softmax(&[0.0, 0.0, 0.0], &[true; 3]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(masked_softmax(&[5.0, 1.0], &[true, false]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(masked_softmax(&[1.0, 2.0], &[false, false]), Err(Error::NoFeasibleAction)));
        let p = masked_softmax(&[1e300, -1e300, f64::NEG_INFINITY], &[true, true, false]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
    }

    /// Error-free transformation sum (Knuth TwoSum), used as an
    /// extended-precision reference.
    fn two_sum_total(xs: &[f64]) -> f64 {
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for &x in xs {
            let t = s + x;
            let bp = t - s;
            let err = (s - (t - bp)) + (x - bp);
            s = t;
            c += err;
        }
        s + c
    }

    #[test]
    fn softmax_matches_compensated_reference() {
        let mut r = rng::rng(17);
        let scores: Vec<f64> = (0..64).map(|_| 20.0 * rng::unit(&mut r) - 10.0).collect();
        let mask: Vec<bool> = (0..64).map(|i| i % 2 == 0).collect();
        let p = masked_softmax(&scores, &mask).unwrap();
        let max = scores.iter().step_by(2).copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().zip(&mask).map(|(&s, &m)| if m { (s - max).exp() } else { 0.0 }).collect();
        let total = two_sum_total(&exps);
        for (i, (&pi, &e)) in p.iter().zip(&exps).enumerate() {
            if mask[i] {
                assert!((pi - e / total).abs() <= 1e-12);
            } else {
                assert_eq!(pi, 0.0);
            }
        }
        assert!((two_sum_total(&p) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn advantage_examples() {
        let a = normalize_advantage(&[1.0, 3.0]);
        assert!((a[0] + 1.0).abs() < 1e-7 && (a[1] - 1.0).abs() < 1e-7);
        assert_eq!(normalize_advantage(&[2.5; 4]), vec![0.0; 4]);

        let mut r = rng::rng(5);
        let rewards: Vec<f64> = (0..128).map(|_| rng::unit(&mut r) * 10.0).collect();
        let a = normalize_advantage(&rewards);
        let mean = a.iter().sum::<f64>() / 128.0;
        let std = (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 128.0).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn equal_rewards_give_zero_loss() {
        let b = RolloutBatch { log_probs: vec![-1.0, -2.0, -0.5], rewards: vec![4.0; 3] };
        let l = reinforce_loss(&b, Sense::Minimize).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.weights.iter().all(|&w| w == 0.0));
        assert!(matches!(
            reinforce_loss(&RolloutBatch { log_probs: vec![0.0], rewards: vec![1.0] }, Sense::Minimize),
            Err(Error::BatchTooSmall(1))
        ));
    }

    /// One-parameter policy over two trajectories: p(A) = σ(θ), p(B) = 1 − σ(θ).
    /// Trajectory A has length 1, B has length 3.
    #[test]
    fn minimize_pushes_mass_to_shorter() {
        let theta = 0.3f64;
        let sig = 1.0 / (1.0 + (-theta).exp());
        let batch = RolloutBatch { log_probs: vec![sig.ln(), (1.0 - sig).ln()], rewards: vec![1.0, 3.0] };
        let loss = reinforce_loss(&batch, Sense::Minimize).unwrap();
        // d log σ/dθ = 1 − σ, d log(1−σ)/dθ = −σ.
        let grad = loss.weights[0] * (1.0 - sig) + loss.weights[1] * (-sig);
        // Analytically the gradient is −1/2 regardless of θ.
        assert!((grad + 0.5).abs() < 1e-7, "{grad}");
        let stepped = theta - 0.1 * grad;
        assert!(1.0 / (1.0 + (-stepped).exp()) > sig);
    }

    #[test]
    fn reinforce_matches_finite_differences() {
        // Policy: categorical over 3 trajectories with logits θ.
        let theta = [0.2, -0.4, 0.9];
        let rewards = [2.0, 5.0, 3.5];
        let logp = |t: &[f64; 3]| -> [f64; 3] {
            let p = masked_softmax(t, &[true; 3]).unwrap();
            [p[0].ln(), p[1].ln(), p[2].ln()]
        };
        let surrogate = |t: &[f64; 3], w: &[f64]| -> f64 { logp(t).iter().zip(w).map(|(a, b)| a * b).sum() };
        let batch = RolloutBatch { log_probs: logp(&theta).to_vec(), rewards: rewards.to_vec() };
        let loss = reinforce_loss(&batch, Sense::Maximize).unwrap();
        let probs = masked_softmax(&theta, &[true; 3]).unwrap();
        let mut analytic = vec![0.0; 3];
        for (i, &w) in loss.weights.iter().enumerate() {
            add_log_prob_grad(&probs, i, w, &mut analytic);
        }
        let eps = 1e-6;
        for k in 0..3 {
            let mut tp = theta;
            tp[k] += eps;
            let mut tm = theta;
            tm[k] -= eps;
            let numeric = (surrogate(&tp, &loss.weights) - surrogate(&tm, &loss.weights)) / (2.0 * eps);
            let denom = analytic[k].abs().max(numeric.abs()).max(1e-4);
            assert!((analytic[k] - numeric).abs() / denom < 1e-5);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).loss, 0.0);
        let ce = cross_entropy(&[0.25; 4], 2);
        assert!((ce.loss - 4f64.ln()).abs() < 1e-15);
        let mut r = rng::rng(2);
        let raw: Vec<f64> = (0..10).map(|_| rng::unit(&mut r)).collect();
        let p = masked_softmax(&raw, &[true; 10]).unwrap();
        assert_eq!(cross_entropy(&p, 7).loss, -p[7].ln());
        let z = cross_entropy(&[1.0, 0.0], 1);
        assert!(z.clamped);
        assert!((z.loss + CE_FLOOR.ln()).abs() < 1e-12);
        assert_eq!(cross_entropy_grad(&[0.2, 0.8], 1), vec![0.2, 0.8 - 1.0]);
    }
}
