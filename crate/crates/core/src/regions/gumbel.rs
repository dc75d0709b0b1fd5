use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One Gumbel-Softmax draw over the `M` proposals of an anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSample {
    pub logits: Vec<f64>,
    pub gumbel: Vec<f64>,
    /// `softmax(logits + gumbel)`, the differentiable path.
    pub weights: Vec<f64>,
    /// 0-based `argmax(logits + gumbel)`, the forward choice.
    pub hard_index: usize,
}

impl SelectionSample {
    /// Builds a sample from explicit noise.
    pub fn from_noise(logits: Vec<f64>, gumbel: Vec<f64>) -> Result<Self> {
        if logits.is_empty() || logits.len() != gumbel.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} noise values", logits.len()),
                actual: format!("{}", gumbel.len()),
            });
        }
        if logits.iter().chain(&gumbel).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("logits and noise must be finite".into()));
        }
        let perturbed: Vec<f64> = logits.iter().zip(&gumbel).map(|(p, g)| p + g).collect();
        let weights = softmax(&perturbed);
        let hard_index = argmax(&perturbed);
        Ok(Self {
            logits,
            gumbel,
            weights,
            hard_index,
        })
    }

    /// 1-based size index `j*` of the selected proposal.
    pub fn size_index(&self) -> usize {
        self.hard_index + 1
    }
}

/// Gumbel noise `-ln(-ln u)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Draws `u ~ U(0, 1)` per logit from a seeded generator (redrawing exact 0 or
/// 1) and perturbs the logits with Gumbel noise.
pub fn sample_gumbel_selection(logits: &[f64], seed: u64) -> Result<SelectionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gumbel = logits
        .iter()
        .map(|_| loop {
            let u: f64 = rng.gen();
            if u > 0.0 && u < 1.0 {
                break gumbel_from_uniform(u);
            }
        })
        .collect();
    SelectionSample::from_noise(logits.to_vec(), gumbel)
}

/// Numerically stable softmax at temperature 1.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Surrogate objective `sum_j w_j * loss_j` with the losses held constant.
pub fn surrogate_value(weights: &[f64], losses: &[f64]) -> f64 {
    weights.iter().zip(losses).map(|(w, l)| w * l).sum()
}

/// Gradient of [`surrogate_value`] with respect to the logits, through the
/// softmax: `w_k * (loss_k - sum_j w_j loss_j)`.
pub fn surrogate_gradient(weights: &[f64], losses: &[f64]) -> Vec<f64> {
    let mean = surrogate_value(weights, losses);
    weights
        .iter()
        .zip(losses)
        .map(|(w, l)| w * (l - mean))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn gumbel_of_half() {
        // -ln(-ln 0.5) = -ln(ln 2)
        let oracle = -(2f64.ln()).ln();
        assert_abs_diff_eq!(gumbel_from_uniform(0.5), oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(oracle, 0.36651, epsilon = 1e-5);
    }

    #[test]
    fn dominant_logit_wins_without_noise() {
        let mut logits = vec![0.0; 7];
        logits[0] = 10.0;
        let s = SelectionSample::from_noise(logits, vec![0.0; 7]).unwrap();
        assert_eq!(s.hard_index, 0);
        assert_eq!(s.size_index(), 1);
        assert!(s.weights[0] > 0.99);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let s = SelectionSample::from_noise(vec![1.0, 2.0, 2.0], vec![0.0; 3]).unwrap();
        assert_eq!(s.hard_index, 1);
    }

    #[test]
    fn two_way_hand_gradient() {
        let w = softmax(&[0.0, 0.0]);
        let g = surrogate_gradient(&w, &[0.0, 1.0]);
        assert_abs_diff_eq!(g[0], -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn constant_losses_give_zero_gradient() {
        let w = softmax(&[0.3, -1.2, 2.0, 0.0]);
        assert!(surrogate_gradient(&w, &[0.7; 4]).iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn seeded_draws_repeat() {
        let a = sample_gumbel_selection(&[0.1, 0.2, 0.3], 5).unwrap();
        assert_eq!(a, sample_gumbel_selection(&[0.1, 0.2, 0.3], 5).unwrap());
        assert_ne!(a.gumbel, sample_gumbel_selection(&[0.1, 0.2, 0.3], 6).unwrap().gumbel);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(sample_gumbel_selection(&[f64::NAN, 0.0], 1).is_err());
    }

    proptest! {
        #[test]
        fn weights_normalized(logits in prop::collection::vec(-20.0f64..20.0, 1..10), seed in any::<u64>()) {
            let s = sample_gumbel_selection(&logits, seed).unwrap();
            prop_assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(s.weights.iter().all(|w| *w >= 0.0));
            let perturbed: Vec<f64> = logits.iter().zip(&s.gumbel).map(|(a, b)| a + b).collect();
            prop_assert_eq!(s.hard_index, argmax(&perturbed));
        }

        #[test]
        fn analytic_jacobian_matches_explicit(logits in prop::collection::vec(-3.0f64..3.0, 2..8), seed in any::<u64>()) {
            let losses: Vec<f64> = logits.iter().enumerate().map(|(i, _)| ((seed.wrapping_add(i as u64)) % 97) as f64 / 97.0).collect();
            let w = softmax(&logits);
            let g = surrogate_gradient(&w, &losses);
            // Explicit softmax Jacobian dw_j/dpi_k = w_j (delta_jk - w_k).
            for k in 0..w.len() {
                let explicit: f64 = (0..w.len())
                    .map(|j| losses[j] * w[j] * (f64::from(u8::from(j == k)) - w[k]))
                    .sum();
                prop_assert!((explicit - g[k]).abs() < 1e-12);
            }
        }
    }
}
