//! Bias diagnostics for the source side of two-endpoint gradients.
//!
//! A method that assumes the particles are distributed like some condition
//! incurs a denoised-endpoint error whenever they are not. Because the
//! target endpoint is shared, that error is exactly the gap between the
//! posterior means of the assumed source and of the particles' actual
//! distribution, measured at the shared noised state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::mixture::GaussianMixture;
use crate::oracle;
use crate::world::{Condition, World};
use crate::{Error, Result, Vector};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BiasEstimate {
    /// Mean norm of the denoised-endpoint gap.
    pub mean: f64,
    /// Standard error of that mean.
    pub std_err: f64,
    pub n: usize,
}

impl BiasEstimate {
    /// `true` when this estimate is below `other` with `k`-sigma separation
    /// (independent samples assumed).
    pub fn below(&self, other: &BiasEstimate, k: f64) -> bool {
        let gap = other.mean - self.mean;
        let sigma = (self.std_err.powi(2) + other.std_err.powi(2)).sqrt();
        gap > k * sigma
    }
}

/// Estimate the source-side endpoint bias of conditioning on `assumed` when
/// the particles actually follow `actual`: draw `(x0, eps)` pairs, noise to
/// time `t`, and average
/// `| x0_hat(x_t; assumed) - x0_hat(x_t; actual) |`.
pub fn mismatch_bias(
    world: &World,
    actual: &GaussianMixture,
    assumed: &Condition,
    t: f64,
    n: usize,
    seed: u64,
) -> Result<BiasEstimate> {
    if n < 2 {
        return Err(Error::Config("bias estimation needs n >= 2 draws".into()));
    }
    if actual.dim() != world.dim() {
        return Err(Error::Config(format!(
            "actual distribution has dimension {}, world has {}",
            actual.dim(),
            world.dim()
        )));
    }
    let (alpha, sigma) = world.schedule().alpha_sigma(t);
    let noised_actual = actual.noised(world.schedule(), t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0s = actual.sample(n, &mut rng)?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for x0 in &x0s {
        let eps = Vector::from_fn(world.dim(), |_, _| StandardNormal.sample(&mut rng));
        let x_t = x0 * alpha + eps * sigma;
        let hat_assumed = oracle::eps_pred(world, assumed, &x_t, t)?.x0_hat;
        // posterior mean under the particles' true law, via its noised score
        let score_actual = noised_actual.score(&x_t)?;
        let eps_actual = score_actual * (-sigma);
        let hat_actual = (&x_t - eps_actual * sigma) / alpha;
        let gap = (hat_assumed - hat_actual).norm();
        sum += gap;
        sum_sq += gap * gap;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    Ok(BiasEstimate { mean, std_err: (var / n as f64).sqrt(), n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::CorruptionOp;
    use crate::schedule::NoiseSchedule;
    use crate::world::{ClassConfig, WorldConfig};
    use approx::assert_abs_diff_eq;

    fn corrupted_world() -> World {
        WorldConfig {
            schedule: NoiseSchedule::default(),
            classes: vec![
                ClassConfig::content("a", vec![1.0], vec![vec![-2.0]], vec![vec![vec![0.25]]]),
                ClassConfig::content("b", vec![1.0], vec![vec![2.0]], vec![vec![vec![0.25]]]),
                ClassConfig::corruption("b:noisy", "b", vec![CorruptionOp::Noisy { c: 0.3 }]),
            ],
            uncond: None,
        }
        .build()
        .unwrap()
    }

    #[test]
    fn bias_vanishes_when_the_assumption_is_exact() {
        let w = corrupted_world();
        let cond = w.condition_class("b:noisy").unwrap();
        let actual = w.data_mixture_for(&cond).unwrap();
        let est = mismatch_bias(&w, &actual, &cond, 0.5, 200, 1).unwrap();
        assert_abs_diff_eq!(est.mean, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(est.std_err, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn matched_condition_beats_the_unconditional_assumption() {
        let w = corrupted_world();
        let corr = w.condition_class("b:noisy").unwrap();
        let actual = w.data_mixture_for(&corr).unwrap();
        let matched = mismatch_bias(&w, &actual, &corr, 0.5, 500, 2).unwrap();
        let uncond = mismatch_bias(&w, &actual, &w.uncond(), 0.5, 500, 2).unwrap();
        assert!(
            matched.below(&uncond, 3.0),
            "expected matched ({} +- {}) << unconditional ({} +- {})",
            matched.mean,
            matched.std_err,
            uncond.mean,
            uncond.std_err
        );
    }

    #[test]
    fn estimates_are_deterministic() {
        let w = corrupted_world();
        let cond = w.condition_class("a").unwrap();
        let actual = w.data_mixture_for(&w.condition_class("b").unwrap()).unwrap();
        let x = mismatch_bias(&w, &actual, &cond, 0.3, 100, 9).unwrap();
        let y = mismatch_bias(&w, &actual, &cond, 0.3, 100, 9).unwrap();
        assert_eq!(x.mean.to_bits(), y.mean.to_bits());
        assert!(x.mean > 0.1, "assuming the wrong class should cost something");
    }
}
