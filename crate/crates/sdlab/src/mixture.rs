//! Gaussian mixtures with exact densities, scores, moments and sampling,
//! plus the corruption operators that derive "artifact" variants of a class.
//!
//! Mixtures are immutable after construction and cache their per-component
//! Cholesky factors on first use, so repeated density/score queries against
//! the same mixture are cheap and safe to share across threads.

use std::sync::OnceLock;

use nalgebra::Cholesky;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::schedule::NoiseSchedule;
use crate::{Error, Matrix, Result, Vector};

/// Smallest admissible covariance eigenvalue.
pub const COV_EIG_FLOOR: f64 = 1e-10;
/// Weights must sum to one within this tolerance after construction.
pub const WEIGHT_TOL: f64 = 1e-12;

const LN_2PI: f64 = 1.837877066409345483560659472811;

struct ComponentFactor {
    chol: Cholesky<f64, nalgebra::Dyn>,
    /// `-0.5 (d ln 2pi + ln det Sigma)`
    log_norm: f64,
}

/// A finite Gaussian mixture on `R^d`.
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vector>,
    covs: Vec<Matrix>,
    dim: usize,
    factors: OnceLock<Vec<ComponentFactor>>,
}

impl Clone for GaussianMixture {
    fn clone(&self) -> Self {
        Self {
            weights: self.weights.clone(),
            means: self.means.clone(),
            covs: self.covs.clone(),
            dim: self.dim,
            factors: OnceLock::new(),
        }
    }
}

impl std::fmt::Debug for GaussianMixture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaussianMixture")
            .field("dim", &self.dim)
            .field("weights", &self.weights)
            .field("means", &self.means)
            .finish_non_exhaustive()
    }
}

impl GaussianMixture {
    /// Build and validate a mixture. Weights are renormalized to sum to one;
    /// covariances are symmetrized and must have eigenvalues above
    /// [`COV_EIG_FLOOR`].
    pub fn new(weights: Vec<f64>, means: Vec<Vector>, covs: Vec<Matrix>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::InvalidMixture(format!(
                "component count mismatch: {} weights, {} means, {} covs",
                weights.len(),
                means.len(),
                covs.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidMixture("weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidMixture("weights sum to zero".into()));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();

        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidMixture("dimension must be positive".into()));
        }
        for (k, m) in means.iter().enumerate() {
            if m.len() != dim {
                return Err(Error::InvalidMixture(format!(
                    "component {k}: mean has dim {} != {dim}",
                    m.len()
                )));
            }
            if !linalg::all_finite(m) {
                return Err(Error::InvalidMixture(format!("component {k}: non-finite mean")));
            }
        }
        let mut sym_covs = Vec::with_capacity(covs.len());
        for (k, c) in covs.iter().enumerate() {
            if c.nrows() != dim || c.ncols() != dim {
                return Err(Error::InvalidMixture(format!(
                    "component {k}: cov is {}x{}, expected {dim}x{dim}",
                    c.nrows(),
                    c.ncols()
                )));
            }
            if c.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidMixture(format!("component {k}: non-finite cov")));
            }
            let sym = linalg::symmetrize(c);
            let min_eig = linalg::min_symmetric_eigenvalue(&sym);
            if min_eig <= COV_EIG_FLOOR {
                return Err(Error::InvalidMixture(format!(
                    "component {k}: covariance eigenvalue {min_eig:.3e} at or below floor {COV_EIG_FLOOR:.0e}"
                )));
            }
            sym_covs.push(sym);
        }
        Ok(Self { weights, means, covs: sym_covs, dim, factors: OnceLock::new() })
    }

    /// Single-Gaussian convenience constructor.
    pub fn single(mean: Vector, cov: Matrix) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// Isotropic single Gaussian `N(mean, var I)`.
    pub fn isotropic(mean: Vector, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::single(mean, Matrix::identity(d, d) * var)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vector] {
        &self.means
    }

    pub fn covs(&self) -> &[Matrix] {
        &self.covs
    }

    /// Mixture mean `sum_k w_k mu_k`.
    pub fn global_mean(&self) -> Vector {
        let mut m = Vector::zeros(self.dim);
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m += mu * *w;
        }
        m
    }

    /// Exact first and second moments of the mixture.
    pub fn moments(&self) -> (Vector, Matrix) {
        let mean = self.global_mean();
        let mut cov = Matrix::zeros(self.dim, self.dim);
        for ((w, mu), sigma) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let d = mu - &mean;
            cov += (sigma + &d * d.transpose()) * *w;
        }
        (mean, linalg::symmetrize(&cov))
    }

    fn factors(&self) -> Result<&[ComponentFactor]> {
        if let Some(f) = self.factors.get() {
            return Ok(f);
        }
        let mut built = Vec::with_capacity(self.n_components());
        for (k, cov) in self.covs.iter().enumerate() {
            let chol = linalg::spd_cholesky(cov, &format!("component {k}"))?;
            let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            let log_norm = -0.5 * (self.dim as f64 * LN_2PI + log_det);
            built.push(ComponentFactor { chol, log_norm });
        }
        // On a race the first initializer wins; both compute identical values.
        let _ = self.factors.set(built);
        Ok(self.factors.get().expect("factors just initialized"))
    }

    /// `log w_k + log N(x; mu_k, Sigma_k)` for every component.
    pub(crate) fn component_log_pdfs(&self, x: &Vector) -> Result<Vec<f64>> {
        let factors = self.factors()?;
        let mut out = Vec::with_capacity(factors.len());
        for ((mu, f), w) in self.means.iter().zip(factors).zip(&self.weights) {
            let diff = x - mu;
            let sol = f.chol.solve(&diff);
            let quad = diff.dot(&sol);
            out.push(w.ln() + f.log_norm - 0.5 * quad);
        }
        Ok(out)
    }

    /// `log p(x)` of the mixture density.
    pub fn log_density(&self, x: &Vector) -> Result<f64> {
        Ok(linalg::log_sum_exp(&self.component_log_pdfs(x)?))
    }

    /// `grad_x log p(x)` via log-space responsibilities.
    pub fn score(&self, x: &Vector) -> Result<Vector> {
        Ok(self.log_density_and_score(x)?.1)
    }

    /// Density and score in one pass (they share the component solves).
    pub fn log_density_and_score(&self, x: &Vector) -> Result<(f64, Vector)> {
        let factors = self.factors()?;
        let mut log_terms = Vec::with_capacity(factors.len());
        let mut solves = Vec::with_capacity(factors.len());
        for ((mu, f), w) in self.means.iter().zip(factors).zip(&self.weights) {
            let diff = x - mu;
            let sol = f.chol.solve(&diff);
            let quad = diff.dot(&sol);
            log_terms.push(w.ln() + f.log_norm - 0.5 * quad);
            solves.push(sol);
        }
        let lse = linalg::log_sum_exp(&log_terms);
        let mut score = Vector::zeros(self.dim);
        for (lt, sol) in log_terms.iter().zip(&solves) {
            let r = (lt - lse).exp();
            // component score is Sigma^{-1} (mu - x) = -sol
            score -= sol * r;
        }
        Ok((lse, score))
    }

    /// Posterior responsibilities `p(k | x)`.
    pub fn responsibilities(&self, x: &Vector) -> Result<Vec<f64>> {
        let log_terms = self.component_log_pdfs(x)?;
        let lse = linalg::log_sum_exp(&log_terms);
        Ok(log_terms.iter().map(|lt| (lt - lse).exp()).collect())
    }

    /// The marginal of `alpha_t X + sigma_t Z` for `X ~ self`, `Z ~ N(0, I)`:
    /// component `k` becomes `N(alpha_t mu_k, alpha_t^2 Sigma_k + sigma_t^2 I)`.
    pub fn noised(&self, schedule: &NoiseSchedule, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidTime { t, reason: "noising time must lie in [0, 1]".into() });
        }
        let (a, s) = schedule.alpha_sigma(t);
        let eye = Matrix::identity(self.dim, self.dim);
        let means = self.means.iter().map(|m| m * a).collect();
        let covs = self.covs.iter().map(|c| c * (a * a) + &eye * (s * s)).collect();
        Self::new(self.weights.clone(), means, covs)
    }

    /// Draw `n` samples using the provided RNG.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vector>> {
        let factors = self.factors()?;
        let mut cumulative = Vec::with_capacity(self.weights.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cumulative.push(acc);
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let k = cumulative.iter().position(|c| u <= *c).unwrap_or(self.weights.len() - 1);
            let z = Vector::from_fn(self.dim, |_, _| StandardNormal.sample(rng));
            out.push(&self.means[k] + factors[k].chol.l() * z);
        }
        Ok(out)
    }

    /// Deterministic sampling from a seed (ChaCha stream).
    pub fn sample_seeded(&self, n: usize, seed: u64) -> Result<Vec<Vector>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample(n, &mut rng)
    }

    /// Apply a corruption operator, yielding a new mixture.
    pub fn corrupted(&self, op: &CorruptionOp) -> Result<Self> {
        op.validate()?;
        let mut weights = self.weights.clone();
        let mut means = self.means.clone();
        let mut covs = self.covs.clone();
        match op {
            CorruptionOp::Smooth { c } | CorruptionOp::Noisy { c } => {
                let eye = Matrix::identity(self.dim, self.dim);
                for cov in &mut covs {
                    *cov += &eye * *c;
                }
            }
            CorruptionOp::Desaturate { lambda } | CorruptionOp::Oversaturate { lambda } => {
                let g = self.global_mean();
                for m in &mut means {
                    *m = &g + (&*m - &g) * *lambda;
                }
            }
            CorruptionOp::Shift { v } => {
                if v.len() != self.dim {
                    return Err(Error::InvalidMixture(format!(
                        "shift vector has dim {}, mixture has dim {}",
                        v.len(),
                        self.dim
                    )));
                }
                let shift = Vector::from_column_slice(v);
                for m in &mut means {
                    *m += &shift;
                }
            }
        }
        // weights untouched by every operator
        let _ = &mut weights;
        Self::new(weights, means, covs)
    }
}

/// Structured corruption of a mixture; the analog of appending artifact
/// descriptors ("smoothed", "oversaturated", ...) to a class label.
///
/// `smooth`/`noisy` widen every component (`Sigma_k + c I`); `desaturate`
/// pulls component means toward the mixture mean by `lambda < 1` while
/// `oversaturate` pushes them apart with `lambda > 1`; `shift` translates
/// everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorruptionOp {
    Smooth { c: f64 },
    Noisy { c: f64 },
    Desaturate { lambda: f64 },
    Oversaturate { lambda: f64 },
    Shift { v: Vec<f64> },
}

impl CorruptionOp {
    pub fn validate(&self) -> Result<()> {
        match self {
            CorruptionOp::Smooth { c } | CorruptionOp::Noisy { c } => {
                if !(c.is_finite() && *c >= 0.0) {
                    return Err(Error::Config(format!("corruption intensity c={c} must be >= 0")));
                }
            }
            CorruptionOp::Desaturate { lambda } | CorruptionOp::Oversaturate { lambda } => {
                if !(lambda.is_finite() && *lambda > 0.0 && *lambda <= 2.0) {
                    return Err(Error::Config(format!(
                        "saturation lambda={lambda} must lie in (0, 2]"
                    )));
                }
            }
            CorruptionOp::Shift { v } => {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Config("shift vector must be finite".into()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn vec1(x: f64) -> Vector {
        Vector::from_column_slice(&[x])
    }

    fn two_mode_1d() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec1(-2.0), vec1(2.0)],
            vec![Matrix::from_element(1, 1, 0.25), Matrix::from_element(1, 1, 0.25)],
        )
        .unwrap()
    }

    #[test]
    fn construction_normalizes_weights() {
        let m = GaussianMixture::new(
            vec![2.0, 6.0],
            vec![vec1(0.0), vec1(1.0)],
            vec![Matrix::identity(1, 1), Matrix::identity(1, 1)],
        )
        .unwrap();
        assert_abs_diff_eq!(m.weights()[0], 0.25, epsilon = 1e-15);
        assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < WEIGHT_TOL);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(GaussianMixture::new(vec![], vec![], vec![]).is_err());
        assert!(GaussianMixture::single(vec1(0.0), Matrix::from_element(1, 1, 0.0)).is_err());
        assert!(GaussianMixture::single(vec1(0.0), Matrix::from_element(1, 1, -1.0)).is_err());
        assert!(GaussianMixture::new(
            vec![1.0, -0.5],
            vec![vec1(0.0), vec1(1.0)],
            vec![Matrix::identity(1, 1), Matrix::identity(1, 1)],
        )
        .is_err());
    }

    #[test]
    fn scalar_gaussian_log_density_matches_closed_form() {
        let m = GaussianMixture::single(vec1(1.5), Matrix::from_element(1, 1, 0.49)).unwrap();
        let x = vec1(0.3);
        let expected = -0.5 * ((0.3f64 - 1.5).powi(2) / 0.49 + (2.0 * std::f64::consts::PI * 0.49).ln());
        assert_relative_eq!(m.log_density(&x).unwrap(), expected, epsilon = 1e-13);
        // score of N(mu, s^2) is (mu - x) / s^2
        assert_relative_eq!(m.score(&x).unwrap()[0], (1.5 - 0.3) / 0.49, epsilon = 1e-13);
    }

    #[test]
    fn mixture_score_matches_finite_differences_2d() {
        let m = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![
                Vector::from_column_slice(&[1.0, -1.0]),
                Vector::from_column_slice(&[-0.5, 0.8]),
            ],
            vec![
                Matrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]),
                Matrix::from_row_slice(2, 2, &[0.3, -0.05, -0.05, 0.6]),
            ],
        )
        .unwrap();
        let x = Vector::from_column_slice(&[0.2, 0.4]);
        let s = m.score(&x).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (m.log_density(&xp).unwrap() - m.log_density(&xm).unwrap()) / (2.0 * h);
            assert_relative_eq!(s[i], fd, max_relative = 1e-7);
        }
    }

    #[test]
    fn moments_agree_with_sampling() {
        let m = two_mode_1d();
        let (mean, cov) = m.moments();
        assert_abs_diff_eq!(mean[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cov[(0, 0)], 4.25, epsilon = 1e-12);
        let samples = m.sample_seeded(200_000, 7).unwrap();
        let emp_mean = samples.iter().map(|s| s[0]).sum::<f64>() / samples.len() as f64;
        let emp_var = samples.iter().map(|s| (s[0] - emp_mean).powi(2)).sum::<f64>()
            / samples.len() as f64;
        assert_abs_diff_eq!(emp_mean, 0.0, epsilon = 0.02);
        assert_abs_diff_eq!(emp_var, 4.25, epsilon = 0.06);
    }

    #[test]
    fn noised_moments_follow_the_schedule() {
        let m = two_mode_1d();
        let sched = NoiseSchedule::default();
        for &t in &[0.1, 0.5, 0.9] {
            let (a, s) = sched.alpha_sigma(t);
            let noised = m.noised(&sched, t).unwrap();
            let (mean, cov) = noised.moments();
            let (m0, c0) = m.moments();
            assert_relative_eq!(mean[0], a * m0[0], epsilon = 1e-12);
            assert_relative_eq!(cov[(0, 0)], a * a * c0[(0, 0)] + s * s, epsilon = 1e-12);
        }
    }

    #[test]
    fn noised_at_one_is_nearly_standard_normal() {
        let m = two_mode_1d();
        for sched in [NoiseSchedule::default(), NoiseSchedule::vp_cosine()] {
            let noised = m.noised(&sched, 1.0).unwrap();
            let (mean, cov) = noised.moments();
            assert_abs_diff_eq!(mean[0], 0.0, epsilon = 1e-3);
            assert_abs_diff_eq!(cov[(0, 0)], 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn smooth_and_noisy_widen_components() {
        let m = two_mode_1d();
        let c = m.corrupted(&CorruptionOp::Smooth { c: 0.5 }).unwrap();
        assert_abs_diff_eq!(c.covs()[0][(0, 0)], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(c.means()[0][0], -2.0, epsilon = 1e-15);
        let n = c.corrupted(&CorruptionOp::Noisy { c: 0.25 }).unwrap();
        assert_abs_diff_eq!(n.covs()[1][(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn saturation_moves_means_about_the_global_mean() {
        let m = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec1(1.0), vec1(3.0)],
            vec![Matrix::from_element(1, 1, 0.1), Matrix::from_element(1, 1, 0.1)],
        )
        .unwrap();
        // global mean 2: desaturate(0.5) pulls means to 1.5 / 2.5
        let d = m.corrupted(&CorruptionOp::Desaturate { lambda: 0.5 }).unwrap();
        assert_abs_diff_eq!(d.means()[0][0], 1.5, epsilon = 1e-14);
        assert_abs_diff_eq!(d.means()[1][0], 2.5, epsilon = 1e-14);
        // oversaturate(2) pushes them to 0 / 4
        let o = m.corrupted(&CorruptionOp::Oversaturate { lambda: 2.0 }).unwrap();
        assert_abs_diff_eq!(o.means()[0][0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(o.means()[1][0], 4.0, epsilon = 1e-14);
        // identity at lambda = 1
        let i = m.corrupted(&CorruptionOp::Desaturate { lambda: 1.0 }).unwrap();
        assert_abs_diff_eq!(i.means()[0][0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn corruption_parameter_validation() {
        let m = two_mode_1d();
        assert!(m.corrupted(&CorruptionOp::Smooth { c: -0.1 }).is_err());
        assert!(m.corrupted(&CorruptionOp::Desaturate { lambda: 0.0 }).is_err());
        assert!(m.corrupted(&CorruptionOp::Oversaturate { lambda: 2.5 }).is_err());
        assert!(m.corrupted(&CorruptionOp::Shift { v: vec![1.0, 2.0] }).is_err());
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let m = two_mode_1d();
        let a = m.sample_seeded(32, 99).unwrap();
        let b = m.sample_seeded(32, 99).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }

    proptest! {
        #[test]
        fn corruption_preserves_weights_and_determinism(
            c in 0.0f64..2.0,
            lambda in 0.05f64..2.0,
            shift in -3.0f64..3.0,
        ) {
            let m = two_mode_1d();
            for op in [
                CorruptionOp::Smooth { c },
                CorruptionOp::Noisy { c },
                CorruptionOp::Desaturate { lambda },
                CorruptionOp::Oversaturate { lambda },
                CorruptionOp::Shift { v: vec![shift] },
            ] {
                let a = m.corrupted(&op).unwrap();
                let b = m.corrupted(&op).unwrap();
                prop_assert_eq!(a.weights(), m.weights());
                prop_assert_eq!(a.means(), b.means());
                prop_assert_eq!(a.covs(), b.covs());
            }
        }

        #[test]
        fn log_density_integrates_shift_invariance(x in -4.0f64..4.0, s in -2.0f64..2.0) {
            // shifting the mixture and the query point together leaves the density unchanged
            let m = two_mode_1d();
            let shifted = m.corrupted(&CorruptionOp::Shift { v: vec![s] }).unwrap();
            let a = m.log_density(&vec1(x)).unwrap();
            let b = shifted.log_density(&vec1(x + s)).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
