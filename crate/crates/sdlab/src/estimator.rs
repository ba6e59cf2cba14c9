//! Fitted source models: density estimators over a particle population,
//! used where a method needs the score of the *current* particles rather
//! than of a fixed class.
//!
//! All estimators return a [`GaussianMixture`], so the noised score of a
//! fitted model comes from the same exact machinery as the world's own
//! classes — estimation error is the only gap.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::mixture::GaussianMixture;
use crate::schedule::NoiseSchedule;
use crate::{Error, Matrix, Result, Vector};

/// Diagonal loading applied to every fitted covariance.
pub const COV_RIDGE: f64 = 1e-6;

fn check_points(points: &[Vector]) -> Result<usize> {
    let n = points.len();
    if n == 0 {
        return Err(Error::Fit("cannot fit a density to zero points".into()));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Fit("points must share a positive dimension".into()));
    }
    if points.iter().any(|p| !linalg::all_finite(p)) {
        return Err(Error::Fit("points contain non-finite coordinates".into()));
    }
    Ok(dim)
}

fn sample_moments(points: &[Vector]) -> (Vector, Matrix) {
    let n = points.len() as f64;
    let dim = points[0].len();
    let mut mean = Vector::zeros(dim);
    for p in points {
        mean += p;
    }
    mean /= n;
    let mut cov = Matrix::zeros(dim, dim);
    for p in points {
        let d = p - &mean;
        cov += &d * d.transpose();
    }
    cov /= n;
    (mean, cov)
}

/// Single-Gaussian moment match with ridge-regularized covariance.
pub fn fit_gaussian(points: &[Vector]) -> Result<GaussianMixture> {
    let dim = check_points(points)?;
    let (mean, mut cov) = sample_moments(points);
    for i in 0..dim {
        cov[(i, i)] += COV_RIDGE;
    }
    GaussianMixture::new(vec![1.0], vec![mean], vec![cov])
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmSpec {
    pub k: usize,
    pub max_iters: usize,
    /// Stop when the mean log-likelihood improves by less than this
    /// (relative to `1 + |ll|`).
    pub tol: f64,
    pub seed: u64,
}

impl Default for EmSpec {
    fn default() -> Self {
        Self { k: 2, max_iters: 200, tol: 1e-8, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub mixture: GaussianMixture,
    /// Mean log-likelihood after each EM iteration.
    pub loglik_trace: Vec<f64>,
}

impl GmmFit {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("EM always runs at least one iteration")
    }
}

/// Distance-squared-weighted center seeding.
fn kmeans_pp_centers(points: &[Vector], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vector> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| (p - c).norm_squared()).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.push(points[idx].clone());
    }
    centers
}

/// Expectation-maximization for a `k`-component mixture, seeded
/// deterministically. Collapsed components are reseeded at the worst-fit
/// point instead of being dropped.
pub fn fit_gmm_em(points: &[Vector], spec: &EmSpec) -> Result<GmmFit> {
    let dim = check_points(points)?;
    if spec.k == 0 {
        return Err(Error::Fit("EM needs k >= 1 components".into()));
    }
    if points.len() < spec.k {
        return Err(Error::Fit(format!(
            "EM with k = {} needs at least that many points, got {}",
            spec.k,
            points.len()
        )));
    }
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (_, global_cov) = sample_moments(points);
    let ridged_global = {
        let mut c = global_cov;
        for i in 0..dim {
            c[(i, i)] += COV_RIDGE.max(1e-3);
        }
        c
    };

    let mut weights = vec![1.0 / spec.k as f64; spec.k];
    let mut means = kmeans_pp_centers(points, spec.k, &mut rng);
    let mut covs = vec![ridged_global.clone(); spec.k];
    let mut trace = Vec::new();

    for _ in 0..spec.max_iters.max(1) {
        let model = GaussianMixture::new(weights.clone(), means.clone(), covs.clone())?;
        // E-step: responsibilities and the per-point log-likelihoods share
        // the same component terms.
        let mut resp = vec![vec![0.0; spec.k]; n];
        let mut ll = 0.0;
        let mut worst = (f64::INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let lp = model.component_log_pdfs(p)?;
            let lse = linalg::log_sum_exp(&lp);
            ll += lse;
            if lse < worst.0 {
                worst = (lse, i);
            }
            for (r, l) in resp[i].iter_mut().zip(&lp) {
                *r = (l - lse).exp();
            }
        }
        ll /= n as f64;

        // M-step with collapse recovery.
        for j in 0..spec.k {
            let nk: f64 = resp.iter().map(|r| r[j]).sum();
            if nk < 1e-8 {
                means[j] = points[worst.1].clone();
                covs[j] = ridged_global.clone();
                weights[j] = 1.0 / n as f64;
                continue;
            }
            let mut mean = Vector::zeros(dim);
            for (r, p) in resp.iter().zip(points) {
                mean += p * r[j];
            }
            mean /= nk;
            let mut cov = Matrix::zeros(dim, dim);
            for (r, p) in resp.iter().zip(points) {
                let d = p - &mean;
                cov += &d * d.transpose() * r[j];
            }
            cov /= nk;
            for i in 0..dim {
                cov[(i, i)] += COV_RIDGE;
            }
            means[j] = mean;
            covs[j] = cov;
            weights[j] = nk / n as f64;
        }
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }

        let converged =
            trace.last().is_some_and(|prev: &f64| (ll - prev).abs() < spec.tol * (1.0 + ll.abs()));
        trace.push(ll);
        if converged {
            break;
        }
    }

    Ok(GmmFit { mixture: GaussianMixture::new(weights, means, covs)?, loglik_trace: trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// `(4 / (d + 2))^{1/(d+4)} n^{-1/(d+4)} sigma_hat`, with `sigma_hat`
    /// the root-mean per-coordinate standard deviation.
    Silverman,
    Fixed(f64),
}

pub fn silverman_bandwidth(points: &[Vector]) -> Result<f64> {
    let dim = check_points(points)? as f64;
    let n = points.len() as f64;
    let (_, cov) = sample_moments(points);
    let sigma = (cov.trace() / dim).sqrt().max(1e-3);
    Ok((4.0 / (dim + 2.0)).powf(1.0 / (dim + 4.0)) * n.powf(-1.0 / (dim + 4.0)) * sigma)
}

/// Kernel density estimate: one isotropic component per point.
pub fn fit_kde(points: &[Vector], bandwidth: Bandwidth) -> Result<GaussianMixture> {
    let dim = check_points(points)?;
    let h = match bandwidth {
        Bandwidth::Silverman => silverman_bandwidth(points)?,
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => {
            return Err(Error::Fit(format!("KDE bandwidth must be positive and finite, got {h}")))
        }
    };
    let n = points.len();
    let cov = Matrix::identity(dim, dim) * (h * h);
    GaussianMixture::new(vec![1.0 / n as f64; n], points.to_vec(), vec![cov; n])
}

/// Which estimator a score-matching surrogate refreshes with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SourceModelSpec {
    Gaussian,
    Gmm { k: usize },
    Kde { bandwidth: Option<f64> },
}

impl Default for SourceModelSpec {
    fn default() -> Self {
        Self::Gaussian
    }
}

/// A source model fitted to a particle snapshot, with bookkeeping for how
/// stale it is.
#[derive(Debug, Clone)]
pub struct FittedSource {
    pub mixture: GaussianMixture,
    /// Optimizer iteration the snapshot was taken at.
    pub fitted_at: usize,
    /// Final mean log-likelihood when the fit came from EM.
    pub em_loglik: Option<f64>,
}

impl FittedSource {
    pub fn fit(spec: &SourceModelSpec, points: &[Vector], iter: usize, seed: u64) -> Result<Self> {
        let (mixture, em_loglik) = match spec {
            SourceModelSpec::Gaussian => (fit_gaussian(points)?, None),
            SourceModelSpec::Gmm { k } => {
                let fit = fit_gmm_em(points, &EmSpec { k: *k, seed, ..EmSpec::default() })?;
                let ll = fit.final_loglik();
                (fit.mixture, Some(ll))
            }
            SourceModelSpec::Kde { bandwidth } => {
                let bw = bandwidth.map_or(Bandwidth::Silverman, Bandwidth::Fixed);
                (fit_kde(points, bw)?, None)
            }
        };
        Ok(Self { mixture, fitted_at: iter, em_loglik })
    }

    /// Noise prediction of the fitted model at `(x, t)`.
    pub fn eps(&self, schedule: &NoiseSchedule, x: &Vector, t: f64) -> Result<Vector> {
        source_eps(&self.mixture, schedule, x, t)
    }

    pub fn staleness(&self, iter: usize) -> usize {
        iter.saturating_sub(self.fitted_at)
    }
}

/// `eps = -sigma_t * score` of `model`'s noised marginal at `t`.
pub fn source_eps(
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    x: &Vector,
    t: f64,
) -> Result<Vector> {
    let sigma = schedule.sigma(t);
    Ok(model.noised(schedule, t)?.score(x)? * (-sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::world::{ClassConfig, WorldConfig};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn two_cluster_points(seed: u64, n: usize) -> Vec<Vector> {
        let gm = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![Vector::from_column_slice(&[-3.0, 0.0]), Vector::from_column_slice(&[3.0, 1.0])],
            vec![Matrix::identity(2, 2) * 0.2, Matrix::identity(2, 2) * 0.2],
        )
        .unwrap();
        gm.sample_seeded(n, seed).unwrap()
    }

    #[test]
    fn gaussian_fit_matches_sample_moments() {
        let pts = two_cluster_points(7, 500);
        let fit = fit_gaussian(&pts).unwrap();
        let (mean, cov) = sample_moments(&pts);
        assert_abs_diff_eq!(fit.means()[0], mean, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.covs()[0][(0, 0)], cov[(0, 0)] + COV_RIDGE, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_fit_survives_a_single_point() {
        let fit = fit_gaussian(&[Vector::from_column_slice(&[1.0, 2.0])]).unwrap();
        assert_abs_diff_eq!(fit.covs()[0][(0, 0)], COV_RIDGE, epsilon = 1e-18);
        fit.score(&Vector::from_column_slice(&[1.0, 2.0])).unwrap();
    }

    #[test]
    fn em_recovers_well_separated_clusters() {
        let pts = two_cluster_points(11, 600);
        let fit = fit_gmm_em(&pts, &EmSpec { k: 2, seed: 3, ..EmSpec::default() }).unwrap();
        let mut means: Vec<f64> = fit.mixture.means().iter().map(|m| m[0]).collect();
        means.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(means[0], -3.0, epsilon = 0.15);
        assert_abs_diff_eq!(means[1], 3.0, epsilon = 0.15);
        for w in fit.mixture.weights() {
            assert_abs_diff_eq!(*w, 0.5, epsilon = 0.1);
        }
        for pair in fit.loglik_trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9, "log-likelihood decreased: {pair:?}");
        }
    }

    #[test]
    fn em_is_deterministic_under_a_fixed_seed() {
        let pts = two_cluster_points(11, 200);
        let spec = EmSpec { k: 3, seed: 42, ..EmSpec::default() };
        let a = fit_gmm_em(&pts, &spec).unwrap();
        let b = fit_gmm_em(&pts, &spec).unwrap();
        assert_eq!(a.loglik_trace, b.loglik_trace);
        for (ma, mb) in a.mixture.means().iter().zip(b.mixture.means()) {
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn em_rejects_degenerate_requests() {
        let pts = two_cluster_points(1, 4);
        assert!(fit_gmm_em(&pts, &EmSpec { k: 0, ..EmSpec::default() }).is_err());
        assert!(fit_gmm_em(&pts, &EmSpec { k: 5, ..EmSpec::default() }).is_err());
        assert!(fit_gaussian(&[]).is_err());
    }

    #[test]
    fn kde_puts_mass_on_the_data() {
        let pts = two_cluster_points(5, 64);
        let kde = fit_kde(&pts, Bandwidth::Silverman).unwrap();
        assert_eq!(kde.n_components(), 64);
        let on = kde.log_density(&pts[0]).unwrap();
        let off = kde.log_density(&Vector::from_column_slice(&[40.0, 40.0])).unwrap();
        assert!(on > off + 10.0);
    }

    #[test]
    fn fitted_eps_matches_the_oracle_when_the_fit_is_the_truth() {
        let w = WorldConfig {
            schedule: NoiseSchedule::default(),
            classes: vec![ClassConfig::content(
                "c",
                vec![0.5, 0.5],
                vec![vec![-2.0], vec![2.0]],
                vec![vec![vec![0.25]], vec![vec![0.25]]],
            )],
            uncond: None,
        }
        .build()
        .unwrap();
        let cond = w.condition_class("c").unwrap();
        let model = w.data_mixture_for(&cond).unwrap();
        let x = Vector::from_column_slice(&[0.7]);
        for &t in &[0.1, 0.5, 0.9] {
            let fitted = source_eps(&model, w.schedule(), &x, t).unwrap();
            let truth = oracle::eps_pred(&w, &cond, &x, t).unwrap().eps;
            assert_relative_eq!(fitted[0], truth[0], epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn staleness_counts_from_the_fit_iteration() {
        let pts = two_cluster_points(2, 32);
        let f = FittedSource::fit(&SourceModelSpec::Gaussian, &pts, 40, 0).unwrap();
        assert_eq!(f.staleness(40), 0);
        assert_eq!(f.staleness(55), 15);
        assert!(f.em_loglik.is_none());
        let g = FittedSource::fit(&SourceModelSpec::Gmm { k: 2 }, &pts, 0, 0).unwrap();
        assert!(g.em_loglik.is_some());
    }
}
