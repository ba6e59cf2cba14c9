//! Exact conditional score/epsilon queries against a world.
//!
//! The conventions are fixed once here and used everywhere else:
//!
//! - `score(x, t) = grad_x log p_t(x | cond)` of the exact noised mixture,
//! - `eps(x, t) = -sigma_t * score(x, t)` (the noise the ideal denoiser
//!   would predict),
//! - `x0_hat = (x - sigma_t * eps) / alpha_t` (Tweedie / single-step
//!   denoising estimate; exact posterior mean for a single Gaussian class).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::mixture::GaussianMixture;
use crate::world::{Condition, World};
use crate::{Error, Result, Vector};

/// A conditional score query, bundled for record-keeping.
#[derive(Debug, Clone)]
pub struct ScoreQuery {
    pub x: Vector,
    pub t: f64,
    pub cond: Condition,
}

/// Everything the ideal denoiser knows at `(x, t)`.
#[derive(Debug, Clone)]
pub struct EpsPrediction {
    pub eps: Vector,
    pub score: Vector,
    pub x0_hat: Vector,
    pub log_density: f64,
}

/// Classifier-free-guided prediction with its ingredients.
#[derive(Debug, Clone)]
pub struct CfgEps {
    pub eps: Vector,
    pub eps_cond: Vector,
    pub eps_uncond: Vector,
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidTime { t, reason: "query time must lie in [0, 1]".into() });
    }
    Ok(())
}

/// Exact conditional score at `(x, t)`.
pub fn score(world: &World, cond: &Condition, x: &Vector, t: f64) -> Result<Vector> {
    check_t(t)?;
    world.mixture_for(cond, t)?.score(x)
}

/// Exact log-density of the noised conditional at `(x, t)`.
pub fn log_density(world: &World, cond: &Condition, x: &Vector, t: f64) -> Result<f64> {
    check_t(t)?;
    world.mixture_for(cond, t)?.log_density(x)
}

/// Full denoiser bundle at `(x, t)`.
pub fn eps_pred(world: &World, cond: &Condition, x: &Vector, t: f64) -> Result<EpsPrediction> {
    check_t(t)?;
    let (alpha, sigma) = world.schedule().alpha_sigma(t);
    let (log_density, score) = world.mixture_for(cond, t)?.log_density_and_score(x)?;
    let eps = &score * (-sigma);
    let x0_hat = (x - &eps * sigma) / alpha;
    Ok(EpsPrediction { eps, score, x0_hat, log_density })
}

/// Classifier-free guidance: `eps_u + s (eps_c - eps_u)`. Affine in `s`;
/// `s = 0` is the unconditional prediction and `s = 1` the conditional one.
pub fn cfg_eps(
    world: &World,
    cond: &Condition,
    uncond: &Condition,
    x: &Vector,
    t: f64,
    s: f64,
) -> Result<CfgEps> {
    let eps_cond = eps_pred(world, cond, x, t)?.eps;
    let eps_uncond = eps_pred(world, uncond, x, t)?.eps;
    let eps = &eps_uncond + (&eps_cond - &eps_uncond) * s;
    Ok(CfgEps { eps, eps_cond, eps_uncond })
}

/// A score model to be evaluated under the DSM objective.
pub trait ScoreFn {
    fn score(&self, x: &Vector, t: f64) -> Result<Vector>;
}

impl<F> ScoreFn for F
where
    F: Fn(&Vector, f64) -> Result<Vector>,
{
    fn score(&self, x: &Vector, t: f64) -> Result<Vector> {
        self(x, t)
    }
}

/// The world's own exact score as a [`ScoreFn`].
pub struct OracleScore<'w> {
    pub world: &'w World,
    pub cond: Condition,
}

impl ScoreFn for OracleScore<'_> {
    fn score(&self, x: &Vector, t: f64) -> Result<Vector> {
        score(self.world, &self.cond, x, t)
    }
}

#[derive(Debug, Clone)]
pub struct DsmSpec {
    pub n: usize,
    pub seed: u64,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl Default for DsmSpec {
    fn default() -> Self {
        Self { n: 10_000, seed: 0, t_lo: 1e-3, t_hi: 1.0 }
    }
}

/// Monte-Carlo denoising-score-matching loss of a candidate model against
/// the conditional data distribution:
/// `E ||eps_hat(x_t, t) - eps||^2` with `x_t = alpha_t x_0 + sigma_t eps`,
/// `x_0 ~ p(.|cond)`, `t ~ U[t_lo, t_hi]`. Deterministic for a fixed seed.
pub fn dsm_loss(world: &World, cond: &Condition, model: &dyn ScoreFn, spec: &DsmSpec) -> Result<f64> {
    if spec.n == 0 {
        return Err(Error::Config("dsm_loss needs n > 0".into()));
    }
    if !(spec.t_lo > 0.0 && spec.t_lo <= spec.t_hi && spec.t_hi <= 1.0) {
        return Err(Error::Config(format!(
            "dsm t-range [{}, {}] must satisfy 0 < t_lo <= t_hi <= 1",
            spec.t_lo, spec.t_hi
        )));
    }
    let data = world.data_mixture_for(cond)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x0s = data.sample(spec.n, &mut rng)?;
    let mut total = 0.0;
    for x0 in &x0s {
        let t = spec.t_lo + (spec.t_hi - spec.t_lo) * rand::Rng::random::<f64>(&mut rng);
        let (alpha, sigma) = world.schedule().alpha_sigma(t);
        let eps = Vector::from_fn(world.dim(), |_, _| StandardNormal.sample(&mut rng));
        let x_t = x0 * alpha + &eps * sigma;
        let eps_hat = model.score(&x_t, t)? * (-sigma);
        total += (&eps_hat - &eps).norm_squared();
    }
    Ok(total / spec.n as f64)
}

/// A conditional scorer with an optional bucketed factor cache.
///
/// By default every query factorizes the noised covariances at the exact
/// query `t`. With bucketing enabled, `t` is quantized to `n_buckets` cell
/// centers and the prepared mixtures are cached per cell — a deliberate
/// speed/exactness trade for long optimization loops.
pub struct ConditionalScorer<'w> {
    world: &'w World,
    cond: Condition,
    buckets: Option<BucketCache>,
}

struct BucketCache {
    n: usize,
    slots: Vec<std::sync::OnceLock<std::sync::Arc<(f64, GaussianMixture)>>>,
}

impl<'w> ConditionalScorer<'w> {
    pub fn exact(world: &'w World, cond: Condition) -> Self {
        Self { world, cond, buckets: None }
    }

    pub fn bucketed(world: &'w World, cond: Condition, n_buckets: usize) -> Self {
        let n = n_buckets.max(1);
        let mut slots = Vec::with_capacity(n);
        slots.resize_with(n, std::sync::OnceLock::new);
        Self { world, cond, buckets: Some(BucketCache { n, slots }) }
    }

    pub fn cond(&self) -> &Condition {
        &self.cond
    }

    /// The `(t_used, eps)` pair; `t_used` differs from `t` only when
    /// bucketing is active.
    pub fn eps(&self, x: &Vector, t: f64) -> Result<(f64, Vector)> {
        check_t(t)?;
        match &self.buckets {
            None => Ok((t, eps_pred(self.world, &self.cond, x, t)?.eps)),
            Some(cache) => {
                let idx = ((t * cache.n as f64) as usize).min(cache.n - 1);
                if cache.slots[idx].get().is_none() {
                    let t_repr = (idx as f64 + 0.5) / cache.n as f64;
                    let prepared =
                        std::sync::Arc::new((t_repr, self.world.mixture_for(&self.cond, t_repr)?));
                    // a racing initializer computed the same value; either wins
                    let _ = cache.slots[idx].set(prepared);
                }
                let entry = cache.slots[idx].get().expect("slot initialized above");
                let (t_repr, mixture) = (entry.0, &entry.1);
                let sigma = self.world.schedule().sigma(t_repr);
                Ok((t_repr, mixture.score(x)? * (-sigma)))
            }
        }
    }
}

/// Report from the finite-difference self-check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FdCheckReport {
    pub n_queries: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub elapsed_ms: f64,
}

/// Draw a random world: 2-3 content classes of 1-3 components each plus one
/// corruption class, random SPD covariances, dimension `1..=max_dim`.
pub fn random_world(seed: u64, max_dim: usize) -> Result<World> {
    use crate::mixture::CorruptionOp;
    use crate::world::{ClassConfig, WorldConfig};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * rand::Rng::random::<f64>(&mut rng);
    let d = 1 + (uniform(0.0, max_dim as f64 - 1e-9) as usize);
    let n_classes = 2 + (uniform(0.0, 2.0) as usize).min(1);
    let mut classes = Vec::new();
    for ci in 0..n_classes {
        let k = 1 + (uniform(0.0, 3.0) as usize).min(2);
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for _ in 0..k {
            weights.push(uniform(0.2, 1.0));
            means.push((0..d).map(|_| uniform(-3.0, 3.0)).collect::<Vec<_>>());
            // A A^T + floor keeps eigenvalues comfortably positive
            let a = crate::Matrix::from_fn(d, d, |_, _| uniform(-1.0, 1.0));
            let cov = &a * a.transpose() * 0.4 + crate::Matrix::identity(d, d) * 0.05;
            covs.push((0..d).map(|i| (0..d).map(|j| cov[(i, j)]).collect()).collect::<Vec<_>>());
        }
        classes.push(ClassConfig::content(&format!("c{ci}"), weights, means, covs));
    }
    classes.push(ClassConfig::corruption(
        "c0:smooth",
        "c0",
        vec![CorruptionOp::Smooth { c: uniform(0.1, 0.8) }],
    ));
    WorldConfig { schedule: crate::schedule::NoiseSchedule::default(), classes, uncond: None }.build()
}

/// Validate the analytic score against central finite differences of the
/// log-density on random worlds/conditions/times.
pub fn finite_difference_check(n_queries: usize, max_dim: usize, seed: u64, h: f64) -> Result<FdCheckReport> {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    for q in 0..n_queries {
        let world = random_world(seed.wrapping_add(q as u64), max_dim)?;
        let u: f64 = rand::Rng::random(&mut rng);
        let cond = if u < 0.4 {
            world.uncond()
        } else if u < 0.7 {
            world.condition_class("c0")?
        } else {
            let labels: Vec<String> = world.labels().map(|s| s.to_string()).collect();
            world.condition_uniform(&labels, "all")?
        };
        let t = 0.01 + 0.99 * rand::Rng::random::<f64>(&mut rng);
        let x0 = world.mixture_for(&cond, t)?.sample(1, &mut rng)?.pop().expect("one sample");
        let analytic = score(&world, &cond, &x0, t)?;
        let mut fd = Vector::zeros(world.dim());
        for i in 0..world.dim() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[i] += h;
            xm[i] -= h;
            fd[i] = (log_density(&world, &cond, &xp, t)? - log_density(&world, &cond, &xm, t)?)
                / (2.0 * h);
        }
        let rel = (&fd - &analytic).norm() / analytic.norm().max(1e-8);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
    }
    Ok(FdCheckReport {
        n_queries,
        max_rel_err: max_rel,
        mean_rel_err: sum_rel / n_queries.max(1) as f64,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
