//! Particle optimization against the score oracle: the run loop that ties a
//! renderer, a gradient variant, an optimizer, and metric snapshots
//! together.
//!
//! Determinism contract: every particle owns one counter-based RNG stream
//! (master seed, stream = particle index + 1), and each iteration draws, in
//! order, the time, the view (only when several exist), and the noise
//! vector. Results are therefore independent of thread count; wall-clock
//! time is reported out of band and never enters recorded rows.

pub mod diagnostics;
mod grad;
mod optim;
mod render;

pub use diagnostics::{mismatch_bias, BiasEstimate};
pub use grad::{eps_residual, CondSet, GradInputs, GradSample, Method};
pub use optim::{OptimState, OptimizerSpec};
pub use render::Renderer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimator::FittedSource;
use crate::linalg;
use crate::metrics::{self, MetricReport, MetricSpec};
use crate::world::World;
use crate::{Error, Result, Vector};

/// How particle parameters are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitSpec {
    /// Draw from the source condition's data mixture (the unconditional one
    /// if no source is configured). Requires the parameter space to be the
    /// world's space.
    Source,
    /// Isotropic Gaussian in parameter space.
    Gauss { std: f64 },
}

impl Default for InitSpec {
    fn default() -> Self {
        Self::Source
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    /// Condition grammar strings (`uncond`, `class:L`, `corr:B`, `uniform`).
    pub target: String,
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub negative: Option<String>,
    #[serde(default = "d_particles")]
    pub n_particles: usize,
    #[serde(default = "d_iters")]
    pub n_iters: usize,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default = "d_t_range")]
    pub t_range: (f64, f64),
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub metrics: MetricSpec,
}

fn d_particles() -> usize {
    64
}
fn d_iters() -> usize {
    2500
}
fn d_t_range() -> (f64, f64) {
    (0.02, 0.98)
}
fn d_record_every() -> usize {
    50
}

impl RunConfig {
    pub fn new(method: Method, target: impl Into<String>) -> Self {
        Self {
            method,
            target: target.into(),
            source: None,
            negative: None,
            n_particles: d_particles(),
            n_iters: d_iters(),
            optimizer: OptimizerSpec::default(),
            t_range: d_t_range(),
            init: InitSpec::default(),
            seed: 0,
            record_every: d_record_every(),
            metrics: MetricSpec::default(),
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_particles == 0 || self.n_iters == 0 {
            return Err(Error::Config("run needs particles >= 1 and iters >= 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be >= 1".into()));
        }
        let (lo, hi) = self.t_range;
        if !(0.0 < lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("bad time range [{lo}, {hi}]")));
        }
        if let Method::Vsd { refit_every, .. } = &self.method {
            if *refit_every == 0 {
                return Err(Error::Config("vsd refit_every must be >= 1".into()));
            }
        }
        self.optimizer.validate()
    }
}

/// One recorded snapshot of a run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IterRow {
    pub iter: usize,
    #[serde(flatten)]
    pub metrics: MetricReport,
    /// Mean parameter-space gradient norm over particles in the iteration
    /// that produced this row (zero for the initial snapshot).
    pub grad_norm_mean: f64,
    /// Cumulative world score evaluations.
    pub n_evals: usize,
    /// Cumulative fitted-model score evaluations.
    pub n_source_evals: usize,
    /// Cumulative density refits.
    pub n_fit_ops: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub method: &'static str,
    /// Final parameters, one per particle.
    pub particles: Vec<Vector>,
    /// Final renders, particle-major then view-minor.
    pub rendered: Vec<Vector>,
    pub rows: Vec<IterRow>,
    pub n_evals: usize,
    pub n_source_evals: usize,
    pub n_fit_ops: usize,
    /// Wall-clock time; reporting-only, excluded from [`IterRow`]s.
    pub wall_ms: f64,
}

struct Particle {
    theta: Vector,
    theta_init: Vector,
    optim: OptimState,
    rng: ChaCha8Rng,
}

struct StepStats {
    n_evals: usize,
    n_source_evals: usize,
    grad_norm: f64,
}

fn all_renders(renderer: &Renderer, particles: &[Particle]) -> Result<Vec<Vector>> {
    let mut out = Vec::with_capacity(particles.len() * renderer.n_views());
    for p in particles {
        for v in 0..renderer.n_views() {
            out.push(renderer.render(&p.theta, v)?);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn step_particle(
    world: &World,
    renderer: &Renderer,
    method: &Method,
    conds: &CondSet,
    fitted: Option<&FittedSource>,
    config: &RunConfig,
    iter: usize,
    pid: usize,
    p: &mut Particle,
) -> Result<StepStats> {
    let (t_lo, t_hi) = config.t_range;
    let t = p.rng.random_range(t_lo..t_hi);
    let view = if renderer.n_views() > 1 { p.rng.random_range(0..renderer.n_views()) } else { 0 };
    let eps_noise =
        Vector::from_fn(renderer.out_dim(), |_, _| StandardNormal.sample(&mut p.rng));
    let x0 = renderer.render(&p.theta, view)?;
    let x_ref = if matches!(method, Method::Dds) {
        Some(renderer.render(&p.theta_init, view)?)
    } else {
        None
    };
    let inputs = GradInputs {
        world,
        x0: &x0,
        x_ref: x_ref.as_ref(),
        eps_noise: &eps_noise,
        t,
        iter,
    };
    let sample = eps_residual(method, &inputs, conds, fitted)?;
    let grad = renderer.pullback(view, &sample.residual)?;
    p.optim.step(&config.optimizer, &mut p.theta, &grad);
    if !linalg::all_finite(&p.theta) {
        return Err(Error::NonFinite {
            step: iter,
            t,
            detail: format!("particle {pid} diverged under {}", method.name()),
        });
    }
    Ok(StepStats {
        n_evals: sample.n_evals,
        n_source_evals: sample.n_source_evals,
        grad_norm: grad.norm(),
    })
}

/// Run one distillation experiment to completion.
pub fn run(world: &World, renderer: &Renderer, config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let started = std::time::Instant::now();

    let conds = CondSet {
        target: world.parse_condition(&config.target)?,
        uncond: world.uncond(),
        source: config.source.as_deref().map(|s| world.parse_condition(s)).transpose()?,
        negative: config.negative.as_deref().map(|s| world.parse_condition(s)).transpose()?,
    };
    if config.method.needs_source() && conds.source.is_none() {
        return Err(Error::Config(format!(
            "method `{}` needs a source condition",
            config.method.name()
        )));
    }
    if renderer.out_dim() != world.dim() {
        return Err(Error::Config(format!(
            "renderer outputs dimension {}, world has {}",
            renderer.out_dim(),
            world.dim()
        )));
    }

    let init_mixture = match config.init {
        InitSpec::Source => {
            if renderer.param_dim() != world.dim() {
                return Err(Error::Config(
                    "source initialization needs parameter space == world space; \
                     use gauss initialization for projective renderers"
                        .into(),
                ));
            }
            let c = conds.source.as_ref().unwrap_or(&conds.uncond);
            Some(world.data_mixture_for(c)?)
        }
        InitSpec::Gauss { std } => {
            if !(std > 0.0 && std.is_finite()) {
                return Err(Error::Config(format!("init std must be positive, got {std}")));
            }
            None
        }
    };

    let mut particles: Vec<Particle> = (0..config.n_particles)
        .map(|pid| -> Result<Particle> {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(pid as u64 + 1);
            let theta = match (&init_mixture, config.init) {
                (Some(m), _) => m.sample(1, &mut rng)?.pop().expect("one sample"),
                (None, InitSpec::Gauss { std }) => {
                    Vector::from_fn(renderer.param_dim(), |_, _| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    })
                }
                (None, InitSpec::Source) => unreachable!("checked above"),
            };
            Ok(Particle {
                theta_init: theta.clone(),
                optim: config.optimizer.init(renderer.param_dim()),
                theta,
                rng,
            })
        })
        .collect::<Result<_>>()?;

    let target_mixture = world.data_mixture_for(&conds.target)?;
    let mut rows = Vec::new();
    let mut n_evals = 0usize;
    let mut n_source_evals = 0usize;
    let mut n_fit_ops = 0usize;

    let initial = metrics::report(&all_renders(renderer, &particles)?, &target_mixture, &config.metrics)?;
    rows.push(IterRow {
        iter: 0,
        metrics: initial,
        grad_norm_mean: 0.0,
        n_evals: 0,
        n_source_evals: 0,
        n_fit_ops: 0,
    });

    let mut fitted: Option<FittedSource> = None;
    for iter in 0..config.n_iters {
        if let Method::Vsd { refit_every, model, .. } = &config.method {
            if iter % refit_every == 0 {
                let snapshot = all_renders(renderer, &particles)?;
                fitted = Some(FittedSource::fit(
                    model,
                    &snapshot,
                    iter,
                    config.seed.wrapping_add(iter as u64 + 1),
                )?);
                n_fit_ops += 1;
            }
        }

        let stats: Vec<StepStats> = particles
            .par_iter_mut()
            .enumerate()
            .map(|(pid, p)| {
                step_particle(
                    world,
                    renderer,
                    &config.method,
                    &conds,
                    fitted.as_ref(),
                    config,
                    iter,
                    pid,
                    p,
                )
            })
            .collect::<Result<_>>()?;
        let mut grad_norm_sum = 0.0;
        for s in &stats {
            n_evals += s.n_evals;
            n_source_evals += s.n_source_evals;
            grad_norm_sum += s.grad_norm;
        }

        let done = iter + 1;
        if done % config.record_every == 0 || done == config.n_iters {
            let report =
                metrics::report(&all_renders(renderer, &particles)?, &target_mixture, &config.metrics)?;
            rows.push(IterRow {
                iter: done,
                metrics: report,
                grad_norm_mean: grad_norm_sum / config.n_particles as f64,
                n_evals,
                n_source_evals,
                n_fit_ops,
            });
        }
    }

    let rendered = all_renders(renderer, &particles)?;
    Ok(RunOutput {
        method: config.method.name(),
        particles: particles.into_iter().map(|p| p.theta).collect(),
        rendered,
        rows,
        n_evals,
        n_source_evals,
        n_fit_ops,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::SourceModelSpec;
    use crate::schedule::NoiseSchedule;
    use crate::world::{ClassConfig, WorldConfig};
    use crate::Matrix;

    fn two_class_world() -> World {
        WorldConfig {
            schedule: NoiseSchedule::default(),
            classes: vec![
                ClassConfig::content("a", vec![1.0], vec![vec![-2.0]], vec![vec![vec![0.25]]]),
                ClassConfig::content("b", vec![1.0], vec![vec![2.0]], vec![vec![vec![0.25]]]),
            ],
            uncond: None,
        }
        .build()
        .unwrap()
    }

    fn small_config(method: Method) -> RunConfig {
        let mut c = RunConfig::new(method, "class:b").with_source("class:a");
        c.n_particles = 6;
        c.n_iters = 12;
        c.record_every = 6;
        c.metrics = MetricSpec { n_dirs: 8, n_target_samples: 128, seed: 0 };
        c
    }

    #[test]
    fn a_short_run_completes_and_accounts_for_evaluations() {
        let w = two_class_world();
        let r = Renderer::identity(1).unwrap();
        let out = run(&w, &r, &small_config(Method::Sds { scale: 20.0 })).unwrap();
        assert_eq!(out.method, "sds");
        assert_eq!(out.particles.len(), 6);
        assert_eq!(out.n_evals, 2 * 12 * 6);
        assert_eq!(out.n_source_evals, 0);
        // initial snapshot + records at 6 and 12
        assert_eq!(out.rows.len(), 3);
        assert_eq!(out.rows.last().unwrap().n_evals, out.n_evals);
        assert!(out.rows.iter().all(|r| r.metrics.frechet.is_finite()));
        assert!(out.wall_ms > 0.0);
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let w = two_class_world();
        let r = Renderer::identity(1).unwrap();
        let cfg = small_config(Method::Ours { weight: 10.0, stage1_iters: 4, stage1_scale: 20.0 });
        let a = run(&w, &r, &cfg).unwrap();
        let b = run(&w, &r, &cfg).unwrap();
        for (pa, pb) in a.particles.iter().zip(&b.particles) {
            assert_eq!(pa[0].to_bits(), pb[0].to_bits());
        }
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.metrics.frechet.to_bits(), rb.metrics.frechet.to_bits());
            assert_eq!(ra.n_evals, rb.n_evals);
        }
    }

    #[test]
    fn vsd_accounts_for_fits_and_fitted_evaluations() {
        let w = two_class_world();
        let r = Renderer::identity(1).unwrap();
        let mut cfg = small_config(Method::Vsd {
            scale: 7.5,
            refit_every: 5,
            model: SourceModelSpec::Gaussian,
        });
        cfg.source = None;
        let out = run(&w, &r, &cfg).unwrap();
        // iters 0..12 refit at 0, 5, 10
        assert_eq!(out.n_fit_ops, 3);
        assert_eq!(out.n_source_evals, 12 * 6);
        assert_eq!(out.n_evals, 2 * 12 * 6);
    }

    #[test]
    fn projective_renderer_runs_under_gaussian_init() {
        let w = WorldConfig {
            schedule: NoiseSchedule::default(),
            classes: vec![ClassConfig::content(
                "tgt",
                vec![1.0],
                vec![vec![1.0, -1.0]],
                vec![vec![vec![0.3, 0.0], vec![0.0, 0.3]]],
            )],
            uncond: None,
        }
        .build()
        .unwrap();
        let views = vec![
            Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            Matrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
        ];
        let r = Renderer::linear_views(views).unwrap();
        let mut cfg = RunConfig::new(Method::Sds { scale: 10.0 }, "class:tgt");
        cfg.n_particles = 4;
        cfg.n_iters = 10;
        cfg.init = InitSpec::Gauss { std: 0.5 };
        cfg.metrics = MetricSpec { n_dirs: 8, n_target_samples: 64, seed: 0 };
        let out = run(&w, &r, &cfg).unwrap();
        assert_eq!(out.particles[0].len(), 3);
        assert_eq!(out.rendered.len(), 4 * 2);
        assert_eq!(out.rendered[0].len(), 2);
    }

    #[test]
    fn source_init_rejects_projective_renderers() {
        let w = two_class_world();
        let views = vec![Matrix::from_row_slice(1, 2, &[1.0, 0.0])];
        let r = Renderer::linear_views(views).unwrap();
        let cfg = small_config(Method::Sds { scale: 10.0 });
        assert!(matches!(run(&w, &r, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn diverging_runs_surface_a_diagnostic() {
        let w = two_class_world();
        let r = Renderer::identity(1).unwrap();
        let mut cfg = small_config(Method::Sds { scale: 1e300 });
        cfg.optimizer = OptimizerSpec::Sgd { lr: 1e280 };
        match run(&w, &r, &cfg) {
            Err(Error::NonFinite { .. }) => {}
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn missing_source_is_rejected_up_front() {
        let w = two_class_world();
        let r = Renderer::identity(1).unwrap();
        let mut cfg = small_config(Method::Dds);
        cfg.source = None;
        assert!(matches!(run(&w, &r, &cfg), Err(Error::Config(_))));
    }
}
