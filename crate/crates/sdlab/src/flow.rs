//! Probability-flow ODE machinery: generation, inversion, two-way
//! translation and dual bridge endpoints.
//!
//! The deterministic flow shares its marginals with the diffusion:
//! `dx/dt = -0.5 beta(t) [x + score(x, t)]`. Integrating from `t = 1` down
//! to [`T_MIN`] generates; the reverse direction inverts a data point into
//! its latent. Translation chains inversion under a source condition with
//! generation under a target condition; bridge endpoints run the two
//! descending solves from a shared noisy state.

use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::oracle;
use crate::world::{Condition, World};
use crate::{Error, Result, Vector};

/// Lower integration limit. `sigma(T_MIN) ~ 1e-2` for the default schedule:
/// endpoints retain that much noise scale by construction.
pub const T_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Heun,
}

/// Step placement. `Quadratic` concentrates steps near the `t = 0` end,
/// where mixture structure sharpens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeGrid {
    #[default]
    Uniform,
    Quadratic,
}

/// Classifier-free guidance applied inside the flow: the drift uses
/// `eps = eps_ref + scale (eps_cond - eps_ref)` converted back to a score.
#[derive(Debug, Clone)]
pub struct Guidance {
    pub reference: Condition,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct OdeSpec {
    pub solver: Solver,
    pub steps: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub grid: TimeGrid,
    pub guidance: Option<Guidance>,
}

impl OdeSpec {
    pub fn new(solver: Solver, steps: usize, t_start: f64, t_end: f64) -> Result<Self> {
        let spec = Self { solver, steps, t_start, t_end, grid: TimeGrid::Uniform, guidance: None };
        spec.validate()?;
        Ok(spec)
    }

    /// `t = 1` down to [`T_MIN`].
    pub fn generation(solver: Solver, steps: usize) -> Self {
        Self { solver, steps, t_start: 1.0, t_end: T_MIN, grid: TimeGrid::Uniform, guidance: None }
    }

    /// [`T_MIN`] up to `t = 1`.
    pub fn inversion(solver: Solver, steps: usize) -> Self {
        Self { solver, steps, t_start: T_MIN, t_end: 1.0, grid: TimeGrid::Uniform, guidance: None }
    }

    pub fn with_guidance(mut self, reference: Condition, scale: f64) -> Self {
        self.guidance = Some(Guidance { reference, scale });
        self
    }

    pub fn with_grid(mut self, grid: TimeGrid) -> Self {
        self.grid = grid;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("ode spec needs steps >= 1".into()));
        }
        for t in [self.t_start, self.t_end] {
            if !(T_MIN..=1.0).contains(&t) {
                return Err(Error::InvalidTime {
                    t,
                    reason: format!("integration limits must lie in [{T_MIN}, 1]"),
                });
            }
        }
        if self.t_start == self.t_end {
            return Err(Error::Config("ode spec has zero time span".into()));
        }
        Ok(())
    }

    /// The `steps + 1` grid nodes from `t_start` to `t_end`.
    pub fn time_grid(&self) -> Vec<f64> {
        let n = self.steps;
        let (lo, hi) = if self.t_start < self.t_end {
            (self.t_start, self.t_end)
        } else {
            (self.t_end, self.t_start)
        };
        let mut ascending: Vec<f64> = (0..=n)
            .map(|i| {
                let u = i as f64 / n as f64;
                let w = match self.grid {
                    TimeGrid::Uniform => u,
                    TimeGrid::Quadratic => u * u,
                };
                lo + (hi - lo) * w
            })
            .collect();
        if self.t_start > self.t_end {
            ascending.reverse();
        }
        ascending
    }
}

#[derive(Debug, Clone)]
pub struct FlowResult {
    pub x: Vector,
    pub n_evals: usize,
}

fn guided_score(
    world: &World,
    cond: &Condition,
    guidance: Option<&Guidance>,
    x: &Vector,
    t: f64,
) -> Result<(Vector, usize)> {
    match guidance {
        None => Ok((oracle::score(world, cond, x, t)?, 1)),
        Some(g) => {
            let cfg = oracle::cfg_eps(world, cond, &g.reference, x, t, g.scale)?;
            let sigma = world.schedule().sigma(t);
            Ok((cfg.eps * (-1.0 / sigma), 2))
        }
    }
}

fn drift(
    world: &World,
    cond: &Condition,
    guidance: Option<&Guidance>,
    x: &Vector,
    t: f64,
) -> Result<(Vector, usize)> {
    let (score, evals) = guided_score(world, cond, guidance, x, t)?;
    let beta = world.schedule().beta(t);
    Ok(((x + score) * (-0.5 * beta), evals))
}

/// One solver step from `(x, t)` over a signed interval `dt`.
pub fn pf_ode_step(
    world: &World,
    cond: &Condition,
    guidance: Option<&Guidance>,
    x: &Vector,
    t: f64,
    dt: f64,
    solver: Solver,
) -> Result<(Vector, usize)> {
    let (v0, e0) = drift(world, cond, guidance, x, t)?;
    match solver {
        Solver::Euler => Ok((x + v0 * dt, e0)),
        Solver::Heun => {
            let predictor = x + &v0 * dt;
            let (v1, e1) = drift(world, cond, guidance, &predictor, t + dt)?;
            Ok((x + (v0 + v1) * (0.5 * dt), e0 + e1))
        }
    }
}

/// Integrate the probability-flow ODE along the grid in `spec`.
pub fn integrate(world: &World, cond: &Condition, x0: &Vector, spec: &OdeSpec) -> Result<FlowResult> {
    spec.validate()?;
    let grid = spec.time_grid();
    let mut x = x0.clone();
    let mut n_evals = 0;
    for (step, pair) in grid.windows(2).enumerate() {
        let (t, t_next) = (pair[0], pair[1]);
        let (next, evals) =
            pf_ode_step(world, cond, spec.guidance.as_ref(), &x, t, t_next - t, spec.solver)?;
        n_evals += evals;
        if !linalg::all_finite(&next) {
            return Err(Error::NonFinite {
                step,
                t,
                detail: format!("|x| = {:.3e} before the failing step", x.norm()),
            });
        }
        x = next;
    }
    Ok(FlowResult { x, n_evals })
}

/// Map a latent at `t = 1` to data at [`T_MIN`]; `spec` must descend.
pub fn generate(world: &World, cond: &Condition, z: &Vector, spec: &OdeSpec) -> Result<FlowResult> {
    if spec.t_start <= spec.t_end {
        return Err(Error::Config("generation must integrate downward (t_start > t_end)".into()));
    }
    integrate(world, cond, z, spec)
}

/// Map a data point at [`T_MIN`] to its latent at `t = 1`; `spec` must ascend.
pub fn invert(world: &World, cond: &Condition, x: &Vector, spec: &OdeSpec) -> Result<FlowResult> {
    if spec.t_start >= spec.t_end {
        return Err(Error::Config("inversion must integrate upward (t_start < t_end)".into()));
    }
    integrate(world, cond, x, spec)
}

#[derive(Debug, Clone)]
pub struct TranslateSpec {
    pub solver: Solver,
    pub steps: usize,
    pub grid: TimeGrid,
    /// Affinely re-standardize the latent from the source condition's noised
    /// moments at `t = 1` to the target's before regenerating. Removes the
    /// O(alpha_1) truncation bias left by stopping the forward process at a
    /// finite time; exact no-op when the two noised marginals already agree.
    pub latent_match: bool,
}

impl Default for TranslateSpec {
    fn default() -> Self {
        Self { solver: Solver::Heun, steps: 200, grid: TimeGrid::Uniform, latent_match: true }
    }
}

#[derive(Debug, Clone)]
pub struct TranslateResult {
    pub latent: Vector,
    pub output: Vector,
    pub n_evals: usize,
}

/// Two-way translation: invert under the source condition, re-generate under
/// the target condition from the shared latent.
pub fn ddib_translate(
    world: &World,
    cond_src: &Condition,
    cond_tgt: &Condition,
    x: &Vector,
    spec: &TranslateSpec,
) -> Result<TranslateResult> {
    let up = OdeSpec {
        solver: spec.solver,
        steps: spec.steps,
        t_start: T_MIN,
        t_end: 1.0,
        grid: spec.grid,
        guidance: None,
    };
    let inv = integrate(world, cond_src, x, &up)?;
    let latent = if spec.latent_match {
        let (m_src, cov_src) = world.mixture_for(cond_src, 1.0)?.moments();
        let (m_tgt, cov_tgt) = world.mixture_for(cond_tgt, 1.0)?.moments();
        let map = linalg::sym_sqrt(&cov_tgt) * linalg::sym_inv_sqrt(&cov_src, 1e-12);
        &m_tgt + map * (&inv.x - &m_src)
    } else {
        inv.x.clone()
    };
    let down = OdeSpec {
        solver: spec.solver,
        steps: spec.steps,
        t_start: 1.0,
        t_end: T_MIN,
        grid: spec.grid,
        guidance: None,
    };
    let gen = integrate(world, cond_tgt, &latent, &down)?;
    Ok(TranslateResult { latent, output: gen.x, n_evals: inv.n_evals + gen.n_evals })
}

/// The two descending solves of a dual bridge, from a shared `(x_t, t)`.
#[derive(Debug, Clone)]
pub struct BridgePath {
    pub x_t: Vector,
    pub t: f64,
    pub psi0_src: Vector,
    pub psi0_tgt: Vector,
    pub n_evals: usize,
}

/// Solve the PF ODE from `(x_t, t)` down to [`T_MIN`] under both conditions.
pub fn bridge_endpoints(
    world: &World,
    cond_src: &Condition,
    cond_tgt: &Condition,
    x_t: &Vector,
    t: f64,
    solver: Solver,
    steps: usize,
) -> Result<BridgePath> {
    if !(T_MIN..=1.0).contains(&t) {
        return Err(Error::InvalidTime { t, reason: format!("bridge time must lie in [{T_MIN}, 1]") });
    }
    if t - T_MIN < 1e-12 {
        return Ok(BridgePath {
            x_t: x_t.clone(),
            t,
            psi0_src: x_t.clone(),
            psi0_tgt: x_t.clone(),
            n_evals: 0,
        });
    }
    let spec = OdeSpec {
        solver,
        steps,
        t_start: t,
        t_end: T_MIN,
        grid: TimeGrid::Uniform,
        guidance: None,
    };
    let src = integrate(world, cond_src, x_t, &spec)?;
    let tgt = integrate(world, cond_tgt, x_t, &spec)?;
    Ok(BridgePath {
        x_t: x_t.clone(),
        t,
        psi0_src: src.x,
        psi0_tgt: tgt.x,
        n_evals: src.n_evals + tgt.n_evals,
    })
}
