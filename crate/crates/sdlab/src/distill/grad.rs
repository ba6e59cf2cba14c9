//! The gradient family. Every variant fills the same descent slot with a
//! render-space residual `r`; the optimizer then applies `theta <- theta -
//! lr * A^T r`. Variants differ only in which score evaluations they
//! combine, so their disagreements are attributable term by term.

use serde::{Deserialize, Serialize};

use crate::estimator::{FittedSource, SourceModelSpec};
use crate::flow::{self, Solver};
use crate::oracle;
use crate::world::{Condition, World};
use crate::{Error, Result, Vector};

fn d_sds_scale() -> f64 {
    100.0
}
fn d_guide_scale() -> f64 {
    7.5
}
fn d_cutoff() -> f64 {
    0.2
}
fn d_csd_w() -> f64 {
    40.0
}
fn d_anneal() -> usize {
    500
}
fn d_refit() -> usize {
    1
}
fn d_weight() -> f64 {
    25.0
}
fn d_stage1_iters() -> usize {
    500
}
fn d_stage1_scale() -> f64 {
    40.0
}
fn d_solver() -> Solver {
    Solver::Heun
}
fn d_bridge_steps() -> usize {
    64
}

/// A member of the gradient family. Serialized tags are the method names
/// used in output directories and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Method {
    /// Guided noise residual: `eps_u + s (eps_tgt - eps_u) - eps`.
    Sds {
        #[serde(default = "d_sds_scale")]
        scale: f64,
    },
    /// Guidance term only: `s (eps_tgt - eps_u)`.
    SdsDominant {
        #[serde(default = "d_sds_scale")]
        scale: f64,
    },
    /// Paired residual against a frozen reference render sharing the same
    /// noise draw: `eps(x_t; tgt) - eps(ref_t; src)`.
    Dds,
    /// Guidance plus a prior that is switched off at low noise:
    /// `(eps_u - 1[t < cutoff] eps_neg) + s (eps_tgt - eps_u)`.
    Nfsd {
        #[serde(default = "d_guide_scale")]
        scale: f64,
        #[serde(default = "d_cutoff")]
        cutoff: f64,
    },
    /// Attraction and annealed repulsion:
    /// `w1 (eps_tgt - eps_u) + w2(iter) (eps_u - eps_src)`, with `w2`
    /// decayed linearly to zero over `anneal_steps` (zero disables decay).
    Csd {
        #[serde(default = "d_csd_w")]
        w1: f64,
        #[serde(default = "d_csd_w")]
        w2: f64,
        #[serde(default = "d_anneal")]
        anneal_steps: usize,
    },
    /// Guided residual against a source model refitted to the particles:
    /// `eps_u + s (eps_tgt - eps_u) - eps_fit`.
    Vsd {
        #[serde(default = "d_guide_scale")]
        scale: f64,
        #[serde(default = "d_refit")]
        refit_every: usize,
        #[serde(default)]
        model: SourceModelSpec,
    },
    /// Calibrated two-endpoint residual `w (eps_tgt - eps_src)`, warmed up
    /// by a plain guided stage for the first `stage1_iters` iterations.
    Ours {
        #[serde(default = "d_weight")]
        weight: f64,
        #[serde(default = "d_stage1_iters")]
        stage1_iters: usize,
        #[serde(default = "d_stage1_scale")]
        stage1_scale: f64,
    },
    /// Exact dual endpoints: integrate the flow down from `(x_t, t)` under
    /// both conditions and convert the endpoint displacement to the descent
    /// slot.
    Bridge {
        #[serde(default = "d_weight")]
        weight: f64,
        #[serde(default = "d_solver")]
        solver: Solver,
        #[serde(default = "d_bridge_steps")]
        steps: usize,
    },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Sds { .. } => "sds",
            Self::SdsDominant { .. } => "sds-dominant",
            Self::Dds => "dds",
            Self::Nfsd { .. } => "nfsd",
            Self::Csd { .. } => "csd",
            Self::Vsd { .. } => "vsd",
            Self::Ours { .. } => "ours",
            Self::Bridge { .. } => "bridge",
        }
    }

    pub fn needs_source(&self) -> bool {
        matches!(
            self,
            Self::Dds | Self::Csd { .. } | Self::Ours { .. } | Self::Bridge { .. }
        )
    }

    pub fn uses_fitted_source(&self) -> bool {
        matches!(self, Self::Vsd { .. })
    }
}

/// Conditions a method draws on. `uncond` is always present; `source` and
/// `negative` only where the variant calls for them.
#[derive(Debug, Clone)]
pub struct CondSet {
    pub target: Condition,
    pub uncond: Condition,
    pub source: Option<Condition>,
    pub negative: Option<Condition>,
}

impl CondSet {
    fn source(&self, method: &str) -> Result<&Condition> {
        self.source
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{method} needs a source condition")))
    }
}

/// Everything one gradient draw depends on.
#[derive(Debug)]
pub struct GradInputs<'a> {
    pub world: &'a World,
    /// Current render.
    pub x0: &'a Vector,
    /// Frozen reference render for paired residuals.
    pub x_ref: Option<&'a Vector>,
    pub eps_noise: &'a Vector,
    pub t: f64,
    pub iter: usize,
}

/// One evaluated gradient with its decomposition and cost accounting.
#[derive(Debug, Clone)]
pub struct GradSample {
    pub t: f64,
    pub x_t: Vector,
    /// Render-space residual in the descent slot.
    pub residual: Vector,
    /// Named constituent terms, in the space indicated by the name
    /// (`displacement` entries live in denoised-endpoint space).
    pub terms: Vec<(&'static str, Vector)>,
    /// World score evaluations consumed.
    pub n_evals: usize,
    /// Fitted-model score evaluations consumed.
    pub n_source_evals: usize,
}

fn eps_at(world: &World, cond: &Condition, x_t: &Vector, t: f64) -> Result<Vector> {
    Ok(oracle::eps_pred(world, cond, x_t, t)?.eps)
}

/// Evaluate one method's residual at a noised render.
pub fn eps_residual(
    method: &Method,
    inputs: &GradInputs,
    conds: &CondSet,
    fitted: Option<&FittedSource>,
) -> Result<GradSample> {
    let world = inputs.world;
    let (alpha, sigma) = world.schedule().alpha_sigma(inputs.t);
    let x_t = inputs.x0 * alpha + inputs.eps_noise * sigma;
    let t = inputs.t;

    let mut terms: Vec<(&'static str, Vector)> = Vec::new();
    let mut n_evals = 0;
    let mut n_source_evals = 0;

    let residual = match method {
        Method::Sds { scale } => {
            let eps_u = eps_at(world, &conds.uncond, &x_t, t)?;
            let eps_c = eps_at(world, &conds.target, &x_t, t)?;
            n_evals += 2;
            let guidance = (&eps_c - &eps_u) * *scale;
            let prior = &eps_u - inputs.eps_noise;
            terms.push(("guidance", guidance.clone()));
            terms.push(("prior_residual", prior.clone()));
            guidance + prior
        }
        Method::SdsDominant { scale } => {
            let eps_u = eps_at(world, &conds.uncond, &x_t, t)?;
            let eps_c = eps_at(world, &conds.target, &x_t, t)?;
            n_evals += 2;
            let guidance = (&eps_c - &eps_u) * *scale;
            terms.push(("guidance", guidance.clone()));
            guidance
        }
        Method::Dds => {
            let x_ref = inputs
                .x_ref
                .ok_or_else(|| Error::Config("dds needs a reference render".into()))?;
            let src = conds.source("dds")?;
            let ref_t = x_ref * alpha + inputs.eps_noise * sigma;
            let eps_tgt = eps_at(world, &conds.target, &x_t, t)?;
            let eps_ref = eps_at(world, src, &ref_t, t)?;
            n_evals += 2;
            terms.push(("target_eps", eps_tgt.clone()));
            terms.push(("reference_eps", eps_ref.clone()));
            eps_tgt - eps_ref
        }
        Method::Nfsd { scale, cutoff } => {
            let eps_u = eps_at(world, &conds.uncond, &x_t, t)?;
            let eps_c = eps_at(world, &conds.target, &x_t, t)?;
            n_evals += 2;
            let gated = t < *cutoff;
            let prior = if gated {
                match &conds.negative {
                    Some(neg) => {
                        let eps_neg = eps_at(world, neg, &x_t, t)?;
                        n_evals += 1;
                        &eps_u - &eps_neg
                    }
                    // without a designated negative the prior cancels itself
                    None => Vector::zeros(x_t.len()),
                }
            } else {
                eps_u.clone()
            };
            let guidance = (&eps_c - &eps_u) * *scale;
            terms.push(("prior", prior.clone()));
            terms.push(("guidance", guidance.clone()));
            guidance + prior
        }
        Method::Csd { w1, w2, anneal_steps } => {
            let eps_u = eps_at(world, &conds.uncond, &x_t, t)?;
            let eps_c = eps_at(world, &conds.target, &x_t, t)?;
            n_evals += 2;
            let w2_now = if *anneal_steps == 0 {
                *w2
            } else {
                *w2 * (1.0 - inputs.iter as f64 / *anneal_steps as f64).max(0.0)
            };
            let attract = (&eps_c - &eps_u) * *w1;
            let repel = if w2_now != 0.0 {
                let src = conds.source("csd")?;
                let eps_s = eps_at(world, src, &x_t, t)?;
                n_evals += 1;
                (&eps_u - &eps_s) * w2_now
            } else {
                Vector::zeros(x_t.len())
            };
            terms.push(("attract", attract.clone()));
            terms.push(("repel", repel.clone()));
            attract + repel
        }
        Method::Vsd { scale, .. } => {
            let fitted = fitted
                .ok_or_else(|| Error::Config("vsd needs a fitted source model".into()))?;
            let eps_u = eps_at(world, &conds.uncond, &x_t, t)?;
            let eps_c = eps_at(world, &conds.target, &x_t, t)?;
            n_evals += 2;
            let eps_fit = fitted.eps(world.schedule(), &x_t, t)?;
            n_source_evals += 1;
            let guidance = (&eps_c - &eps_u) * *scale;
            let variational = &eps_u - &eps_fit;
            terms.push(("guidance", guidance.clone()));
            terms.push(("variational_residual", variational.clone()));
            guidance + variational
        }
        Method::Ours { weight, stage1_iters, stage1_scale } => {
            if inputs.iter < *stage1_iters {
                let warm = Method::Sds { scale: *stage1_scale };
                let mut sample = eps_residual(&warm, inputs, conds, None)?;
                sample.terms.push(("stage1", sample.residual.clone()));
                return Ok(sample);
            }
            let src = conds.source("ours")?;
            let eps_tgt = eps_at(world, &conds.target, &x_t, t)?;
            let eps_src = eps_at(world, src, &x_t, t)?;
            n_evals += 2;
            let delta = &eps_tgt - &eps_src;
            // the same residual in denoised-endpoint coordinates
            let displacement = &delta * (-(sigma / alpha) * *weight);
            terms.push(("displacement_eps", delta.clone()));
            terms.push(("displacement", displacement));
            delta * *weight
        }
        Method::Bridge { weight, solver, steps } => {
            let src = conds.source("bridge")?;
            let t_clamped = t.max(flow::T_MIN);
            let path = flow::bridge_endpoints(
                world,
                src,
                &conds.target,
                &x_t,
                t_clamped,
                *solver,
                *steps,
            )?;
            n_evals += path.n_evals;
            let displacement = (&path.psi0_tgt - &path.psi0_src) * *weight;
            let residual = &displacement * (-(alpha / sigma));
            terms.push(("displacement", displacement));
            terms.push(("psi0_source", path.psi0_src));
            terms.push(("psi0_target", path.psi0_tgt));
            residual
        }
    };

    Ok(GradSample { t, x_t, residual, terms, n_evals, n_source_evals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::FittedSource;
    use crate::schedule::NoiseSchedule;
    use crate::world::{ClassConfig, WorldConfig};
    use approx::assert_abs_diff_eq;

    fn test_world() -> World {
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

    fn conds(w: &World) -> CondSet {
        CondSet {
            target: w.condition_class("b").unwrap(),
            uncond: w.uncond(),
            source: Some(w.condition_class("a").unwrap()),
            negative: Some(w.condition_class("a").unwrap()),
        }
    }

    fn inputs<'a>(w: &'a World, x0: &'a Vector, eps: &'a Vector, t: f64, iter: usize) -> GradInputs<'a> {
        GradInputs { world: w, x0, x_ref: None, eps_noise: eps, t, iter }
    }

    #[test]
    fn sds_matches_the_written_formula() {
        let w = test_world();
        let cs = conds(&w);
        let x0 = Vector::from_column_slice(&[0.3]);
        let eps = Vector::from_column_slice(&[0.8]);
        let t = 0.55;
        let s = eps_residual(&Method::Sds { scale: 100.0 }, &inputs(&w, &x0, &eps, t, 0), &cs, None)
            .unwrap();
        let eps_u = eps_at(&w, &cs.uncond, &s.x_t, t).unwrap();
        let eps_c = eps_at(&w, &cs.target, &s.x_t, t).unwrap();
        let want = &eps_u + (&eps_c - &eps_u) * 100.0 - &eps;
        assert_abs_diff_eq!(s.residual[0], want[0], epsilon = 1e-12);
        assert_eq!(s.n_evals, 2);
        assert_eq!(s.terms.len(), 2);
    }

    #[test]
    fn csd_with_equal_static_weights_telescopes_to_the_two_endpoint_form() {
        let w = test_world();
        let cs = conds(&w);
        let x0 = Vector::from_column_slice(&[-0.4]);
        let eps = Vector::from_column_slice(&[1.1]);
        let t = 0.4;
        let csd = eps_residual(
            &Method::Csd { w1: 25.0, w2: 25.0, anneal_steps: 0 },
            &inputs(&w, &x0, &eps, t, 7),
            &cs,
            None,
        )
        .unwrap();
        let ours = eps_residual(
            &Method::Ours { weight: 25.0, stage1_iters: 0, stage1_scale: 40.0 },
            &inputs(&w, &x0, &eps, t, 7),
            &cs,
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(csd.residual[0], ours.residual[0], epsilon = 1e-12);
        assert_eq!(csd.n_evals, 3);
        assert_eq!(ours.n_evals, 2);
    }

    #[test]
    fn csd_anneal_drops_the_source_evaluation() {
        let w = test_world();
        let cs = conds(&w);
        let x0 = Vector::from_column_slice(&[0.0]);
        let eps = Vector::from_column_slice(&[0.0]);
        let late = eps_residual(
            &Method::Csd { w1: 40.0, w2: 40.0, anneal_steps: 500 },
            &inputs(&w, &x0, &eps, 0.5, 500),
            &cs,
            None,
        )
        .unwrap();
        assert_eq!(late.n_evals, 2);
        let repel = &late.terms.iter().find(|(n, _)| *n == "repel").unwrap().1;
        assert_abs_diff_eq!(repel[0], 0.0);
    }

    #[test]
    fn nfsd_gate_behaviour_on_both_sides_of_the_cutoff() {
        let w = test_world();
        let mut cs = conds(&w);
        let x0 = Vector::from_column_slice(&[0.2]);
        let eps = Vector::from_column_slice(&[-0.3]);
        let m = Method::Nfsd { scale: 7.5, cutoff: 0.2 };
        // above the cutoff the prior is the unconditional prediction itself
        let hi = eps_residual(&m, &inputs(&w, &x0, &eps, 0.5, 0), &cs, None).unwrap();
        let eps_u = eps_at(&w, &cs.uncond, &hi.x_t, 0.5).unwrap();
        let eps_c = eps_at(&w, &cs.target, &hi.x_t, 0.5).unwrap();
        assert_abs_diff_eq!(
            hi.residual[0],
            (eps_u[0] + 7.5 * (eps_c[0] - eps_u[0])),
            epsilon = 1e-12
        );
        assert_eq!(hi.n_evals, 2);
        // below it the designated negative is subtracted
        let lo = eps_residual(&m, &inputs(&w, &x0, &eps, 0.1, 0), &cs, None).unwrap();
        assert_eq!(lo.n_evals, 3);
        // and with no negative the prior cancels entirely
        cs.negative = None;
        let lo2 = eps_residual(&m, &inputs(&w, &x0, &eps, 0.1, 0), &cs, None).unwrap();
        let eps_u2 = eps_at(&w, &cs.uncond, &lo2.x_t, 0.1).unwrap();
        let eps_c2 = eps_at(&w, &cs.target, &lo2.x_t, 0.1).unwrap();
        assert_abs_diff_eq!(lo2.residual[0], 7.5 * (eps_c2[0] - eps_u2[0]), epsilon = 1e-12);
        assert_eq!(lo2.n_evals, 2);
    }

    #[test]
    fn dds_vanishes_when_reference_and_conditions_coincide() {
        let w = test_world();
        let mut cs = conds(&w);
        cs.source = Some(cs.target.clone());
        let x0 = Vector::from_column_slice(&[0.9]);
        let eps = Vector::from_column_slice(&[0.4]);
        let mut inp = inputs(&w, &x0, &eps, 0.6, 0);
        inp.x_ref = Some(&x0);
        let s = eps_residual(&Method::Dds, &inp, &cs, None).unwrap();
        assert_abs_diff_eq!(s.residual[0], 0.0, epsilon = 1e-12);
        assert_eq!(s.n_evals, 2);
    }

    #[test]
    fn dds_requires_its_reference() {
        let w = test_world();
        let cs = conds(&w);
        let x0 = Vector::from_column_slice(&[0.9]);
        let eps = Vector::from_column_slice(&[0.4]);
        assert!(eps_residual(&Method::Dds, &inputs(&w, &x0, &eps, 0.6, 0), &cs, None).is_err());
    }

    #[test]
    fn vsd_with_a_perfect_fit_and_unit_scale_has_zero_residual_at_the_target() {
        let w = test_world();
        let cs = conds(&w);
        let target_mixture = w.data_mixture_for(&cs.target).unwrap();
        let fitted = FittedSource { mixture: target_mixture, fitted_at: 0, em_loglik: None };
        let x0 = Vector::from_column_slice(&[1.8]);
        let eps = Vector::from_column_slice(&[-0.2]);
        let s = eps_residual(
            &Method::Vsd { scale: 1.0, refit_every: 1, model: SourceModelSpec::Gaussian },
            &inputs(&w, &x0, &eps, 0.45, 0),
            &cs,
            Some(&fitted),
        )
        .unwrap();
        assert_abs_diff_eq!(s.residual[0], 0.0, epsilon = 1e-12);
        assert_eq!(s.n_evals, 2);
        assert_eq!(s.n_source_evals, 1);
    }

    #[test]
    fn warm_stage_hands_over_at_the_configured_iteration() {
        let w = test_world();
        let cs = conds(&w);
        let x0 = Vector::from_column_slice(&[0.1]);
        let eps = Vector::from_column_slice(&[0.2]);
        let m = Method::Ours { weight: 25.0, stage1_iters: 500, stage1_scale: 40.0 };
        let warm = eps_residual(&m, &inputs(&w, &x0, &eps, 0.5, 499), &cs, None).unwrap();
        assert!(warm.terms.iter().any(|(n, _)| *n == "stage1"));
        let sds = eps_residual(
            &Method::Sds { scale: 40.0 },
            &inputs(&w, &x0, &eps, 0.5, 499),
            &cs,
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(warm.residual[0], sds.residual[0], epsilon = 1e-15);
        let main = eps_residual(&m, &inputs(&w, &x0, &eps, 0.5, 500), &cs, None).unwrap();
        assert!(main.terms.iter().any(|(n, _)| *n == "displacement"));
    }

    #[test]
    fn bridge_counts_flow_evaluations_and_records_the_displacement() {
        let w = test_world();
        let cs = conds(&w);
        let x0 = Vector::from_column_slice(&[0.0]);
        let eps = Vector::from_column_slice(&[0.5]);
        let m = Method::Bridge { weight: 1.0, solver: Solver::Euler, steps: 32 };
        let s = eps_residual(&m, &inputs(&w, &x0, &eps, 0.75, 0), &cs, None).unwrap();
        assert_eq!(s.n_evals, 2 * 32);
        let (alpha, sigma) = w.schedule().alpha_sigma(0.75);
        let disp = &s.terms.iter().find(|(n, _)| *n == "displacement").unwrap().1;
        assert_abs_diff_eq!(s.residual[0], -(alpha / sigma) * disp[0], epsilon = 1e-12);
    }

    #[test]
    fn method_names_are_stable() {
        assert_eq!(Method::Dds.name(), "dds");
        assert_eq!(
            Method::Ours { weight: 1.0, stage1_iters: 0, stage1_scale: 1.0 }.name(),
            "ours"
        );
        let json = serde_json::to_string(&Method::Sds { scale: 100.0 }).unwrap();
        assert!(json.contains("\"kind\":\"sds\""));
        let parsed: Method = serde_json::from_str("{\"kind\":\"nfsd\"}").unwrap();
        assert_eq!(parsed, Method::Nfsd { scale: 7.5, cutoff: 0.2 });
    }
}
