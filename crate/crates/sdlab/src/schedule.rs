//! Variance-preserving diffusion schedules.
//!
//! A schedule fixes `beta(t)` on `t in [0, 1]` and with it
//! `alpha_bar(t) = exp(-int_0^t beta)`, `alpha_t = sqrt(alpha_bar)` and
//! `sigma_t = sqrt(1 - alpha_bar)`. The forward perturbation of a data point
//! is `x_t = alpha_t x_0 + sigma_t eps`, and the SDE drift/diffusion pair is
//! `f(x, t) = -0.5 beta(t) x`, `g(t)^2 = beta(t)`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Offset used by the cosine schedule.
const COSINE_S: f64 = 0.008;

/// The raw cosine `beta` diverges as `t -> 1`; it is capped here and
/// `alpha_bar` continued as `exp(-BETA_CAP * dt)` past the cap point so the
/// pair stays exactly consistent (`alpha_bar(t) = exp(-int beta)` everywhere)
/// and `alpha` stays strictly decreasing.
const BETA_CAP: f64 = 300.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    VpLinear { beta_min: f64, beta_max: f64 },
    VpCosine,
}

/// A variance-preserving noise schedule on `t in [0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::vp_linear(0.1, 20.0).expect("default schedule parameters are valid")
    }
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind) -> Result<Self> {
        if let ScheduleKind::VpLinear { beta_min, beta_max } = &kind {
            if !(*beta_min > 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
                return Err(Error::Config(format!(
                    "vp-linear needs 0 < beta_min <= beta_max, got [{beta_min}, {beta_max}]"
                )));
            }
        }
        Ok(Self { kind })
    }

    pub fn vp_linear(beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::VpLinear { beta_min, beta_max })
    }

    pub fn vp_cosine() -> Self {
        Self { kind: ScheduleKind::VpCosine }
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    /// Instantaneous noise rate `beta(t)`.
    pub fn beta(&self, t: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&t), "t={t} outside [0,1]");
        match self.kind {
            ScheduleKind::VpLinear { beta_min, beta_max } => beta_min + t * (beta_max - beta_min),
            ScheduleKind::VpCosine => {
                let u = cosine_angle(t);
                if u >= cosine_cap_angle() {
                    BETA_CAP
                } else {
                    std::f64::consts::PI / (1.0 + COSINE_S) * u.tan()
                }
            }
        }
    }

    /// `log alpha_bar(t) = -int_0^t beta(s) ds`, in closed form.
    pub fn log_alpha_bar(&self, t: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&t), "t={t} outside [0,1]");
        match self.kind {
            ScheduleKind::VpLinear { beta_min, beta_max } => {
                -(beta_min * t + 0.5 * (beta_max - beta_min) * t * t)
            }
            ScheduleKind::VpCosine => {
                let u_cap = cosine_cap_angle();
                let u = cosine_angle(t);
                let base = |u: f64| 2.0 * (u.cos().ln() - cosine_angle(0.0).cos().ln());
                if u <= u_cap {
                    base(u)
                } else {
                    let t_cap = angle_to_t(u_cap);
                    base(u_cap) - BETA_CAP * (t - t_cap)
                }
            }
        }
    }

    pub fn alpha_bar(&self, t: f64) -> f64 {
        self.log_alpha_bar(t).exp()
    }

    /// Signal scale `alpha_t = sqrt(alpha_bar(t))`.
    pub fn alpha(&self, t: f64) -> f64 {
        (0.5 * self.log_alpha_bar(t)).exp()
    }

    /// Noise scale `sigma_t = sqrt(1 - alpha_bar(t))`.
    pub fn sigma(&self, t: f64) -> f64 {
        // -expm1 keeps precision where alpha_bar is close to 1.
        (-self.log_alpha_bar(t).exp_m1()).max(0.0).sqrt()
    }

    pub fn alpha_sigma(&self, t: f64) -> (f64, f64) {
        (self.alpha(t), self.sigma(t))
    }
}

fn cosine_angle(t: f64) -> f64 {
    std::f64::consts::FRAC_PI_2 * (t + COSINE_S) / (1.0 + COSINE_S)
}

fn angle_to_t(u: f64) -> f64 {
    u / std::f64::consts::FRAC_PI_2 * (1.0 + COSINE_S) - COSINE_S
}

fn cosine_cap_angle() -> f64 {
    (BETA_CAP * (1.0 + COSINE_S) / std::f64::consts::PI).atan()
}
