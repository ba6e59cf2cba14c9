//! Helpers shared by the acceptance suite: an exact assignment solver and a
//! closed-form flow endpoint for single-Gaussian populations. Both are
//! written independently of the library internals so they can serve as
//! references.

use sdlab::schedule::NoiseSchedule;
use sdlab::{Matrix, Vector};

/// Exact minimum-cost perfect assignment via shortest augmenting paths in
/// O(n^3). Returns `assign` with row `i` matched to column `assign[i]`.
pub fn hungarian(cost: &Matrix) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    // 1-indexed potentials; slot 0 is the virtual start column
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Assignment cost under the same `1/n` mass convention the entropic solver
/// reports.
pub fn assignment_cost(cost: &Matrix, assign: &[usize]) -> f64 {
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    total / assign.len() as f64
}

/// Closed-form probability-flow transport for a single Gaussian population
/// `N(mean, var * I)`: the standardized coordinate
/// `(x - alpha_t mean) / s_t` with `s_t^2 = alpha_t^2 var + sigma_t^2` is
/// conserved along the flow, so the state at any other time follows by
/// re-dressing it with that time's moments.
pub struct AffineFlow<'a> {
    sched: &'a NoiseSchedule,
    mean: Vector,
    var: f64,
}

impl<'a> AffineFlow<'a> {
    pub fn new(sched: &'a NoiseSchedule, mean: Vector, var: f64) -> Self {
        Self { sched, mean, var }
    }

    /// Noised marginal scale `s_t`.
    pub fn spread(&self, t: f64) -> f64 {
        let (a, s) = self.sched.alpha_sigma(t);
        (a * a * self.var + s * s).sqrt()
    }

    /// Exact flow state at `t_end` for the trajectory passing through
    /// `(x_t, t)`.
    pub fn endpoint(&self, x_t: &Vector, t: f64, t_end: f64) -> Vector {
        let (a_end, _) = self.sched.alpha_sigma(t_end);
        let (a_t, _) = self.sched.alpha_sigma(t);
        let ratio = self.spread(t_end) / self.spread(t);
        &self.mean * a_end + (x_t - &self.mean * a_t) * ratio
    }
}

/// `(a - b)` norm scaled by the larger of one and the operand norms.
pub fn scaled_gap(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1.0)
}
