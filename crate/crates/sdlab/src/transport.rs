//! Entropic optimal transport between discrete measures, plus the
//! deterministic coupling induced by two-way flow translation.
//!
//! Sinkhorn runs entirely in the log domain with a geometric epsilon ladder
//! (start at ten times the target, halve down), so small regularizers stay
//! stable without underflow.

use serde::{Deserialize, Serialize};

use crate::flow::{self, Solver, TranslateSpec};
use crate::linalg;
use crate::world::{Condition, World};
use crate::{Error, Matrix, Result, Vector};

/// Squared Euclidean cost `C_ij = |x_i - y_j|^2`.
pub fn cost_matrix(xs: &[Vector], ys: &[Vector]) -> Matrix {
    Matrix::from_fn(xs.len(), ys.len(), |i, j| (&xs[i] - &ys[j]).norm_squared())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SinkhornSpec {
    /// Target entropic regularizer.
    pub eps: f64,
    /// Total iteration budget across the epsilon ladder.
    pub max_iters: usize,
    /// Stop when the worse marginal's L1 error drops below this.
    pub tol: f64,
    /// Warm-start through decreasing epsilons instead of solving the target
    /// regularizer cold.
    pub eps_scaling: bool,
    /// Successive over-relaxation factor in `[1, 2)`; values above one
    /// shorten the slow geometric tail that small regularizers produce.
    pub over_relaxation: f64,
}

impl Default for SinkhornSpec {
    fn default() -> Self {
        Self { eps: 1e-2, max_iters: 2000, tol: 1e-7, eps_scaling: true, over_relaxation: 1.5 }
    }
}

#[derive(Debug, Clone)]
pub struct CouplingPlan {
    /// Row-stochastic-up-to-weights matrix: `plan[(i, j)] ~ P(x_i, y_j)`.
    pub plan: Matrix,
    /// Transport cost `sum_ij P_ij C_ij` (entropy term excluded).
    pub cost: f64,
    pub eps: f64,
    pub iters: usize,
    /// Worse of the two L1 marginal errors.
    pub residual: f64,
}

impl CouplingPlan {
    /// Entries above `threshold` as `(row, col)` pairs.
    pub fn support(&self, threshold: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.plan.nrows() {
            for j in 0..self.plan.ncols() {
                if self.plan[(i, j)] > threshold {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

fn normalized_weights(w: &[f64], side: &str) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::Transport(format!("{side} marginal is empty")));
    }
    if w.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Transport(format!("{side} marginal must be strictly positive")));
    }
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|v| v / total).collect())
}

fn marginal_residual(plan: &Matrix, a: &[f64], b: &[f64]) -> f64 {
    let mut row_err = 0.0;
    for i in 0..plan.nrows() {
        row_err += (plan.row(i).sum() - a[i]).abs();
    }
    let mut col_err = 0.0;
    for j in 0..plan.ncols() {
        col_err += (plan.column(j).sum() - b[j]).abs();
    }
    row_err.max(col_err)
}

fn plan_from_potentials(cost: &Matrix, f: &[f64], g: &[f64], eps: f64) -> Matrix {
    Matrix::from_fn(cost.nrows(), cost.ncols(), |i, j| {
        ((f[i] + g[j] - cost[(i, j)]) / eps).exp()
    })
}

/// Log-domain Sinkhorn between weighted atom sets with cost matrix `cost`.
pub fn sinkhorn(cost: &Matrix, a: &[f64], b: &[f64], spec: &SinkhornSpec) -> Result<CouplingPlan> {
    let (n, m) = (cost.nrows(), cost.ncols());
    if a.len() != n || b.len() != m {
        return Err(Error::Transport(format!(
            "cost is {n}x{m} but marginals have {} and {} atoms",
            a.len(),
            b.len()
        )));
    }
    if !(spec.eps.is_finite() && spec.eps > 0.0) {
        return Err(Error::Transport(format!("epsilon must be positive, got {}", spec.eps)));
    }
    if !(1.0..2.0).contains(&spec.over_relaxation) {
        return Err(Error::Transport(format!(
            "over_relaxation must lie in [1, 2), got {}",
            spec.over_relaxation
        )));
    }
    let a = normalized_weights(a, "source")?;
    let b = normalized_weights(b, "target")?;
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();

    let mut ladder = Vec::new();
    if spec.eps_scaling {
        let mut e = spec.eps * 10.0;
        while e > spec.eps * (1.0 + 1e-12) {
            ladder.push(e);
            e /= 2.0;
        }
    }
    ladder.push(spec.eps);

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut iters = 0;
    let mut buf = vec![0.0; n.max(m)];
    for (rung, &eps) in ladder.iter().enumerate() {
        let last = rung + 1 == ladder.len();
        // warm-up rungs get a small slice of the budget; the target rung
        // takes everything that is left
        let rung_budget = if last {
            spec.max_iters.saturating_sub(iters).max(1)
        } else {
            50.min(spec.max_iters / ladder.len().max(1)).max(1)
        };
        let omega = spec.over_relaxation;
        for _ in 0..rung_budget {
            for (i, fi) in f.iter_mut().enumerate() {
                let row = &mut buf[..m];
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = (g[j] - cost[(i, j)]) / eps;
                }
                let update = eps * (log_a[i] - linalg::log_sum_exp(row));
                *fi += omega * (update - *fi);
            }
            for (j, gj) in g.iter_mut().enumerate() {
                let col = &mut buf[..n];
                for (i, slot) in col.iter_mut().enumerate() {
                    *slot = (f[i] - cost[(i, j)]) / eps;
                }
                let update = eps * (log_b[j] - linalg::log_sum_exp(col));
                *gj += omega * (update - *gj);
            }
            iters += 1;
            if last {
                // relaxed updates leave both marginals slightly off, so
                // measure the worse of the two
                let mut row_err = 0.0;
                for (i, &fi) in f.iter().enumerate() {
                    let row = &mut buf[..m];
                    for (j, slot) in row.iter_mut().enumerate() {
                        *slot = (fi + g[j] - cost[(i, j)]) / eps;
                    }
                    row_err += (linalg::log_sum_exp(row).exp() - a[i]).abs();
                }
                let mut col_err = 0.0;
                for (j, &gj) in g.iter().enumerate() {
                    let col = &mut buf[..n];
                    for (i, slot) in col.iter_mut().enumerate() {
                        *slot = (f[i] + gj - cost[(i, j)]) / eps;
                    }
                    col_err += (linalg::log_sum_exp(col).exp() - b[j]).abs();
                }
                if row_err.max(col_err) < spec.tol {
                    break;
                }
            }
        }
    }

    let plan = plan_from_potentials(cost, &f, &g, spec.eps);
    let mut total_cost = 0.0;
    for i in 0..n {
        for j in 0..m {
            total_cost += plan[(i, j)] * cost[(i, j)];
        }
    }
    Ok(CouplingPlan {
        residual: marginal_residual(&plan, &a, &b),
        plan,
        cost: total_cost,
        eps: spec.eps,
        iters,
    })
}

/// Sinkhorn between two point clouds with uniform weights.
pub fn sinkhorn_points(xs: &[Vector], ys: &[Vector], spec: &SinkhornSpec) -> Result<CouplingPlan> {
    let cost = cost_matrix(xs, ys);
    let a = vec![1.0 / xs.len().max(1) as f64; xs.len()];
    let b = vec![1.0 / ys.len().max(1) as f64; ys.len()];
    sinkhorn(&cost, &a, &b, spec)
}

/// Conditional mean of the plan: `T(x_i) = sum_j P_ij y_j / sum_j P_ij`.
pub fn barycentric_map(plan: &CouplingPlan, ys: &[Vector]) -> Result<Vec<Vector>> {
    if ys.len() != plan.plan.ncols() {
        return Err(Error::Transport(format!(
            "plan has {} columns but {} target atoms were given",
            plan.plan.ncols(),
            ys.len()
        )));
    }
    if ys.is_empty() {
        return Err(Error::Transport("barycentric map needs target atoms".into()));
    }
    let dim = ys[0].len();
    let mut out = Vec::with_capacity(plan.plan.nrows());
    for i in 0..plan.plan.nrows() {
        let mass = plan.plan.row(i).sum();
        if mass <= 0.0 {
            return Err(Error::Transport(format!("plan row {i} carries no mass")));
        }
        let mut y = Vector::zeros(dim);
        for (j, yj) in ys.iter().enumerate() {
            y += yj * plan.plan[(i, j)];
        }
        out.push(y / mass);
    }
    Ok(out)
}

/// Total-variation distance between two plans over the same atom grid.
pub fn coupling_discrepancy(a: &CouplingPlan, b: &CouplingPlan) -> Result<f64> {
    if a.plan.shape() != b.plan.shape() {
        return Err(Error::Transport(format!(
            "plans have different shapes: {:?} vs {:?}",
            a.plan.shape(),
            b.plan.shape()
        )));
    }
    let mut tv = 0.0;
    for i in 0..a.plan.nrows() {
        for j in 0..a.plan.ncols() {
            tv += (a.plan[(i, j)] - b.plan[(i, j)]).abs();
        }
    }
    Ok(0.5 * tv)
}

/// Sample the deterministic coupling realized by two-way flow translation:
/// draw `x0` from the source condition's data mixture and pair it with its
/// translation under the target condition.
pub fn bridge_pairs(
    world: &World,
    cond_src: &Condition,
    cond_tgt: &Condition,
    n: usize,
    seed: u64,
    solver: Solver,
    steps: usize,
) -> Result<Vec<(Vector, Vector)>> {
    let source = world.data_mixture_for(cond_src)?;
    let xs = source.sample_seeded(n, seed)?;
    let spec = TranslateSpec { solver, steps, ..TranslateSpec::default() };
    let mut pairs = Vec::with_capacity(n);
    for x in xs {
        let out = flow::ddib_translate(world, cond_src, cond_tgt, &x, &spec)?;
        pairs.push((x, out.output));
    }
    Ok(pairs)
}
