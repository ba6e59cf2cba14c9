//! Differentiable "renderers" mapping particle parameters to the space the
//! score oracle sees. Identity covers direct-space optimization; a bank of
//! linear views models optimizing shared parameters through several
//! projections, one view sampled per step.

use crate::{Error, Matrix, Result, Vector};

#[derive(Debug, Clone)]
pub enum Renderer {
    Identity { dim: usize },
    LinearViews { views: Vec<Matrix> },
}

impl Renderer {
    pub fn identity(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("identity renderer needs dim >= 1".into()));
        }
        Ok(Self::Identity { dim })
    }

    pub fn linear_views(views: Vec<Matrix>) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| Error::Config("linear renderer needs at least one view".into()))?;
        let shape = first.shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::Config("linear views must be non-empty matrices".into()));
        }
        if views.iter().any(|v| v.shape() != shape) {
            return Err(Error::Config("all linear views must share one shape".into()));
        }
        if views.iter().any(|v| v.iter().any(|e| !e.is_finite())) {
            return Err(Error::Config("linear views contain non-finite entries".into()));
        }
        Ok(Self::LinearViews { views })
    }

    pub fn n_views(&self) -> usize {
        match self {
            Self::Identity { .. } => 1,
            Self::LinearViews { views } => views.len(),
        }
    }

    /// Dimension of the particle parameter vector.
    pub fn param_dim(&self) -> usize {
        match self {
            Self::Identity { dim } => *dim,
            Self::LinearViews { views } => views[0].ncols(),
        }
    }

    /// Dimension the score oracle operates in.
    pub fn out_dim(&self) -> usize {
        match self {
            Self::Identity { dim } => *dim,
            Self::LinearViews { views } => views[0].nrows(),
        }
    }

    pub fn render(&self, theta: &Vector, view: usize) -> Result<Vector> {
        self.check_view(view)?;
        match self {
            Self::Identity { .. } => Ok(theta.clone()),
            Self::LinearViews { views } => Ok(&views[view] * theta),
        }
    }

    /// Pull a render-space gradient back to parameter space (`A^T g`).
    pub fn pullback(&self, view: usize, grad: &Vector) -> Result<Vector> {
        self.check_view(view)?;
        match self {
            Self::Identity { .. } => Ok(grad.clone()),
            Self::LinearViews { views } => Ok(views[view].transpose() * grad),
        }
    }

    fn check_view(&self, view: usize) -> Result<()> {
        if view >= self.n_views() {
            return Err(Error::Config(format!(
                "view {view} out of range ({} available)",
                self.n_views()
            )));
        }
        Ok(())
    }
}
