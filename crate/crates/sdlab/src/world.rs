//! Worlds: labelled Gaussian-mixture classes under a shared noise schedule.
//!
//! A world plays the role of a dataset plus a perfectly-trained diffusion
//! model: every class label maps to a mixture, conditioning is a probability
//! vector over labels, and the unconditional distribution is a configurable
//! prior over the *content* classes (corruption classes describe artifacts
//! and stay out of the prior unless explicitly requested).

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::mixture::{CorruptionOp, GaussianMixture};
use crate::schedule::NoiseSchedule;
use crate::{Error, Matrix, Result, Vector};

/// One labelled class: either content (declared with explicit parameters) or
/// a corruption of another class.
#[derive(Debug, Clone)]
pub struct ClassDef {
    pub label: String,
    pub mixture: GaussianMixture,
    /// `Some(base_label)` when this class was derived by corruption.
    pub base: Option<String>,
}

impl ClassDef {
    pub fn is_corruption(&self) -> bool {
        self.base.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct World {
    schedule: NoiseSchedule,
    classes: IndexMap<String, ClassDef>,
    uncond: Vec<f64>,
    dim: usize,
    config: WorldConfig,
}

impl World {
    pub fn from_config(config: WorldConfig) -> Result<Self> {
        config.build()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let config: WorldConfig = serde_json::from_str(s)?;
        config.build()
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(|s| s.as_str())
    }

    pub fn content_labels(&self) -> Vec<&str> {
        self.classes.values().filter(|c| !c.is_corruption()).map(|c| c.label.as_str()).collect()
    }

    pub fn corruption_labels_of(&self, base: &str) -> Vec<&str> {
        self.classes
            .values()
            .filter(|c| c.base.as_deref() == Some(base))
            .map(|c| c.label.as_str())
            .collect()
    }

    pub fn class(&self, label: &str) -> Result<&ClassDef> {
        self.classes.get(label).ok_or_else(|| Error::UnknownClass(label.to_string()))
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes.get_index_of(label).ok_or_else(|| Error::UnknownClass(label.to_string()))
    }

    pub fn class_at(&self, idx: usize) -> &ClassDef {
        self.classes.get_index(idx).expect("class index in range").1
    }

    /// The configured unconditional prior as a condition.
    pub fn uncond(&self) -> Condition {
        Condition { weights: self.uncond.clone(), label: "uncond".to_string() }
    }

    /// One-hot condition on a single class.
    pub fn condition_class(&self, label: &str) -> Result<Condition> {
        let idx = self.class_index(label)?;
        let mut weights = vec![0.0; self.n_classes()];
        weights[idx] = 1.0;
        Ok(Condition { weights, label: format!("class:{label}") })
    }

    /// Uniform condition over the given labels.
    pub fn condition_uniform<I, S>(&self, labels: I, name: &str) -> Result<Condition>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut weights = vec![0.0; self.n_classes()];
        let mut count = 0usize;
        for l in labels {
            weights[self.class_index(l.as_ref())?] += 1.0;
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidCondition("uniform condition over no classes".into()));
        }
        for w in &mut weights {
            *w /= count as f64;
        }
        Ok(Condition { weights, label: name.to_string() })
    }

    /// Condition from explicit class weights.
    pub fn condition_weights(&self, weights: &IndexMap<String, f64>, name: &str) -> Result<Condition> {
        let mut out = vec![0.0; self.n_classes()];
        let mut total = 0.0;
        for (label, w) in weights {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::InvalidCondition(format!("weight for `{label}` must be >= 0")));
            }
            out[self.class_index(label)?] += w;
            total += w;
        }
        if total <= 0.0 {
            return Err(Error::InvalidCondition("condition weights sum to zero".into()));
        }
        for w in &mut out {
            *w /= total;
        }
        Ok(Condition { weights: out, label: name.to_string() })
    }

    /// Uniform condition over every corruption class derived from `base`
    /// (the "artifact descriptor" condition for that class).
    pub fn condition_corruptions_of(&self, base: &str) -> Result<Condition> {
        self.class(base)?;
        let labels = self.corruption_labels_of(base);
        if labels.is_empty() {
            return Err(Error::InvalidCondition(format!(
                "class `{base}` has no corruption classes"
            )));
        }
        self.condition_uniform(labels, &format!("corr:{base}"))
    }

    /// Parse the condition grammar used by configs and the command line:
    /// `uncond`, `uniform`, `class:LABEL`, or `corr:BASE`.
    pub fn parse_condition(&self, s: &str) -> Result<Condition> {
        if s == "uncond" {
            return Ok(self.uncond());
        }
        if s == "uniform" {
            let labels: Vec<String> = self.labels().map(str::to_string).collect();
            return self.condition_uniform(labels, "uniform");
        }
        if let Some(label) = s.strip_prefix("class:") {
            return self.condition_class(label);
        }
        if let Some(base) = s.strip_prefix("corr:") {
            return self.condition_corruptions_of(base);
        }
        Err(Error::InvalidCondition(format!(
            "cannot parse condition `{s}`; expected uncond, uniform, class:LABEL, or corr:BASE"
        )))
    }

    fn check_condition(&self, cond: &Condition) -> Result<()> {
        if cond.weights.len() != self.n_classes() {
            return Err(Error::InvalidCondition(format!(
                "condition `{}` has {} weights, world has {} classes",
                cond.label,
                cond.weights.len(),
                self.n_classes()
            )));
        }
        Ok(())
    }

    /// The data-level (t = 0) mixture selected by a condition: the union of
    /// class mixtures with component weights scaled by the class weights.
    pub fn data_mixture_for(&self, cond: &Condition) -> Result<GaussianMixture> {
        self.check_condition(cond)?;
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for (cw, class) in cond.weights.iter().zip(self.classes.values()) {
            if *cw == 0.0 {
                continue;
            }
            let m = &class.mixture;
            for ((w, mu), cov) in m.weights().iter().zip(m.means()).zip(m.covs()) {
                weights.push(cw * w);
                means.push(mu.clone());
                covs.push(cov.clone());
            }
        }
        if weights.is_empty() {
            return Err(Error::InvalidCondition(format!(
                "condition `{}` selects no mass",
                cond.label
            )));
        }
        GaussianMixture::new(weights, means, covs)
    }

    /// The noised conditional marginal at time `t`.
    pub fn mixture_for(&self, cond: &Condition, t: f64) -> Result<GaussianMixture> {
        self.data_mixture_for(cond)?.noised(&self.schedule, t)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }
}

/// A probability vector over a world's classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    weights: Vec<f64>,
    label: String,
}

impl Condition {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn renamed(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Stable fingerprint of the weight vector (used as a cache key).
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::bench::fnv1a64_init();
        for w in &self.weights {
            h = crate::bench::fnv1a64_update(h, &w.to_bits().to_le_bytes());
        }
        h
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(CorruptionOp),
    Many(Vec<CorruptionOp>),
}

impl OneOrMany {
    fn as_slice(&self) -> std::borrow::Cow<'_, [CorruptionOp]> {
        match self {
            OneOrMany::One(op) => std::borrow::Cow::Owned(vec![op.clone()]),
            OneOrMany::Many(ops) => std::borrow::Cow::Borrowed(ops),
        }
    }
}

/// Serialized form of one class. Content classes provide explicit mixture
/// parameters; corruption classes reference an earlier class and one or more
/// corruption operators (applied in order).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassConfig {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covs: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    corruption: Option<OneOrMany>,
}

impl ClassConfig {
    pub fn content(label: &str, weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Vec<Vec<f64>>>) -> Self {
        Self {
            label: label.to_string(),
            weights: Some(weights),
            means: Some(means),
            covs: Some(covs),
            base_class: None,
            corruption: None,
        }
    }

    pub fn corruption(label: &str, base: &str, ops: Vec<CorruptionOp>) -> Self {
        Self {
            label: label.to_string(),
            weights: None,
            means: None,
            covs: None,
            base_class: Some(base.to_string()),
            corruption: Some(OneOrMany::Many(ops)),
        }
    }

    /// A corruption class whose mixture is written out explicitly instead of
    /// derived from the base through operators. Needed when the corrupted
    /// population is a union of differently transformed copies of the base.
    pub fn corruption_mixture(
        label: &str,
        base: &str,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<Vec<f64>>>,
    ) -> Self {
        Self {
            label: label.to_string(),
            weights: Some(weights),
            means: Some(means),
            covs: Some(covs),
            base_class: Some(base.to_string()),
            corruption: None,
        }
    }
}

/// Serialized form of a whole world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldConfig {
    #[serde(default)]
    pub schedule: NoiseSchedule,
    pub classes: Vec<ClassConfig>,
    /// Optional explicit unconditional prior (label -> weight); defaults to
    /// uniform over content classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncond: Option<IndexMap<String, f64>>,
}

impl WorldConfig {
    pub fn build(self) -> Result<World> {
        let mut classes: IndexMap<String, ClassDef> = IndexMap::new();
        let mut dim: Option<usize> = None;
        for cc in &self.classes {
            if classes.contains_key(&cc.label) {
                return Err(Error::Config(format!("duplicate class label `{}`", cc.label)));
            }
            let def = match (&cc.base_class, &cc.corruption) {
                (None, None) => ClassDef {
                    label: cc.label.clone(),
                    mixture: mixture_from_params(cc)?,
                    base: None,
                },
                (Some(base), Some(ops)) => {
                    let base_def = classes.get(base).ok_or_else(|| {
                        Error::Config(format!(
                            "class `{}` references `{base}`, which is not defined before it",
                            cc.label
                        ))
                    })?;
                    let mut mixture = base_def.mixture.clone();
                    for op in ops.as_slice().iter() {
                        mixture = mixture.corrupted(op)?;
                    }
                    ClassDef { label: cc.label.clone(), mixture, base: Some(base.clone()) }
                }
                // a corruption spelled out by its mixture rather than by
                // operators on the base
                (Some(base), None) => {
                    if !classes.contains_key(base) {
                        return Err(Error::Config(format!(
                            "class `{}` references `{base}`, which is not defined before it",
                            cc.label
                        )));
                    }
                    ClassDef {
                        label: cc.label.clone(),
                        mixture: mixture_from_params(cc)?,
                        base: Some(base.clone()),
                    }
                }
                (None, Some(_)) => {
                    return Err(Error::Config(format!(
                        "class `{}` lists corruption ops but no base_class",
                        cc.label
                    )))
                }
            };
            match dim {
                None => dim = Some(def.mixture.dim()),
                Some(d) if d != def.mixture.dim() => {
                    return Err(Error::Config(format!(
                        "class `{}` has dim {}, world has dim {d}",
                        cc.label,
                        def.mixture.dim()
                    )))
                }
                _ => {}
            }
            classes.insert(cc.label.clone(), def);
        }
        if classes.is_empty() {
            return Err(Error::Config("world has no classes".into()));
        }
        let dim = dim.expect("nonempty world has a dimension");

        let uncond = match &self.uncond {
            Some(map) => {
                let mut weights = vec![0.0; classes.len()];
                let mut total = 0.0;
                for (label, w) in map {
                    let idx = classes
                        .get_index_of(label)
                        .ok_or_else(|| Error::UnknownClass(label.clone()))?;
                    if !(w.is_finite() && *w >= 0.0) {
                        return Err(Error::Config(format!("uncond weight for `{label}` must be >= 0")));
                    }
                    weights[idx] = *w;
                    total += w;
                }
                if total <= 0.0 {
                    return Err(Error::Config("uncond weights sum to zero".into()));
                }
                for w in &mut weights {
                    *w /= total;
                }
                weights
            }
            None => {
                let content: Vec<usize> = classes
                    .values()
                    .enumerate()
                    .filter(|(_, c)| !c.is_corruption())
                    .map(|(i, _)| i)
                    .collect();
                if content.is_empty() {
                    return Err(Error::Config(
                        "world has no content classes; provide an explicit uncond prior".into(),
                    ));
                }
                let mut weights = vec![0.0; classes.len()];
                for i in &content {
                    weights[*i] = 1.0 / content.len() as f64;
                }
                weights
            }
        };

        Ok(World { schedule: self.schedule.clone(), classes, uncond, dim, config: self })
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config("covariance rows must form a square matrix".into()));
    }
    Ok(Matrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn mixture_from_params(cc: &ClassConfig) -> Result<GaussianMixture> {
    let weights = cc
        .weights
        .clone()
        .ok_or_else(|| Error::Config(format!("class `{}` is missing `weights`", cc.label)))?;
    let means = cc
        .means
        .as_ref()
        .ok_or_else(|| Error::Config(format!("class `{}` is missing `means`", cc.label)))?
        .iter()
        .map(|m| Vector::from_column_slice(m))
        .collect::<Vec<_>>();
    let covs = cc
        .covs
        .as_ref()
        .ok_or_else(|| Error::Config(format!("class `{}` is missing `covs`", cc.label)))?
        .iter()
        .map(|rows| matrix_from_rows(rows))
        .collect::<Result<Vec<_>>>()?;
    GaussianMixture::new(weights, means, covs)
}
