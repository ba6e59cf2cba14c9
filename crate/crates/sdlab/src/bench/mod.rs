//! Experiment harness: named benchmark worlds, serializable experiment
//! configs, deterministic on-disk layout, and the cross-seed summaries the
//! studies report.
//!
//! Layout under an output directory:
//!
//! ```text
//! config.json              the experiment config as given
//! worlds.json              the resolved world definition
//! runs/<method>/record.csv one row per recorded iteration per seed
//! summary.json             cross-seed statistics (includes wall time)
//! ```
//!
//! Every `record.csv` starts with a `# config_hash=` comment so results can
//! be matched to the config that produced them. Rows contain no wall-clock
//! fields; two runs of the same config and seed write identical bytes.

pub mod worlds;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{self, InitSpec, Method, OptimizerSpec, RunConfig, RunOutput};
use crate::flow::Solver;
use crate::metrics::{MetricReport, MetricSpec};
use crate::transport::{self, SinkhornSpec};
use crate::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a 64 offset basis.
pub fn fnv1a64_init() -> u64 {
    FNV_OFFSET
}

/// Fold `bytes` into an FNV-1a 64 state.
pub fn fnv1a64_update(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// One-shot FNV-1a 64.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_update(fnv1a64_init(), bytes)
}

fn hex16(h: u64) -> String {
    format!("{h:016x}")
}

/// Sample mean and (n-1)-normalized standard deviation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> Stat {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return Stat { mean: f64::NAN, std: f64::NAN };
    }
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Stat { mean, std }
}

/// Paired difference `a_i - b_i` with its standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Paired {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Paired {
    /// How many standard errors the mean difference sits above zero.
    pub fn sigmas_above_zero(&self) -> f64 {
        if self.std_err == 0.0 {
            if self.mean > 0.0 {
                f64::INFINITY
            } else if self.mean < 0.0 {
                f64::NEG_INFINITY
            } else {
                0.0
            }
        } else {
            self.mean / self.std_err
        }
    }
}

pub fn paired(a: &[f64], b: &[f64]) -> Result<Paired> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Config(format!(
            "paired statistics need two equal-length samples of n >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let s = mean_std(&diffs);
    Ok(Paired { mean: s.mean, std_err: s.std / (diffs.len() as f64).sqrt(), n: diffs.len() })
}

fn d_particles() -> usize {
    32
}
fn d_iters() -> usize {
    2500
}
fn d_t_range() -> (f64, f64) {
    (0.02, 0.98)
}
fn d_record_every() -> usize {
    250
}
fn d_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn d_metrics() -> MetricSpec {
    MetricSpec { n_dirs: 16, n_target_samples: 1024, seed: 0 }
}

/// A multi-method, multi-seed experiment over one world and scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Builtin world name (`b1`, `b2`, `b3`) or a world JSON path.
    pub world: String,
    pub target: String,
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub negative: Option<String>,
    pub methods: Vec<Method>,
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
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_record_every")]
    pub record_every: usize,
    #[serde(default = "d_metrics")]
    pub metrics: MetricSpec,
}

impl ExperimentConfig {
    /// The standard restoration scenario on the 1D world: translate the
    /// doubly corrupted class back to its clean base, full method roster.
    pub fn table1_b1() -> Self {
        Self::restoration("b1", "class:B", "class:B:smooth+noisy", "corr:B")
    }

    /// The same scenario on the ring world: denoise one arc class. The
    /// noisy corruption keeps component means in place, so the calibrated
    /// displacement gradient has a fixed point at the clean class; a
    /// mean-shifting corruption (desaturate) would leave it pushing
    /// particles outward forever.
    pub fn table1_b2() -> Self {
        Self::restoration("b2", "class:C0", "class:C0:noisy", "corr:C0")
    }

    /// Generation-style scenario for the warm-up ablation: particles start
    /// as a blob near the origin, nothing like the target arc, and the
    /// source condition describes warm-up artifacts (flattened blobs and
    /// oversaturated excursions). Run from scratch, that description
    /// mismatches the blob and the displacement chases it off to infinity;
    /// after a warm-up stage the description is accurate and the same
    /// gradient settles at the clean class.
    pub fn ablation_b2() -> Self {
        let mut cfg = Self::restoration("b2", "class:C0", "class:C0:flat+oversat", "corr:C0");
        cfg.methods =
            vec![Method::Ours { weight: 25.0, stage1_iters: 500, stage1_scale: 40.0 }];
        cfg.init = InitSpec::Gauss { std: 0.5 };
        cfg
    }

    fn restoration(world: &str, target: &str, source: &str, negative: &str) -> Self {
        Self {
            world: world.to_string(),
            target: target.to_string(),
            source: Some(source.to_string()),
            negative: Some(negative.to_string()),
            methods: vec![
                Method::Sds { scale: 100.0 },
                Method::SdsDominant { scale: 100.0 },
                Method::Dds,
                Method::Nfsd { scale: 7.5, cutoff: 0.2 },
                Method::Csd { w1: 40.0, w2: 40.0, anneal_steps: 500 },
                Method::Vsd {
                    scale: 7.5,
                    refit_every: 1,
                    model: crate::estimator::SourceModelSpec::Gaussian,
                },
                Method::Ours { weight: 25.0, stage1_iters: 500, stage1_scale: 40.0 },
            ],
            n_particles: d_particles(),
            n_iters: d_iters(),
            optimizer: OptimizerSpec::default(),
            t_range: d_t_range(),
            init: InitSpec::default(),
            seeds: d_seeds(),
            record_every: d_record_every(),
            metrics: d_metrics(),
        }
    }

    pub fn run_config(&self, method: &Method, seed: u64) -> RunConfig {
        RunConfig {
            method: method.clone(),
            target: self.target.clone(),
            source: self.source.clone(),
            negative: self.negative.clone(),
            n_particles: self.n_particles,
            n_iters: self.n_iters,
            optimizer: self.optimizer,
            t_range: self.t_range,
            init: self.init,
            seed,
            record_every: self.record_every,
            metrics: self.metrics,
        }
    }

    /// Hash of the canonical JSON serialization, printed at the top of every
    /// record file.
    pub fn config_hash(&self) -> Result<String> {
        Ok(hex16(fnv1a64(&serde_json::to_vec(self)?)))
    }
}

/// Final state of one seeded run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub final_metrics: MetricReport,
    pub n_evals: usize,
    pub n_source_evals: usize,
    pub n_fit_ops: usize,
    pub wall_ms: f64,
}

impl SeedOutcome {
    fn from_run(seed: u64, out: &RunOutput) -> Self {
        Self {
            seed,
            final_metrics: out.rows.last().expect("runs always record a final row").metrics,
            n_evals: out.n_evals,
            n_source_evals: out.n_source_evals,
            n_fit_ops: out.n_fit_ops,
            wall_ms: out.wall_ms,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: String,
    pub seeds: Vec<SeedOutcome>,
    pub frechet: Stat,
    pub mean_loglik: Stat,
    pub n_evals_mean: f64,
    pub wall_ms_total: f64,
}

impl MethodOutcome {
    fn new(method: String, seeds: Vec<SeedOutcome>) -> Self {
        let frechet = mean_std(&seeds.iter().map(|s| s.final_metrics.frechet).collect::<Vec<_>>());
        let mean_loglik =
            mean_std(&seeds.iter().map(|s| s.final_metrics.mean_loglik).collect::<Vec<_>>());
        let n_evals_mean =
            seeds.iter().map(|s| s.n_evals as f64).sum::<f64>() / seeds.len().max(1) as f64;
        let wall_ms_total = seeds.iter().map(|s| s.wall_ms).sum();
        Self { method, seeds, frechet, mean_loglik, n_evals_mean, wall_ms_total }
    }

    /// Extract one per-seed final scalar, in seed order.
    pub fn finals<F: Fn(&SeedOutcome) -> f64>(&self, f: F) -> Vec<f64> {
        self.seeds.iter().map(f).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub config_hash: String,
    pub methods: Vec<MethodOutcome>,
}

impl BenchmarkSummary {
    pub fn method(&self, name: &str) -> Option<&MethodOutcome> {
        self.methods.iter().find(|m| m.method == name)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn record_csv(config_hash: &str, runs: &[(u64, RunOutput)]) -> String {
    let mut out = format!("# config_hash={config_hash}\n");
    out.push_str(
        "seed,iter,frechet,sliced_w2,energy,mean_loglik,grad_norm_mean,n_evals,n_source_evals,n_fit_ops\n",
    );
    for (seed, run) in runs {
        for r in &run.rows {
            let m = r.metrics;
            out.push_str(&format!(
                "{seed},{},{},{},{},{},{},{},{},{}\n",
                r.iter,
                m.frechet,
                m.sliced_w2,
                m.energy,
                m.mean_loglik,
                r.grad_norm_mean,
                r.n_evals,
                r.n_source_evals,
                r.n_fit_ops
            ));
        }
    }
    out
}

/// Run every configured method over every seed; optionally persist the full
/// layout under `out_dir`.
pub fn run_benchmark(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<BenchmarkSummary> {
    if config.methods.is_empty() {
        return Err(Error::Config("benchmark needs at least one method".into()));
    }
    if config.seeds.is_empty() {
        return Err(Error::Config("benchmark needs at least one seed".into()));
    }
    let (world, renderer) = worlds::load(&config.world)?;
    let hash = config.config_hash()?;
    if let Some(dir) = out_dir {
        write_json(&dir.join("config.json"), config)?;
        write_json(&dir.join("worlds.json"), world.config())?;
    }
    let mut methods = Vec::new();
    for method in &config.methods {
        let mut runs: Vec<(u64, RunOutput)> = Vec::new();
        for &seed in &config.seeds {
            let rc = config.run_config(method, seed);
            runs.push((seed, distill::run(&world, &renderer, &rc)?));
        }
        if let Some(dir) = out_dir {
            let path: PathBuf = dir.join("runs").join(method.name()).join("record.csv");
            write_text(&path, &record_csv(&hash, &runs))?;
        }
        let outcomes =
            runs.iter().map(|(seed, out)| SeedOutcome::from_run(*seed, out)).collect();
        methods.push(MethodOutcome::new(method.name().to_string(), outcomes));
    }
    let summary = BenchmarkSummary { config_hash: hash, methods };
    if let Some(dir) = out_dir {
        write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub stage1_iters: usize,
    pub seeds: Vec<SeedOutcome>,
    pub frechet: Stat,
    pub mean_loglik: Stat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSummary {
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationSummary {
    pub fn row(&self, stage1_iters: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.stage1_iters == stage1_iters)
    }
}

/// Sweep the warm-up length of the calibrated two-endpoint method, holding
/// everything else at the config's values.
pub fn run_ablation_stage1(
    config: &ExperimentConfig,
    stage1_values: &[usize],
    out_dir: Option<&Path>,
) -> Result<AblationSummary> {
    if stage1_values.is_empty() {
        return Err(Error::Config("stage-1 ablation needs at least one value".into()));
    }
    let base = config
        .methods
        .iter()
        .find_map(|m| match m {
            Method::Ours { weight, stage1_scale, .. } => Some((*weight, *stage1_scale)),
            _ => None,
        })
        .unwrap_or((25.0, 40.0));
    let (world, renderer) = worlds::load(&config.world)?;
    let hash = config.config_hash()?;
    if let Some(dir) = out_dir {
        write_json(&dir.join("config.json"), config)?;
        write_json(&dir.join("worlds.json"), world.config())?;
    }
    let mut rows = Vec::new();
    for &v in stage1_values {
        let method = Method::Ours { weight: base.0, stage1_iters: v, stage1_scale: base.1 };
        let mut runs: Vec<(u64, RunOutput)> = Vec::new();
        for &seed in &config.seeds {
            let rc = config.run_config(&method, seed);
            runs.push((seed, distill::run(&world, &renderer, &rc)?));
        }
        if let Some(dir) = out_dir {
            let path = dir.join("runs").join(format!("stage1-{v}")).join("record.csv");
            write_text(&path, &record_csv(&hash, &runs))?;
        }
        let seeds: Vec<SeedOutcome> =
            runs.iter().map(|(seed, out)| SeedOutcome::from_run(*seed, out)).collect();
        let frechet = mean_std(&seeds.iter().map(|s| s.final_metrics.frechet).collect::<Vec<_>>());
        let mean_loglik =
            mean_std(&seeds.iter().map(|s| s.final_metrics.mean_loglik).collect::<Vec<_>>());
        rows.push(AblationRow { stage1_iters: v, seeds, frechet, mean_loglik });
    }
    let summary = AblationSummary { config_hash: hash, rows };
    if let Some(dir) = out_dir {
        write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BridgeStudyConfig {
    pub world: String,
    pub source: String,
    pub target: String,
    #[serde(default = "d_bridge_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_bridge_steps")]
    pub flow_steps: usize,
    pub eps_values: Vec<f64>,
    #[serde(default = "d_sinkhorn")]
    pub sinkhorn: SinkhornSpec,
}

fn d_bridge_n() -> usize {
    64
}
fn d_bridge_steps() -> usize {
    128
}
fn d_sinkhorn() -> SinkhornSpec {
    SinkhornSpec::default()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BridgeStudyRow {
    pub eps: f64,
    pub plan_cost: f64,
    pub residual: f64,
    pub iters: usize,
    /// Mean distance between the entropic barycentric image of each source
    /// atom and its deterministic flow translation.
    pub map_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BridgeStudySummary {
    pub config_hash: String,
    /// Mean squared displacement of the deterministic translation map.
    pub bridge_cost: f64,
    pub rows: Vec<BridgeStudyRow>,
}

/// Compare entropic couplings against the deterministic flow coupling on a
/// shared atom set, across a regularizer sweep.
pub fn run_bridge_study(
    config: &BridgeStudyConfig,
    out_dir: Option<&Path>,
) -> Result<BridgeStudySummary> {
    if config.eps_values.is_empty() {
        return Err(Error::Config("bridge study needs at least one epsilon".into()));
    }
    let (world, _) = worlds::load(&config.world)?;
    let src = world.parse_condition(&config.source)?;
    let tgt = world.parse_condition(&config.target)?;
    let hash = hex16(fnv1a64(&serde_json::to_vec(config)?));
    let pairs = transport::bridge_pairs(
        &world,
        &src,
        &tgt,
        config.n,
        config.seed,
        Solver::Heun,
        config.flow_steps,
    )?;
    let xs: Vec<_> = pairs.iter().map(|(x, _)| x.clone()).collect();
    let ys: Vec<_> = pairs.iter().map(|(_, y)| y.clone()).collect();
    let bridge_cost =
        pairs.iter().map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / pairs.len() as f64;
    let mut rows = Vec::new();
    for &eps in &config.eps_values {
        let spec = SinkhornSpec { eps, ..config.sinkhorn };
        let plan = transport::sinkhorn_points(&xs, &ys, &spec)?;
        let mapped = transport::barycentric_map(&plan, &ys)?;
        let map_gap = mapped
            .iter()
            .zip(&ys)
            .map(|(m, y)| (m - y).norm())
            .sum::<f64>()
            / ys.len() as f64;
        rows.push(BridgeStudyRow {
            eps,
            plan_cost: plan.cost,
            residual: plan.residual,
            iters: plan.iters,
            map_gap,
        });
    }
    let summary = BridgeStudySummary { config_hash: hash, bridge_cost, rows };
    if let Some(dir) = out_dir {
        write_json(&dir.join("config.json"), config)?;
        let mut csv = format!("# config_hash={}\n", summary.config_hash);
        csv.push_str("eps,plan_cost,residual,iters,map_gap\n");
        for r in &summary.rows {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.eps, r.plan_cost, r.residual, r.iters, r.map_gap
            ));
        }
        write_text(&dir.join("bridge.csv"), &csv)?;
        write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok(summary)
}
