//! `sdlab` — drive the mixture laboratory from the shell.
//!
//! Subcommands mirror the library surface: `oracle` self-checks the exact
//! scores, `flow` runs the probability-flow ODE, `distill` executes
//! experiment configs, `transport` compares couplings, `metrics` scores a
//! point file, and `bench` runs the built-in studies.
//!
//! Exit codes: 0 success, 1 usage or runtime error, 2 a numeric blow-up
//! (non-finite state), 3 an oracle self-check exceeded its tolerance.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use sdlab::bench::{self, worlds, BridgeStudyConfig, ExperimentConfig};
use sdlab::distill::Method;
use sdlab::flow::{self, OdeSpec, Solver, TranslateSpec};
use sdlab::metrics;
use sdlab::mixture::GaussianMixture;
use sdlab::oracle;
use sdlab::transport::SinkhornSpec;
use sdlab::world::World;
use sdlab::Vector;

#[derive(Parser)]
#[command(name = "sdlab", version, about = "Analytic mixture laboratory for score distillation")]
struct Cli {
    /// Worker threads (default: the SDLAB_THREADS variable, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Exact-score self checks.
    Oracle {
        #[command(subcommand)]
        cmd: OracleCmd,
    },
    /// Probability-flow sampling, inversion, and translation.
    Flow {
        #[command(subcommand)]
        cmd: FlowCmd,
    },
    /// Run a distillation experiment config.
    Distill {
        #[command(subcommand)]
        cmd: DistillCmd,
    },
    /// Couplings: entropic transport vs. the deterministic flow map.
    Transport {
        #[command(subcommand)]
        cmd: TransportCmd,
    },
    /// Score a file of points against a condition.
    Metrics {
        #[command(subcommand)]
        cmd: MetricsCmd,
    },
    /// Built-in studies on the bundled worlds.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Compare exact scores against central finite differences of the exact
    /// log-density on randomized worlds.
    Check {
        #[arg(long, default_value_t = 200)]
        queries: usize,
        #[arg(long, default_value_t = 4)]
        max_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        /// Fail (exit 3) when the worst relative error exceeds this.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
}

#[derive(Args)]
struct WorldArg {
    /// Builtin world (b1, b2, b3) or a world JSON path.
    #[arg(long, default_value = "b1")]
    world: String,
}

#[derive(Subcommand)]
enum FlowCmd {
    /// Draw latents and integrate them down to data.
    Sample {
        #[command(flatten)]
        world: WorldArg,
        #[arg(long, default_value = "uncond")]
        cond: String,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = SolverArg::Heun)]
        solver: SolverArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write samples as CSV here instead of printing JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Map a data point to its latent.
    Invert {
        #[command(flatten)]
        world: WorldArg,
        #[arg(long, default_value = "uncond")]
        cond: String,
        /// Comma-separated coordinates.
        #[arg(long, allow_hyphen_values = true)]
        point: String,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = SolverArg::Heun)]
        solver: SolverArg,
    },
    /// Two-way translation between conditions.
    Translate {
        #[command(flatten)]
        world: WorldArg,
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
        #[arg(long, allow_hyphen_values = true)]
        point: String,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = SolverArg::Heun)]
        solver: SolverArg,
        /// Keep the raw latent instead of re-standardizing it between the
        /// two conditions' noised moments.
        #[arg(long)]
        no_latent_match: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SolverArg {
    Euler,
    Heun,
}

impl From<SolverArg> for Solver {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Euler => Solver::Euler,
            SolverArg::Heun => Solver::Heun,
        }
    }
}

#[derive(Subcommand)]
enum DistillCmd {
    /// Execute an experiment config (JSON) over all its methods and seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for config/worlds/records/summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TransportCmd {
    /// Sweep the entropic regularizer and compare against the flow coupling.
    Compare {
        #[command(flatten)]
        world: WorldArg,
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
        /// Geometric sweep `start:end:count`, e.g. `0.5:0.005:5`.
        #[arg(long, default_value = "0.5:0.005:5")]
        eps_sweep: String,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Metric report of a CSV point file against a condition's data mixture.
    Report {
        #[command(flatten)]
        world: WorldArg,
        #[arg(long, default_value = "uncond")]
        cond: String,
        /// CSV/whitespace file, one point per line.
        #[arg(long)]
        points: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// The restoration benchmark over the full method roster.
    Table1 {
        /// `b1` or `b2`.
        #[arg(long, default_value = "b1")]
        world: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seed list (default 0,1,2,3,4).
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        particles: Option<usize>,
    },
    /// Warm-up length sweep for the calibrated method.
    AblateStage1 {
        #[arg(long, default_value = "b2")]
        world: String,
        /// Comma-separated warm-up lengths.
        #[arg(long, default_value = "0,500")]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        particles: Option<usize>,
    },
}

fn parse_point(s: &str) -> anyhow::Result<Vector> {
    let coords: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad coordinate `{p}`")))
        .collect::<anyhow::Result<_>>()?;
    if coords.is_empty() {
        bail!("point must have at least one coordinate");
    }
    Ok(Vector::from_column_slice(&coords))
}

fn parse_points_file(path: &PathBuf) -> anyhow::Result<Vec<Vector>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading points from {}", path.display()))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let coords: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<f64>().with_context(|| format!("bad number `{p}`")))
            .collect::<anyhow::Result<_>>()?;
        if !coords.is_empty() {
            out.push(Vector::from_column_slice(&coords));
        }
    }
    if out.is_empty() {
        bail!("no points found in {}", path.display());
    }
    Ok(out)
}

fn parse_eps_sweep(s: &str) -> anyhow::Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        bail!("--eps-sweep expects start:end:count, got `{s}`");
    }
    let start: f64 = parts[0].parse().context("bad sweep start")?;
    let end: f64 = parts[1].parse().context("bad sweep end")?;
    let count: usize = parts[2].parse().context("bad sweep count")?;
    if !(start > 0.0 && end > 0.0 && count >= 1) {
        bail!("sweep needs positive endpoints and count >= 1");
    }
    if count == 1 {
        return Ok(vec![start]);
    }
    let ratio = (end / start).powf(1.0 / (count - 1) as f64);
    Ok((0..count).map(|i| start * ratio.powi(i as i32)).collect())
}

fn parse_seed_list(s: &str) -> anyhow::Result<Vec<u64>> {
    s.split(',')
        .map(|p| p.trim().parse::<u64>().with_context(|| format!("bad seed `{p}`")))
        .collect()
}

fn parse_usize_list(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad value `{p}`")))
        .collect()
}

fn load_world(spec: &str) -> anyhow::Result<World> {
    Ok(worlds::load(spec)?.0)
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn points_csv(points: &[Vector]) -> String {
    let mut s = String::new();
    for p in points {
        let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Oracle { cmd: OracleCmd::Check { queries, max_dim, seed, step, tol } } => {
            let report = oracle::finite_difference_check(queries, max_dim, seed, step)?;
            print_json(&report)?;
            if report.max_rel_err > tol {
                bail!("oracle check failed: max relative error {} > {tol}", report.max_rel_err);
            }
            Ok(())
        }
        Cmd::Flow { cmd } => match cmd {
            FlowCmd::Sample { world, cond, n, steps, solver, seed, out } => {
                let w = load_world(&world.world)?;
                let c = w.parse_condition(&cond)?;
                let latents = GaussianMixture::isotropic(Vector::zeros(w.dim()), 1.0)?
                    .sample_seeded(n, seed)?;
                let spec = OdeSpec::generation(solver.into(), steps);
                let mut samples = Vec::with_capacity(n);
                let mut n_evals = 0;
                for z in &latents {
                    let r = flow::generate(&w, &c, z, &spec)?;
                    n_evals += r.n_evals;
                    samples.push(r.x);
                }
                if let Some(path) = out {
                    std::fs::write(&path, points_csv(&samples))
                        .with_context(|| format!("writing {}", path.display()))?;
                    eprintln!("wrote {} samples ({} evaluations)", samples.len(), n_evals);
                } else {
                    let rows: Vec<Vec<f64>> =
                        samples.iter().map(|s| s.iter().copied().collect()).collect();
                    print_json(&serde_json::json!({ "samples": rows, "n_evals": n_evals }))?;
                }
                Ok(())
            }
            FlowCmd::Invert { world, cond, point, steps, solver } => {
                let w = load_world(&world.world)?;
                let c = w.parse_condition(&cond)?;
                let x = parse_point(&point)?;
                let r = flow::invert(&w, &c, &x, &OdeSpec::inversion(solver.into(), steps))?;
                print_json(&serde_json::json!({
                    "latent": r.x.iter().copied().collect::<Vec<f64>>(),
                    "n_evals": r.n_evals,
                }))
            }
            FlowCmd::Translate { world, source, target, point, steps, solver, no_latent_match } => {
                let w = load_world(&world.world)?;
                let src = w.parse_condition(&source)?;
                let tgt = w.parse_condition(&target)?;
                let x = parse_point(&point)?;
                let spec = TranslateSpec {
                    solver: solver.into(),
                    steps,
                    latent_match: !no_latent_match,
                    ..TranslateSpec::default()
                };
                let r = flow::ddib_translate(&w, &src, &tgt, &x, &spec)?;
                print_json(&serde_json::json!({
                    "latent": r.latent.iter().copied().collect::<Vec<f64>>(),
                    "output": r.output.iter().copied().collect::<Vec<f64>>(),
                    "n_evals": r.n_evals,
                }))
            }
        },
        Cmd::Distill { cmd: DistillCmd::Run { config, out } } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading config {}", config.display()))?;
            let cfg: ExperimentConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", config.display()))?;
            let summary = bench::run_benchmark(&cfg, out.as_deref())?;
            print_json(&summary)
        }
        Cmd::Transport {
            cmd: TransportCmd::Compare { world, source, target, eps_sweep, n, steps, seed, out },
        } => {
            let cfg = BridgeStudyConfig {
                world: world.world,
                source,
                target,
                n,
                seed,
                flow_steps: steps,
                eps_values: parse_eps_sweep(&eps_sweep)?,
                sinkhorn: SinkhornSpec::default(),
            };
            let summary = bench::run_bridge_study(&cfg, out.as_deref())?;
            print_json(&summary)
        }
        Cmd::Metrics { cmd: MetricsCmd::Report { world, cond, points, seed } } => {
            let w = load_world(&world.world)?;
            let c = w.parse_condition(&cond)?;
            let pts = parse_points_file(&points)?;
            let target = w.data_mixture_for(&c)?;
            let spec = sdlab::metrics::MetricSpec { seed, ..Default::default() };
            let report = metrics::report(&pts, &target, &spec)?;
            print_json(&report)
        }
        Cmd::Bench { cmd } => match cmd {
            BenchCmd::Table1 { world, out, seeds, iters, particles } => {
                let mut cfg = match world.as_str() {
                    "b1" => ExperimentConfig::table1_b1(),
                    "b2" => ExperimentConfig::table1_b2(),
                    other => bail!("table1 supports b1 and b2, got `{other}`"),
                };
                if let Some(s) = seeds {
                    cfg.seeds = parse_seed_list(&s)?;
                }
                if let Some(i) = iters {
                    cfg.n_iters = i;
                }
                if let Some(p) = particles {
                    cfg.n_particles = p;
                }
                let summary = bench::run_benchmark(&cfg, out.as_deref())?;
                print_json(&summary)
            }
            BenchCmd::AblateStage1 { world, values, out, seeds, iters, particles } => {
                let mut cfg = match world.as_str() {
                    "b1" => ExperimentConfig::table1_b1(),
                    "b2" => ExperimentConfig::ablation_b2(),
                    other => bail!("ablate-stage1 supports b1 and b2, got `{other}`"),
                };
                cfg.methods = vec![Method::Ours {
                    weight: 25.0,
                    stage1_iters: 500,
                    stage1_scale: 40.0,
                }];
                if let Some(s) = seeds {
                    cfg.seeds = parse_seed_list(&s)?;
                }
                if let Some(i) = iters {
                    cfg.n_iters = i;
                }
                if let Some(p) = particles {
                    cfg.n_particles = p;
                }
                let summary =
                    bench::run_ablation_stage1(&cfg, &parse_usize_list(&values)?, out.as_deref())?;
                print_json(&summary)
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("SDLAB_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(t) = threads {
        if t > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
                eprintln!("sdlab: could not size the thread pool: {e}");
                return ExitCode::from(1);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("sdlab: {err:#}");
            let code = if err.downcast_ref::<sdlab::Error>().is_some_and(|e| {
                matches!(e, sdlab::Error::NonFinite { .. })
            }) {
                2
            } else if err.to_string().contains("oracle check failed") {
                3
            } else {
                1
            };
            ExitCode::from(code)
        }
    }
}
