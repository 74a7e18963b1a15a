//! Command-line entry points: dataset synthesis, batch refinement, label
//! propagation, simulated annotation loops, ablations, the HTTP service and
//! a throughput benchmark.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime
//! errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use histocrf_core::baselines::LpSolver;
use histocrf_core::experiments::{RunConfig, SamplingKind};
use histocrf_core::potentials::BaseTerm;
use histocrf_core::synthetic::DEFAULT_UNARY_OFFSET;

#[derive(Debug, Parser)]
#[command(name = "histocrf", version, about = "Sparse-CRF refinement of zero-shot patch predictions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Refine zero-shot predictions, optionally after one-shot annotation.
    Refine(RefineArgs),
    /// Label-propagation baseline.
    Lp(LpArgs),
    /// Simulated expert: annotate misclassified patches in rounds.
    Hitl(HitlArgs),
    /// Run an ablation grid read from a JSON file.
    Ablate(AblateArgs),
    /// Serve the interactive HTTP API.
    Serve(ServeArgs),
    /// Time one message-passing iteration on random data.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EngineArgs {
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.01)]
    pub beta: f64,
    #[arg(long, default_value_t = 16)]
    pub k_base: usize,
    #[arg(long, default_value_t = 5)]
    pub k_ann: usize,
    #[arg(long, default_value_t = 4)]
    pub pool_factor: usize,
    #[arg(long, default_value_t = 0.01)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 0 skips refinement and reports the zero-shot predictions.
    #[arg(long, default_value_t = 10)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0.0)]
    pub damping: f64,
    #[arg(long, default_value = "diversity")]
    pub term: BaseTerm,
    /// Leave annotated beliefs unclamped.
    #[arg(long)]
    pub no_clamp: bool,
}

impl EngineArgs {
    pub fn run_config(&self) -> RunConfig {
        let mut c = RunConfig::default();
        c.engine.weights.alpha = self.alpha;
        c.engine.weights.beta = self.beta;
        c.engine.temperature = self.temperature;
        c.engine.max_iterations = self.max_iterations.max(1);
        c.engine.convergence_tol = self.tol;
        c.engine.damping = self.damping;
        c.engine.clamp_annotations = !self.no_clamp;
        c.neighborhood.k_base = self.k_base;
        c.neighborhood.k_ann = self.k_ann;
        c.neighborhood.pool_factor = self.pool_factor;
        c.neighborhood.seed = self.seed;
        c.neighborhood.term = self.term;
        c
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 400)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub dim_unary: usize,
    #[arg(long, default_value_t = 64)]
    pub dim_pairwise: usize,
    #[arg(long, default_value_t = 1.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.4)]
    pub noise: f64,
    #[arg(long, default_value_t = DEFAULT_UNARY_OFFSET)]
    pub offset: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long, default_value = "none")]
    pub strategy: SamplingKind,
    #[arg(long, default_value_t = 0)]
    pub budget: usize,
}

#[derive(Debug, Clone, Args)]
pub struct LpArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub alpha_lp: f64,
    #[arg(long, default_value_t = 16)]
    pub k_graph: usize,
    #[arg(long, default_value = "closed-form")]
    pub solver: LpSolver,
    #[arg(long, default_value_t = 1e-8)]
    pub iter_tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub iter_max: usize,
    /// Largest N the closed form will attempt.
    #[arg(long, default_value_t = 5000)]
    pub max_n: usize,
    #[arg(long, default_value = "error-based")]
    pub strategy: SamplingKind,
    #[arg(long, default_value_t = 10)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct HitlArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long, default_value_t = 5)]
    pub per_round: usize,
    #[arg(long, default_value_t = 100)]
    pub budget: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON ablation grid; missing fields take their defaults.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, env = "HISTOCRF_LISTEN", default_value = "127.0.0.1:8080")]
    pub listen: String,
    #[arg(long, env = "HISTOCRF_MAX_N", default_value_t = 100_000)]
    pub max_n: usize,
    #[arg(long, env = "HISTOCRF_MAX_SESSIONS", default_value_t = 32)]
    pub max_sessions: usize,
    #[arg(long, env = "HISTOCRF_MAX_BELIEF_CELLS", default_value_t = 1_000_000)]
    pub max_belief_cells: usize,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Timed iterations; the mean is reported.
    #[arg(long, default_value_t = 5)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
