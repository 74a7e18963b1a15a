use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use histocrf_core::baselines::LpConfig;
use histocrf_core::experiments::{
    run_ablation_grid, write_ablation_csv, write_reports_csv, AblationGrid, ExperimentReport, SamplingStrategy,
    Workbench,
};
use histocrf_core::inference::Refiner;
use histocrf_core::io::{load_dataset, write_labels};
use histocrf_core::potentials::compute_unary;
use histocrf_core::synthetic::{generate_synthetic, synthesize, SyntheticSpec};
use histocrf_core::{Error, NeighborhoodIndex};
use histocrf_service::{AppState, ServiceConfig};
use serde::Serialize;
use serde_json::json;

use crate::{AblateArgs, BenchArgs, Command, HitlArgs, LpArgs, RefineArgs, ServeArgs, SynthArgs};

/// 1 for validation failures, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Refine(a) => refine(a),
        Command::Lp(a) => lp(a),
        Command::Hitl(a) => hitl(a),
        Command::Ablate(a) => ablate(a),
        Command::Serve(a) => serve(a),
        Command::Bench(a) => bench(a),
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Resolved configuration plus the exact arguments, enough to rerun.
fn write_snapshot(dir: &Path, command: &str, config: impl Serialize) -> Result<()> {
    let snapshot = json!({
        "command": command,
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&snapshot)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn write_report(dir: &Path, report: &ExperimentReport) -> Result<()> {
    let path = dir.join("report.csv");
    let file = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    write_reports_csv(BufWriter::new(file), std::slice::from_ref(report))?;
    write_labels(&report.predictions, dir.join("predictions.txt"))?;
    println!(
        "{} {}: accuracy {:.4} ({} annotations, {} iterations)",
        report.method.as_str(),
        report.strategy,
        report.accuracy,
        report.annotations_placed,
        report.iterations
    );
    Ok(())
}

fn workbench(manifest: &Path, config: histocrf_core::experiments::RunConfig) -> Result<Workbench> {
    let dataset = load_dataset(manifest)?;
    Ok(Workbench::new(Arc::new(dataset), config)?)
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        patches_per_class: a.per_class,
        dim_unary: a.dim_unary,
        dim_pairwise: a.dim_pairwise,
        cluster_separation: a.separation,
        unary_noise: a.noise,
        seed: a.seed,
        unary_offset: a.offset,
    };
    spec.validate()?;
    create_out(&a.out)?;
    let manifest = generate_synthetic(&spec, &a.out)?;
    write_snapshot(&a.out, "synth", &spec)?;
    println!("{}", manifest.display());
    Ok(())
}

fn refine(a: RefineArgs) -> Result<()> {
    let config = a.engine.run_config();
    let strategy = SamplingStrategy {
        kind: a.strategy,
        budget: a.budget,
        per_round: 1,
        seed: a.engine.seed,
    };
    let bench = workbench(&a.manifest, config)?;
    create_out(&a.out)?;
    let report = if a.engine.max_iterations == 0 {
        bench.zero_shot()?
    } else {
        bench.histocrf(&strategy)?
    };
    write_snapshot(
        &a.out,
        "refine",
        json!({ "manifest": a.manifest, "run": config, "strategy": strategy,
                "zero_shot_only": a.engine.max_iterations == 0 }),
    )?;
    write_report(&a.out, &report)
}

fn lp(a: LpArgs) -> Result<()> {
    let lp = LpConfig {
        alpha_lp: a.alpha_lp,
        k_graph: a.k_graph,
        solver: a.solver,
        iter_tol: a.iter_tol,
        iter_max: a.iter_max,
        closed_form_max_n: a.max_n,
    };
    lp.validate()?;
    let strategy = SamplingStrategy {
        kind: a.strategy,
        budget: a.budget,
        per_round: 1,
        seed: a.seed,
    };
    let mut config = histocrf_core::experiments::RunConfig::default();
    config.neighborhood.seed = a.seed;
    let bench = workbench(&a.manifest, config)?;
    create_out(&a.out)?;
    let report = bench.label_propagation(&strategy, &lp)?;
    write_snapshot(&a.out, "lp", json!({ "manifest": a.manifest, "lp": lp, "strategy": strategy }))?;
    write_report(&a.out, &report)
}

fn hitl(a: HitlArgs) -> Result<()> {
    let config = a.engine.run_config();
    let bench = workbench(&a.manifest, config)?;
    create_out(&a.out)?;
    let report = bench.hitl(a.per_round, a.budget, a.engine.seed)?;
    write_snapshot(
        &a.out,
        "hitl",
        json!({ "manifest": a.manifest, "run": config, "per_round": a.per_round,
                "budget": a.budget, "seed": a.engine.seed }),
    )?;
    let path = a.out.join("rounds.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for r in &report.rounds {
        w.serialize(r)?;
    }
    w.flush()?;
    write_report(&a.out, &report)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let text = fs::read_to_string(&a.grid).with_context(|| format!("reading {}", a.grid.display()))?;
    let grid: AblationGrid = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", a.grid.display())))?;
    let config = a.engine.run_config();
    let bench = workbench(&a.manifest, config)?;
    create_out(&a.out)?;
    let rows = run_ablation_grid(&bench, &grid)?;
    let path = a.out.join("ablation.csv");
    let file = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    write_ablation_csv(BufWriter::new(file), &rows)?;
    write_snapshot(&a.out, "ablate", json!({ "manifest": a.manifest, "run": config, "grid": grid }))?;
    for r in &rows {
        println!(
            "{} beta_on={} k={} alpha={}: accuracy {:.4}, {} bytes",
            r.term.as_str(),
            r.beta_on,
            r.report.config.neighborhood.k_base,
            r.report.config.engine.weights.alpha,
            r.report.accuracy,
            r.memory_bytes
        );
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        max_n: a.max_n,
        max_sessions: a.max_sessions,
        max_belief_cells: a.max_belief_cells,
        defaults: a.engine.run_config(),
    };
    config.defaults.engine.validate()?;
    config.defaults.neighborhood.validate()?;
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.listen)
            .await
            .with_context(|| format!("binding {}", a.listen))?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        histocrf_service::serve(listener, AppState::new(config)).await?;
        Ok(())
    })
}

fn bench(a: BenchArgs) -> Result<()> {
    if a.classes < 2 || a.n % a.classes != 0 {
        return Err(Error::InvalidConfig("--n must be a multiple of --classes (>= 2)".into()).into());
    }
    if a.iterations == 0 {
        return Err(Error::InvalidConfig("--iterations must be >= 1".into()).into());
    }
    let spec = SyntheticSpec {
        num_classes: a.classes,
        patches_per_class: a.n / a.classes,
        dim_unary: a.dim,
        dim_pairwise: a.dim,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let dataset = synthesize(&spec)?.dataset;
    let mut config = histocrf_core::experiments::RunConfig::default();
    config.neighborhood.k_base = a.k;
    config.neighborhood.seed = a.seed;

    let start = std::time::Instant::now();
    let unary = Arc::new(compute_unary(&dataset.unary, &dataset.text, config.engine.temperature)?);
    let index = Arc::new(NeighborhoodIndex::build(&dataset.pairwise, config.neighborhood)?);
    let setup = start.elapsed().as_secs_f64();

    let mut refiner = Refiner::new(unary, index, config.engine)?;
    let mut seconds = Vec::with_capacity(a.iterations);
    for _ in 0..a.iterations {
        seconds.push(refiner.step()?.seconds);
    }
    let mean = seconds.iter().sum::<f64>() / seconds.len() as f64;
    println!(
        "n={} classes={} k={} threads={} setup_seconds={setup:.3}",
        a.n,
        a.classes,
        a.k,
        std::thread::available_parallelism().map_or(1, |p| p.get())
    );
    println!("seconds_per_iteration={mean:.6}");
    Ok(())
}
