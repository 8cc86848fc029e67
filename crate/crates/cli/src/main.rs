//! Experiment runner CLI: seeded batches, cost sweeps, predictor
//! calibration, episode-log audits and training-target dumps.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ziprc_core::binning::prefix_targets;
use ziprc_core::harness::{
    audit_episode_logs, build_predictors, calibration_report, pareto_points, read_episode_logs,
    run_batch_with, write_csv, write_episode_logs, write_pareto_csv, write_results, Execution,
    ExperimentConfig, PredictorChoice,
};
use ziprc_core::strategies::StrategySpec;
use ziprc_core::worlds::{derive_seed, rollout, BasePolicy};

#[derive(Parser)]
#[command(
    name = "ziprc",
    about = "Adaptive test-time compute allocation over synthetic worlds",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of seeded episodes and emit per-cell metrics.
    Run(RunArgs),
    /// Run an alpha/beta grid and additionally emit the cost/reward
    /// frontier.
    Sweep(RunArgs),
    /// Evaluate a predictor against Monte Carlo ground truth.
    Calibrate(CalibrateArgs),
    /// Audit an episode-log file: recompute costs and realized utility.
    Replay(ReplayArgs),
    /// Roll out trajectories and dump per-prefix training targets.
    DumpTargets(DumpTargetsArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// World bundle name or worlds file path.
    #[arg(long)]
    world: Option<String>,
    /// Strategy spec, repeatable (e.g. zip_rc, bon:8, mv:3,
    /// reward_prune:8,threshold=0.4).
    #[arg(long = "strategy")]
    strategies: Vec<String>,
    /// Comma-separated compute/latency weights.
    #[arg(long)]
    alpha: Option<String>,
    /// Comma-separated reward/cost weights.
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// oracle | noisy:<scale> | dump:<path>
    #[arg(long)]
    predictor: Option<String>,
    /// Results path; a .csv projection is written alongside.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also dump per-episode logs (newline-delimited) for `replay`.
    #[arg(long)]
    logs: Option<PathBuf>,
    /// Run episodes on the calling thread instead of the worker pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, default_value = "mixed")]
    world: String,
    /// oracle | noisy:<scale> | dump:<path>
    #[arg(long, default_value = "oracle")]
    predictor: String,
    /// Rollouts behind the ground-truth joint estimate.
    #[arg(long, default_value_t = 256)]
    mc_samples: usize,
    /// Finished rollouts scored per world.
    #[arg(long, default_value_t = 400)]
    eval_rollouts: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Episode-log file produced by `run --logs`.
    #[arg(long)]
    logs: PathBuf,
}

#[derive(Args)]
struct DumpTargetsArgs {
    #[arg(long, default_value = "mixed")]
    world: String,
    /// Trajectories to roll out (round-robin over the bundle's worlds).
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also dump the raw rollout records (tokens and verifier value).
    #[arg(long)]
    rollouts: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args, false),
        Command::Sweep(args) => run(args, true),
        Command::Calibrate(args) => calibrate(args),
        Command::Replay(args) => replay(args),
        Command::DumpTargets(args) => dump_targets(args),
    }
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("bad {what} '{p}'"))
        })
        .collect()
}

fn assemble_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(world) = &args.world {
        config.world = world.clone();
    }
    if !args.strategies.is_empty() {
        config.strategies = args
            .strategies
            .iter()
            .map(|s| s.parse::<StrategySpec>().map_err(anyhow::Error::from))
            .collect::<Result<_>>()?;
    }
    if let Some(alpha) = &args.alpha {
        config.alphas = parse_list(alpha, "alpha")?;
    }
    if let Some(beta) = &args.beta {
        config.betas = parse_list(beta, "beta")?;
    }
    if let Some(episodes) = args.episodes {
        config.episodes = episodes;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(predictor) = &args.predictor {
        config.predictor = predictor.parse::<PredictorChoice>()?;
    }
    config.keep_episode_logs = args.logs.is_some();
    config.validate()?;
    Ok(config)
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut out = path.to_path_buf();
    out.set_extension(ext);
    out
}

fn run(args: RunArgs, sweep: bool) -> Result<()> {
    let config = assemble_config(&args)?;
    let execution = if args.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let output = run_batch_with(&config, execution)?;

    println!(
        "{:<28} {:>6} {:>8} | {:>8} {:>9} {:>9} {:>9} {:>8}",
        "strategy", "alpha", "beta", "reward", "compute", "latency", "gencost", "samples"
    );
    for cell in &output.cells {
        let m = &cell.metrics;
        println!(
            "{:<28} {:>6} {:>8} | {:>8.4} {:>9.3} {:>9.3} {:>9.4} {:>8.2}",
            cell.strategy,
            cell.alpha,
            cell.beta,
            m.mean_reward,
            m.mean_norm_compute,
            m.mean_norm_latency,
            m.mean_gen_cost,
            m.mean_samples
        );
    }

    if let Some(out) = &args.out {
        write_results(out, &config, &output.cells)?;
        let csv = with_extension(out, "csv");
        write_csv(&csv, &output.cells)?;
        println!("wrote {} and {}", out.display(), csv.display());
        if sweep {
            let points = pareto_points(&output.cells);
            let pareto = with_extension(out, "pareto.csv");
            write_pareto_csv(&pareto, &points)?;
            println!("wrote {}", pareto.display());
        }
    } else if sweep {
        for point in pareto_points(&output.cells) {
            println!(
                "frontier {} alpha {} beta {}: cost {:.4} reward {:.4}{}",
                point.strategy,
                point.alpha,
                point.beta,
                point.gen_cost,
                point.reward,
                if point.dominated { " (dominated)" } else { "" }
            );
        }
    }
    if let Some(logs) = &args.logs {
        write_episode_logs(logs, &output.episode_logs)?;
        println!(
            "wrote {} episode logs to {}",
            output.episode_logs.len(),
            logs.display()
        );
    }
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    let config = ExperimentConfig {
        world: args.world.clone(),
        predictor: args.predictor.parse()?,
        seed: args.seed,
        ..ExperimentConfig::default()
    };
    let worlds = config.resolve_worlds()?;
    let grid = config.grid.build(ExperimentConfig::max_horizon(&worlds))?;
    let predictors = build_predictors(&config.predictor, &worlds, &grid, args.seed)?;
    let report = calibration_report(
        &predictors,
        &worlds,
        args.mc_samples,
        args.eval_rollouts,
        args.threshold,
        args.seed,
    )?;
    println!(
        "{:<16} {:>9} {:>7} {:>9} {:>16}",
        "world", "tv_start", "f1", "accuracy", "incorrect_recall"
    );
    for row in &report.rows {
        println!(
            "{:<16} {:>9.4} {:>7.4} {:>9.4} {:>16.4}",
            row.world, row.tv_start, row.f1, row.accuracy, row.incorrect_recall
        );
    }
    println!("mean start-of-generation TV: {:.4}", report.mean_tv_start);
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<()> {
    let episodes = read_episode_logs(&args.logs)?;
    let report = audit_episode_logs(&episodes)?;
    println!(
        "audited {} episodes: {} cost mismatches, {} incomplete",
        report.episodes, report.cost_mismatches, report.incomplete
    );
    if !report.clean() {
        bail!("episode log audit failed");
    }
    Ok(())
}

fn dump_targets(args: DumpTargetsArgs) -> Result<()> {
    use std::io::Write;

    let config = ExperimentConfig {
        world: args.world.clone(),
        seed: args.seed,
        ..ExperimentConfig::default()
    };
    let worlds = config.resolve_worlds()?;
    let grid = config.grid.build(ExperimentConfig::max_horizon(&worlds))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    serde_json::to_writer(
        &mut out,
        &serde_json::json!({
            "value_boundaries": grid.value_boundaries(),
            "length_boundaries": grid.length_boundaries(),
        }),
    )?;
    out.write_all(b"\n")?;
    let mut rollout_out = args
        .rollouts
        .as_ref()
        .map(std::fs::File::create)
        .transpose()?
        .map(std::io::BufWriter::new);
    let mut written = 0usize;
    for episode in 0..args.episodes {
        let world = &worlds[episode % worlds.len()];
        let record = rollout(
            world.as_ref(),
            &[],
            world.horizon(),
            derive_seed(args.seed, &[episode as u64]),
        )?;
        if let Some(sink) = rollout_out.as_mut() {
            serde_json::to_writer(
                &mut *sink,
                &serde_json::json!({
                    "episode": episode,
                    "world": world.name(),
                    "tokens": record.tokens,
                    "value": record.value,
                }),
            )?;
            sink.write_all(b"\n")?;
        }
        let targets = prefix_targets(&record, &grid)?;
        for (t, target) in targets.iter().enumerate() {
            serde_json::to_writer(
                &mut out,
                &serde_json::json!({
                    "episode": episode,
                    "world": world.name(),
                    "prefix_len": t,
                    "value_bin": target.value_bin,
                    "length_bin": target.length_bin,
                    "value": record.value,
                    "remaining": record.total_len() - t as u64,
                }),
            )?;
            out.write_all(b"\n")?;
            written += 1;
        }
    }
    out.flush()?;
    if let Some(mut sink) = rollout_out {
        sink.flush()?;
        println!(
            "wrote rollout records to {}",
            args.rollouts.unwrap().display()
        );
    }
    println!(
        "wrote {written} prefix targets from {} rollouts to {}",
        args.episodes,
        args.out.display()
    );
    Ok(())
}
