use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pac_core::baselines::{save_oracle_csv, solve_principal_eigenpair, DiscretizedLmdp};
use pac_core::domains::domain_registry;
use pac_core::harness::config::ExperimentConfig;
use pac_core::harness::experiment::evaluate_snapshot;
use pac_core::harness::run_experiment;
use pac_core::harness::seed;
use pac_core::ingest::{
    generate_replay, kfold_split, load_trajectories, reconstruct_passive, resample_balanced,
    save_passive_samples, save_trajectories, Reconstruction, ScriptedMerge, TrajectorySchema,
};

/// Passive actor-critic experiments for linearly-solvable MDPs.
#[derive(Parser)]
#[command(name = "pac", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate, writing curve.csv, report.json and params.txt.
    Train(RunArgs),
    /// Evaluate a saved parameter snapshot.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Snapshot written by `train`.
        #[arg(long)]
        params: PathBuf,
    },
    /// Reconstruct passive samples from a trajectory CSV.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        out: PathBuf,
        /// Subtract `B u` without the time step.
        #[arg(long)]
        as_printed: bool,
        #[arg(long, default_value_t = 0)]
        folds: usize,
        #[arg(long)]
        resample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Solve a grid discretization for its principal eigenpair.
    Oracle {
        #[arg(long, default_value = "double_well")]
        domain: String,
        /// Grid points per dimension.
        #[arg(long, value_delimiter = ',', default_value = "51")]
        counts: Vec<usize>,
        /// `low:high` per dimension; defaults to the domain's sample region.
        #[arg(long, value_delimiter = ',')]
        range: Vec<String>,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a merge trajectory CSV from scripted controlled rollouts.
    ReplayGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        trajectories: usize,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    approx: Option<String>,
    #[arg(long)]
    iterations: Option<u64>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.domain) {
            (Some(p), _) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            (None, Some(d)) => ExperimentConfig::for_domain(d),
            (None, None) => bail!("either --config or --domain is required"),
        };
        if let Some(d) = &self.domain {
            cfg.domain = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(m) = &self.method {
            cfg.method = m.clone();
        }
        if let Some(a) = &self.approx {
            cfg.approximator = a.clone();
        }
        if let Some(n) = self.iterations {
            cfg.iterations = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_range(items: &[String]) -> Result<Vec<(f64, f64)>> {
    items
        .iter()
        .map(|s| {
            let (a, b) = s.split_once(':').context("range entries look like low:high")?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(args) => {
            let report = run_experiment(&args.config()?)?;
            println!(
                "initial cost {:.6}, final cost {:.6}{}",
                report.initial_cost,
                report.final_cost,
                report
                    .success_rate
                    .map(|r| format!(", success rate {:.3}", r))
                    .unwrap_or_default()
            );
        }
        Command::Eval { run, params } => {
            let summary = evaluate_snapshot(&run.config()?, &params)?;
            println!("{summary:#}");
        }
        Command::Ingest {
            input,
            domain,
            out,
            as_printed,
            folds,
            resample,
            seed: seed_value,
        } => {
            let problem = domain_registry().get(&domain)?.problem(Default::default());
            let d = &problem.dynamics;
            let schema = TrajectorySchema::standard(d.state_dim(), d.action_dim(), d.dt());
            let loaded = load_trajectories(&input, &schema)?;
            let mode = if as_printed { Reconstruction::AsPrinted } else { Reconstruction::Corrected };
            let mut samples = Vec::new();
            for log in &loaded.logs {
                samples.extend(reconstruct_passive(log, &problem, mode)?);
            }
            let mut rng = seed::stream_rng(seed_value, seed::DATA, 0);
            if let Some(n) = resample {
                samples = resample_balanced(&samples, n, &mut rng)?;
            }
            std::fs::create_dir_all(&out)?;
            save_passive_samples(&out.join("passive.csv"), &samples)?;
            if folds > 0 {
                let mut frng = seed::stream_rng(seed_value, seed::FOLDS, 0);
                let split = kfold_split(&loaded.logs, folds, &mut frng)?;
                split.write_csv(std::fs::File::create(out.join("folds.csv"))?)?;
            }
            println!(
                "{} trajectories, {} dropped rows, {} passive samples",
                loaded.logs.len(),
                loaded.dropped_rows,
                samples.len()
            );
        }
        Command::Oracle {
            domain,
            counts,
            range,
            tol,
            out,
        } => {
            let dom = domain_registry().get(&domain)?;
            let problem = dom.problem(Default::default());
            let range = if range.is_empty() { dom.sample_region() } else { parse_range(&range)? };
            let disc = DiscretizedLmdp::from_problem(&problem, &range, &counts)?;
            let pair = solve_principal_eigenpair(&disc, tol)?;
            if let Some(p) = out {
                save_oracle_csv(&p, &disc, &pair)?;
            }
            println!(
                "z_avg {:?} (average cost {:?} per step), {} states, {} iterations, residual {:e}",
                pair.z_avg,
                -pair.z_avg.ln(),
                disc.len(),
                pair.iterations,
                pair.residual
            );
        }
        Command::ReplayGen {
            out,
            trajectories,
            steps,
            seed: seed_value,
        } => {
            let problem = domain_registry().get("merge")?.problem(Default::default());
            let mut rng = seed::stream_rng(seed_value, seed::REPLAY, 0);
            let data = generate_replay(&problem, &ScriptedMerge::default(), trajectories, steps, &mut rng)?;
            let d = &problem.dynamics;
            save_trajectories(&out, &data.logs, &TrajectorySchema::standard(d.state_dim(), d.action_dim(), d.dt()))?;
            println!("wrote {} trajectories to {}", data.logs.len(), out.display());
        }
    }
    Ok(())
}
