use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use gaitspeed_cli::run::{self, describe_report, evaluate_run, output_root, read_config, resolve_run_dir, run_dir, seeds_for, train_run};
use gaitspeed_cli::{exit_code, goal_set_csv, inspect, sweep};
use gaitspeed_core::config::{HExpLaw, Scheme, SpeedLaw};
use gaitspeed_core::evaluation::Grouping;

#[derive(Parser)]
#[command(name = "gaitspeed", version, about = "Train and evaluate speed-conditioned in-hand reorientation policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more seeds of an experiment config, then evaluate.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Seeds to train; defaults to the config's seed list, else 1.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Dotted-path override, e.g. `reward.lambda_TO=10`. Repeatable.
        #[arg(long = "override", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        /// Output root (default: $GAITSPEED_OUT, config output_dir, or ./out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the evaluation that follows training.
        #[arg(long)]
        no_eval: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate a trained run directory (or its policy.json).
    Eval {
        checkpoint: PathBuf,
        /// Evaluate under this scheme instead of the training scheme.
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Fixed target speed (rad/s).
        #[arg(long, conflicts_with = "omega_d_range")]
        omega_d: Option<f64>,
        /// Uniform target speed range `LOW,HIGH`.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        omega_d_range: Option<Vec<f64>>,
        /// Constant horizon slack (s).
        #[arg(long, conflicts_with = "h_exp_range")]
        h_exp: Option<f64>,
        /// Uniform horizon slack range `LOW,HIGH`.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        h_exp_range: Option<Vec<f64>>,
        /// Discard episodes whose initial goal angle is below this (rad).
        #[arg(long)]
        min_theta_0: Option<f64>,
        /// Discard failed and dropped episodes from the statistics.
        #[arg(long)]
        drop_failures: bool,
        #[arg(long, value_enum)]
        grouping: Option<GroupingArg>,
        /// Report directory (default: <run>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a multi-arm, multi-seed sweep described by a JSON spec.
    Sweep {
        spec: PathBuf,
        /// Parallel jobs (default: half the available cores, at least 1).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Print the discretized goal set as w,x,y,z CSV.
    GoalSet {
        /// Angular step (rad); must divide pi.
        #[arg(long, default_value_t = std::f64::consts::FRAC_PI_2)]
        step: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print checkpoint manifests of a run directory or manifest file.
    Inspect { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Oracle,
    Ecrl,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupingArg {
    ByRoundedTd,
    ByOmegaDBucket,
    None,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            seeds,
            overrides,
            out,
            no_eval,
            quiet,
        } => {
            let cfg = read_config(&config, &overrides)?;
            let root = output_root(&cfg, out.as_deref());
            let every = (cfg.updates / 20).max(1);
            for seed in seeds_for(&cfg, &seeds) {
                let dir = run_dir(&root, &cfg.name, seed);
                let outcome = train_run(&cfg, seed, &dir, !no_eval, |p| {
                    if !quiet && (p.update % every == 0 || p.update == cfg.updates) {
                        eprintln!(
                            "[seed{seed}] update {}/{} steps {} success {:.3} T {:.2} reward {:.4}",
                            p.update, cfg.updates, p.env_steps, p.success_rate, p.mean_t, p.mean_reward
                        );
                    }
                })?;
                println!("{}", outcome.dir.display());
                if let Some(report) = &outcome.report {
                    println!("  {}", describe_report(report));
                }
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            scheme,
            episodes,
            seed,
            omega_d,
            omega_d_range,
            h_exp,
            h_exp_range,
            min_theta_0,
            drop_failures,
            grouping,
            out,
        } => {
            let dir = resolve_run_dir(&checkpoint);
            let cfg = read_config(&dir.join(run::CONFIG_FILE), &[])?;
            let mut spec = cfg.eval.clone();
            if let Some(n) = episodes {
                spec.episodes = n;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(w) = omega_d {
                spec.omega_d_law = SpeedLaw::Fixed { omega_d: w };
            }
            if let Some(r) = omega_d_range {
                spec.omega_d_law = SpeedLaw::Uniform { low: r[0], high: r[1] };
            }
            if let Some(h) = h_exp {
                spec.h_exp_law = HExpLaw::Constant { value: h };
            }
            if let Some(r) = h_exp_range {
                spec.h_exp_law = HExpLaw::Uniform { low: r[0], high: r[1] };
            }
            if let Some(t) = min_theta_0 {
                spec.min_theta_0 = t;
            }
            spec.drop_failures |= drop_failures;
            if let Some(g) = grouping {
                spec.grouping = match g {
                    GroupingArg::ByRoundedTd => Grouping::ByRoundedTd,
                    GroupingArg::ByOmegaDBucket => Grouping::ByOmegaDBucket,
                    GroupingArg::None => Grouping::None,
                };
            }
            let scheme = scheme.map(|s| match s {
                SchemeArg::Oracle => Scheme::Oracle,
                SchemeArg::Ecrl => Scheme::Ecrl,
            });
            let out = out.unwrap_or_else(|| dir.join("eval"));
            let report = evaluate_run(&dir, &spec, scheme, &out)?;
            println!("{}", out.display());
            println!("  {}", describe_report(&report));
            Ok(())
        }
        Command::Sweep { spec, jobs, out, quiet } => {
            let jobs = jobs.unwrap_or_else(sweep::default_jobs);
            let summary = sweep::run_sweep(&spec, out.as_deref(), jobs, !quiet)?;
            let mut worst = None;
            for job in &summary.jobs {
                let status = match &job.error {
                    None => "ok".to_string(),
                    Some(e) => format!("failed: {e}"),
                };
                println!("{} seed{}: {status}", job.arm, job.seed);
                if !job.ok && worst.is_none() {
                    worst = Some(job.exit_code);
                }
            }
            match worst {
                None => Ok(()),
                Some(code) => {
                    eprintln!("some sweep jobs failed; completed runs are kept");
                    std::process::exit(code.into());
                }
            }
        }
        Command::GoalSet { step, out } => {
            let csv = goal_set_csv(step)?;
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Inspect { path } => {
            print!("{}", inspect(&path)?);
            Ok(())
        }
    }
}
