use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ippo_core::harness::{ab_test_run, oracle_report, run_iterate, verify, Experiment};
use ippo_core::iterate::{collect_batch, derive_seed};
use ippo_core::policy::PolicyParams;
use ippo_core::ppo::{build_prompt, ppo_improve};
use ippo_core::q_eval::{
    build_eval_dataset, fit_q, FitOptions, QFeaturizer, QFunction, WeightingOptions,
};
use ippo_core::trajectory_log::{read_trajectories, write_trajectories};

#[derive(Parser)]
#[command(
    name = "ippo",
    version,
    about = "Iterative PPO on synthetic suggested-response environments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, env = "IPPO_CONFIG", default_value = "configs/toy_shop.toml")]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long, env = "IPPO_SEED")]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<Experiment> {
        let mut exp = Experiment::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(s) = self.seed {
            exp.set_seed(s);
        }
        Ok(exp)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Collect a batch of episodes under a frozen policy.
    Collect {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint; the seeded initial policy when absent.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, env = "IPPO_EPISODES")]
        episodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit Q̂ for a policy from a trajectory log.
    FitQ {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One PPO improvement step against a saved Q̂, prompting on the states
    /// of a trajectory log.
    Ppo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        q: PathBuf,
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run (or resume) the full iterative loop.
    Iterate {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "IPPO_RUN_ID")]
        run_id: Option<String>,
        #[arg(long, env = "IPPO_ITERATIONS")]
        iterations: Option<usize>,
        #[arg(long, env = "IPPO_EPISODES")]
        episodes: Option<usize>,
        /// Continue the given run from its last complete iteration.
        #[arg(long, value_name = "RUN_ID")]
        resume: Option<String>,
    },
    /// Exact optimum of the environment and, optionally, a policy's value.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Simulated A/B test between two iterations of a run.
    AbTest {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "IPPO_RUN_ID")]
        run_id: String,
        /// Episodes per arm.
        #[arg(long, env = "IPPO_EPISODES")]
        episodes: Option<usize>,
    },
    /// Exact consistency checks on the configured environment.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

fn load_policy(exp: &Experiment, path: Option<&Path>) -> Result<PolicyParams> {
    match path {
        Some(p) => {
            let policy =
                PolicyParams::load(p).with_context(|| format!("loading {}", p.display()))?;
            policy.check_compatible(&exp.env.catalog())?;
            Ok(policy)
        }
        None => Ok(exp.initial_policy()),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Collect {
            common,
            policy,
            episodes,
            out,
        } => {
            let exp = common.load()?;
            let policy = load_policy(&exp, policy.as_deref())?;
            let n = episodes.unwrap_or(exp.config.iterate.episodes_per_iteration);
            let batch = collect_batch(&exp.env, &policy, n, derive_seed(exp.config.seed, 1, 0), 0)?;
            write_trajectories(&out, &batch)?;
            let hits = batch.iter().filter(|t| t.achieved_outcome()).count();
            println!(
                "{n} episodes, outcome rate {:.4}, written to {}",
                hits as f64 / n as f64,
                out.display()
            );
        }
        Command::FitQ {
            common,
            trajectories,
            policy,
            out,
        } => {
            let exp = common.load()?;
            let policy = load_policy(&exp, policy.as_deref())?;
            let batch = read_trajectories(&trajectories)?;
            let it = &exp.config.iterate;
            let ds = build_eval_dataset(
                &batch,
                &policy,
                exp.env.mdp.discount,
                WeightingOptions {
                    w_max: it.w_max,
                    correct_returns: it.correct_returns,
                },
            )?;
            let q = fit_q(
                &ds,
                &QFeaturizer::new(it.featurizer, exp.env.catalog()),
                FitOptions {
                    ridge: it.ridge,
                    holdout_fraction: it.holdout_fraction,
                    seed: derive_seed(exp.config.seed, 3, 0),
                },
            )?;
            q.save(&out)?;
            print_json(&q.fit_report)?;
        }
        Command::Ppo {
            common,
            policy,
            q,
            trajectories,
            out,
        } => {
            let exp = common.load()?;
            let policy = load_policy(&exp, policy.as_deref())?;
            let q = QFunction::load(&q)?;
            let cat = exp.env.catalog();
            let prompts = read_trajectories(&trajectories)?
                .iter()
                .flat_map(|t| &t.transitions)
                .map(|t| build_prompt(&t.state, &cat))
                .collect::<Result<Vec<_>, _>>()?;
            let (next, stats) = ppo_improve(&policy, &prompts, &q, &exp.config.ppo)?;
            next.save(&out)?;
            println!(
                "surrogate {:.6} -> {:.6}, mean KL {:.5}, local improvement rate {:.4}",
                stats.surrogate_before,
                stats.surrogate_after,
                stats.mean_kl,
                stats.local_improvement_rate
            );
        }
        Command::Iterate {
            common,
            run_id,
            iterations,
            episodes,
            resume,
        } => {
            let mut exp = common.load()?;
            if let Some(n) = iterations {
                exp.config.iterate.iterations = n;
            }
            if let Some(n) = episodes {
                exp.config.iterate.episodes_per_iteration = n;
            }
            let (id, resuming) = match (resume, run_id) {
                (Some(r), Some(id)) if r != id => {
                    bail!("--resume {r} conflicts with --run-id {id}")
                }
                (Some(r), _) => (r, true),
                (None, Some(id)) => (id, false),
                (None, None) => bail!("iterate needs --run-id or --resume"),
            };
            let out = run_iterate(&exp, &id, resuming, |r| {
                let oracle = r
                    .oracle_value
                    .map(|v| format!(" oracle V {v:.5}"))
                    .unwrap_or_default();
                let qd = r
                    .q_delta
                    .map(|d| format!(" q_delta {d:.4}"))
                    .unwrap_or_default();
                eprintln!(
                    "iter {} outcome rate {:.4}{oracle}{qd}",
                    r.iteration, r.outcome_rate
                );
            })?;
            println!(
                "{} iterations in {} (converged: {})",
                out.result.records.len(),
                out.run_dir.display(),
                out.result.converged
            );
        }
        Command::Oracle { common, policy } => {
            let exp = common.load()?;
            let policy = match policy {
                Some(p) => Some(load_policy(&exp, Some(&p))?),
                None => None,
            };
            print_json(&oracle_report(&exp, policy.as_ref())?)?;
        }
        Command::AbTest {
            common,
            run_id,
            episodes,
        } => {
            let exp = common.load()?;
            let r = ab_test_run(&exp, &run_id, episodes)?;
            print_json(&r)?;
            println!(
                "difference {:+.4} [{:+.4}, {:+.4}] {}",
                r.difference,
                r.ci_low,
                r.ci_high,
                if r.excludes_zero() {
                    "significant"
                } else {
                    "not significant"
                }
            );
        }
        Command::Verify { common } => {
            let exp = common.load()?;
            let report = verify(&exp)?;
            for c in &report.checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
