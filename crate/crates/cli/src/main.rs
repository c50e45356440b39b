use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use achdist::env::Recording;
use achdist::harness::demo::match_demo;
use achdist::harness::eval::evaluate;
use achdist::harness::metrics::MetricsTable;
use achdist::harness::probe::{expert_episodes, policy_episodes, probe_dataset, train_probe, ProbeConfig};
use achdist::harness::{build_agent, load_checkpoint, plot, train, EnvConfig, RunConfig};

#[derive(Parser)]
#[command(name = "achdist", version, about = "PPO with achievement distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override such as `ppo.learning_rate=1e-4`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut ov = self.overrides.clone();
        if let Some(s) = self.seed {
            ov.push(format!("seed={s}"));
        }
        Ok(match &self.config {
            Some(p) => RunConfig::load(p, &ov)?,
            None => RunConfig::from_toml("", &ov)?,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent, writing metrics and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; overrides the config's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's sampled policy.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
    /// Linear probe of next-achievement prediction from frozen latents.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episodes to collect for the probe dataset.
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        /// Use the shortest-path planner (keychain only) instead of the policy.
        #[arg(long)]
        expert: bool,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 50_000)]
        train_size: usize,
        #[arg(long, default_value_t = 10_000)]
        test_size: usize,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
    },
    /// Match the achievements of two recorded episodes.
    OtDemo {
        #[command(flatten)]
        cfg: ConfigArgs,
        a: PathBuf,
        b: PathBuf,
        /// Encoder weights; a freshly initialized network when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the long-format CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Tables and SVG charts from a metrics file.
    Plot {
        metrics: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { cfg, out } => {
            let mut c = cfg.load()?;
            if let Some(o) = out {
                c.output_dir = o;
            }
            let s = train(&c)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Eval {
            cfg,
            checkpoint,
            episodes,
        } => {
            let c = cfg.load()?;
            let (net, _) = build_agent(&c)?;
            let params = load_checkpoint(&checkpoint)?;
            let r = evaluate(&c, &net, &params, episodes, c.seed)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Probe {
            cfg,
            checkpoint,
            episodes,
            expert,
            epsilon,
            train_size,
            test_size,
            epochs,
        } => {
            let c = cfg.load()?;
            let (net, _) = build_agent(&c)?;
            let params = load_checkpoint(&checkpoint)?;
            let trajs = if expert {
                let EnvConfig::Keychain(k) = &c.env else {
                    bail!("--expert needs a keychain environment");
                };
                expert_episodes(k, episodes, c.seed, epsilon)?
            } else {
                let envs = (0..c.ppo.num_envs)
                    .map(|_| c.env.build())
                    .collect::<achdist::Result<Vec<_>>>()?;
                policy_episodes(envs, &net, &params, c.aux_terms().memory, episodes, c.seed)?
            };
            let classes = c.env.build()?.graph().len();
            let data = probe_dataset(&net, &params, &trajs)?;
            let pc = ProbeConfig {
                train: train_size,
                test: test_size,
                epochs,
                seed: c.seed,
                ..Default::default()
            };
            let r = train_probe(&data, classes, &pc)?;
            println!(
                "probe: train {} test {} accuracy {:.4} median confidence {:.4}",
                r.train_size, r.test_size, r.accuracy, r.median_confidence
            );
        }
        Command::OtDemo {
            cfg,
            a,
            b,
            checkpoint,
            csv,
        } => {
            let c = cfg.load()?;
            let (net, mut params) = build_agent(&c)?;
            if let Some(p) = checkpoint {
                params = load_checkpoint(&p)?;
            }
            let load = |p: &Path| -> Result<_> {
                Recording::load(p)?
                    .to_trajectory()
                    .with_context(|| format!("{}: recording has no observations", p.display()))
            };
            let (ta, tb) = (load(&a)?, load(&b)?);
            let names = Recording::load(&a)?.graph.names;
            let demo = match_demo(&net, &params, &ta, &tb, &c.distill.ot())?;
            print!("{}", demo.tables(&names));
            if let Some(p) = csv {
                std::fs::write(&p, demo.csv()).with_context(|| p.display().to_string())?;
            }
        }
        Command::Plot { metrics, out } => {
            let m = MetricsTable::read(&metrics)?;
            std::fs::create_dir_all(&out)?;
            let rates = plot::final_rates_csv(&m)?;
            print!("{rates}");
            std::fs::write(out.join("success_rates.csv"), &rates)?;
            std::fs::write(out.join("curves.csv"), plot::curves_csv(&m)?)?;
            let col = |n: &str| m.column(n).unwrap_or_default();
            let steps = col("env_steps");
            std::fs::write(out.join("score.svg"), plot::line_svg("score", &steps, &col("score")))?;
            std::fs::write(
                out.join("reward.svg"),
                plot::line_svg("reward (trailing window)", &steps, &col("window_reward")),
            )?;
            let names = m.achievements();
            let finals: Vec<f64> = names
                .iter()
                .map(|n| col(&format!("success_{n}")).last().copied().unwrap_or(0.0))
                .collect();
            std::fs::write(
                out.join("success.svg"),
                plot::bars_svg("success rate (%)", &names, &finals),
            )?;
        }
    }
    Ok(())
}
