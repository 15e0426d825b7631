use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ris_uav::agent;
use ris_uav::config::ExperimentFile;
use ris_uav::harness::{self, ExperimentConfig, PolicyKind};
use ris_uav::replay::EpisodeRecord;

#[derive(Parser)]
#[command(name = "ris-uav", version, about = "RIS-assisted UAV data collection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Comma-separated replicate seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a learned policy once per seed and save checkpoints and curves.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "drl_bcd", value_parser = parse_policy)]
        policy: PolicyKind,
    },
    /// Evaluate one policy per seed and write results and episode replays.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "drl_bcd", value_parser = parse_policy)]
        policy: PolicyKind,
        /// Checkpoint for learned policies.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Episodes per seed to save as replay files.
        #[arg(long, default_value_t = 1)]
        replays: usize,
    },
    /// Run the configured sweep over all policies and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Restrict to these policies (comma-separated).
        #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
        policy: Option<Vec<PolicyKind>>,
    },
    /// Re-run an episode replay file and check every recorded outcome.
    Replay { file: PathBuf },
    /// Print the resolved configuration in linear units.
    Config {
        #[arg(long, short)]
        config: Option<PathBuf>,
    },
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    PolicyKind::from_name(s).ok_or_else(|| {
        let names: Vec<_> = PolicyKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown policy `{s}`, expected one of {}", names.join(", "))
    })
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn load(path: Option<&Path>) -> Res<ExperimentFile> {
    Ok(match path {
        Some(p) => ExperimentFile::load(p)?,
        None => ExperimentFile::default(),
    })
}

fn experiment(common: &Common) -> Res<(ExperimentFile, ExperimentConfig)> {
    let mut file = load(common.config.as_deref())?;
    if let Some(seeds) = &common.seeds {
        file.experiment.seeds = seeds.clone();
    }
    let cfg = file.clone().into_experiment()?;
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("resolved_config.toml"), file.resolved_toml())?;
    Ok((file, cfg))
}

fn run(cli: Cli) -> Res<()> {
    match cli.command {
        Command::Train { common, policy } => {
            let (_, cfg) = experiment(&common)?;
            for &seed in &cfg.seeds {
                let t = harness::train_policy(policy, &cfg.episode, &cfg.radio, &cfg.agent, &cfg.training, seed)?;
                let stem = format!("{}_{seed}", policy.name());
                fs::write(common.out.join(format!("checkpoint_{stem}.txt")), agent::write_checkpoint(&t.params))?;
                harness::write_curve_csv(&t.curve, fs::File::create(common.out.join(format!("curve_{stem}.csv")))?)?;
                let tail = &t.curve[t.curve.len().saturating_sub(50)..];
                let mean = tail.iter().map(|c| c.episode_return).sum::<f64>() / tail.len().max(1) as f64;
                println!("{stem}: {} episodes, last-50 mean return {mean:.3}", t.curve.len());
            }
        }
        Command::Eval {
            common,
            policy,
            checkpoint,
            replays,
        } => {
            let (_, cfg) = experiment(&common)?;
            let params = match &checkpoint {
                Some(p) => Some(agent::read_checkpoint(&fs::read_to_string(p)?)?),
                None => None,
            };
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let mut saved = Ok(());
                let mut rec = harness::run_policy(policy, &cfg.episode, &cfg.radio, &cfg.power, cfg.eval_episodes, seed, params.as_ref(), |k, log| {
                    if k < replays && saved.is_ok() {
                        let name = format!("episode_{}_{seed}_{k}.txt", policy.name());
                        saved = fs::write(common.out.join(name), log.record.to_text());
                    }
                })?;
                saved?;
                rec.sweep_var = "none".into();
                rec.value = 0.0;
                println!(
                    "{} seed {seed}: served {:.3} ({:.1}%), energy {:.1} J, {:.4} bits/J",
                    policy.name(),
                    rec.served,
                    100.0 * rec.served_frac,
                    rec.energy_j,
                    rec.eff_bits_per_j
                );
                rows.push(rec);
            }
            harness::write_csv(&rows, fs::File::create(common.out.join("results.csv"))?)?;
        }
        Command::Sweep { common, policy } => {
            let (_, mut cfg) = experiment(&common)?;
            if let Some(p) = policy {
                cfg.policies = p;
            }
            let rows = harness::sweep(&cfg)?;
            harness::emit(&rows, &common.out)?;
            for a in harness::aggregate(&rows) {
                println!(
                    "{}={} {}: served {:.3} eff {:.4} bits/J (n={})",
                    a.sweep_var,
                    a.value,
                    a.policy.name(),
                    a.served,
                    a.eff_bits_per_j,
                    a.samples
                );
            }
        }
        Command::Replay { file } => {
            let rec = EpisodeRecord::parse(&fs::read_to_string(&file)?)?;
            let env = rec.replay()?;
            println!(
                "{}: {} steps replayed, served {}/{}",
                file.display(),
                rec.actions.len(),
                env.state().served_total(),
                env.state().devices.len()
            );
        }
        Command::Config { config } => print!("{}", load(config.as_deref())?.resolved_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
