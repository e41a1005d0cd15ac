use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use repufed_core::config::{ScenarioConfig, SweepSpec, Variant};
use repufed_core::experiment::{cmd_ablate, cmd_drl, cmd_run, cmd_sweep, TrainAlgo};
use repufed_core::Error;

#[derive(Parser)]
#[command(name = "repufed", version, about = "Reputation-driven asynchronous federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the scenario's out_dir, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the federation for the configured number of slots.
    Run(Common),
    /// Compare ablation variants under a shared seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of base,no-drl,no-dp,no-afl,low-r.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Sweep one numeric parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted parameter path, e.g. dp.epsilon.
        #[arg(long)]
        param: Option<String>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Train the vehicle selector standalone and write its learning curve.
    Drl {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "ppo")]
        algo: Algo,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Ppo,
    Dqn,
}

fn load(common: &Common) -> Result<(ScenarioConfig, PathBuf), Error> {
    let mut cfg = ScenarioConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(common) => {
            let (cfg, out) = load(&common)?;
            let s = cmd_run(&cfg, &out)?;
            println!("ade={:.6} fde={:.6} rmse={:.6} cost={:.6}", s.ade, s.fde, s.rmse, s.total_cost);
        }
        Command::Ablate { common, variants } => {
            let (cfg, out) = load(&common)?;
            let variants: Vec<Variant> = match variants {
                Some(names) => names.iter().map(|n| n.parse()).collect::<Result<_, _>>()?,
                None => cfg
                    .ablate
                    .as_ref()
                    .map(|a| a.variants.clone())
                    .unwrap_or_else(|| Variant::ALL.to_vec()),
            };
            for row in cmd_ablate(&cfg, &variants, &out)? {
                println!("{}: ade={:.6}", row.variant, row.ade);
            }
        }
        Command::Sweep {
            common,
            param,
            values,
            repeats,
        } => {
            let (cfg, out) = load(&common)?;
            let mut spec = cfg.sweep.clone().unwrap_or(SweepSpec {
                param: String::new(),
                values: Vec::new(),
                repeats: 1,
            });
            if let Some(p) = param {
                spec.param = p;
            }
            if let Some(v) = values {
                spec.values = v;
            }
            if let Some(r) = repeats {
                spec.repeats = r;
            }
            if spec.param.is_empty() {
                return Err(Error::Config("no sweep parameter given".into()));
            }
            let (rows, meta) = cmd_sweep(&cfg, &spec, &out)?;
            println!("{} rows, ADE trend over {}: {:?}", rows.len(), meta.param, meta.trend);
        }
        Command::Drl { common, algo } => {
            let (cfg, out) = load(&common)?;
            let algo = match algo {
                Algo::Ppo => TrainAlgo::Ppo,
                Algo::Dqn => TrainAlgo::Dqn,
            };
            let result = cmd_drl(&cfg, algo, &out)?;
            let last = result.curve.last().map_or(f64::NAN, |l| l.reward);
            println!("{} episodes, final reward {last:.3}", result.curve.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REPUFED_LOG", "warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
