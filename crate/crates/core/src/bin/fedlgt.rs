use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedlgt::experiment::{self, ExperimentConfig, ExperimentError};
use fedlgt::metrics::MetricsReport;

#[derive(Parser)]
#[command(
    name = "fedlgt",
    version,
    about = "Federated multi-label training simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; beats FEDLGT_OUT and the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for client updates (default: all cores).
    #[arg(long)]
    parallel: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic federated dataset described by the config.
    GenData(Common),
    /// Train one arm and write checkpoint, round logs and final metrics.
    Train(Common),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Run the four ablation arms over the configured seeds.
    Ablate(Common),
}

fn set_threads(n: Option<usize>) -> Result<(), String> {
    if let Some(n) = n {
        if n == 0 {
            return Err("--parallel must be at least 1".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn load(c: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_metrics(m: &MetricsReport) {
    println!("{}", m.table());
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load(&c)?;
            let out = cfg.resolve_out_dir(c.out.as_deref());
            let summary = experiment::gen_data(&cfg, &out)?;
            println!("wrote {}", summary.dir.display());
            print!("{}", summary.render());
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            let out = cfg.resolve_out_dir(c.out.as_deref());
            let summary = experiment::train(&cfg, &out)?;
            for r in &summary.reports {
                let loss = r.losses.iter().sum::<f64>() / r.losses.len() as f64;
                match &r.metrics {
                    Some(m) => println!(
                        "round {:>3}  clients {:>2}  mean loss {loss:.4}  C-AP {:.2}",
                        r.round + 1,
                        r.clients.len(),
                        m.c_ap * 100.0
                    ),
                    None => println!(
                        "round {:>3}  clients {:>2}  mean loss {loss:.4}",
                        r.round + 1,
                        r.clients.len()
                    ),
                }
            }
            println!("wrote {}", summary.out_dir.display());
            print_metrics(&summary.final_metrics);
        }
        Command::Eval {
            checkpoint, data, ..
        } => {
            print_metrics(&experiment::eval(&checkpoint, &data)?);
        }
        Command::Ablate(c) => {
            let cfg = load(&c)?;
            let seeds = match c.seed {
                Some(s) => vec![s],
                None => experiment::ablation_seeds(&cfg),
            };
            let result = experiment::ablate(&cfg, &seeds)?;
            let table = result.render();
            print!("{table}");
            let out = cfg.resolve_out_dir(c.out.as_deref());
            std::fs::create_dir_all(&out).map_err(|source| ExperimentError::Io {
                path: out.display().to_string(),
                source,
            })?;
            let path = out.join("ablation.txt");
            std::fs::write(&path, table).map_err(|source| ExperimentError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = match &cli.command {
        Command::GenData(c) | Command::Train(c) | Command::Ablate(c) => c.parallel,
        Command::Eval { parallel, .. } => *parallel,
    };
    if let Err(e) = set_threads(threads) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ ExperimentError::ConfigMissing { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
