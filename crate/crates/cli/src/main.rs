use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybridq_cli::{replay, run_fisher, run_search, CliError, DatasetName, ExperimentConfig, Profile, QubitRange};

#[derive(Parser)]
#[command(name = "hybridq", version, about = "Transformer-fed variational circuit search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve circuits per qubit count, retrain the best and write tables.
    Search(Common),
    /// Empirical Fisher spectrum of saved checkpoints.
    Fisher {
        #[command(flatten)]
        common: Common,
        /// Analyse this checkpoint instead of the ones in --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and score one genome, e.g. `3:100`.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        genome: String,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, value_enum)]
    dataset: Option<DatasetName>,
    /// Inclusive range `A..B` or a single count.
    #[arg(long)]
    qubits: Option<QubitRange>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file overriding the profile preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with the bundled data files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).map_err(|source| CliError::Io { path: p.clone(), source })?,
            None => String::new(),
        };
        let mut cfg = ExperimentConfig::from_toml(&text, self.dataset, self.profile)?;
        if let Some(q) = self.qubits {
            cfg.qubits = q;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(d) = &self.data_dir {
            cfg.data.dir = d.clone();
        }
        Ok(cfg.finalize())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Search(common) => {
            let cfg = common.resolve()?;
            let outcome = run_search(&cfg)?;
            for cell in &outcome.cells {
                match &cell.result {
                    Ok(r) => println!(
                        "{} qubits: genome {} gates {} test accuracy {:.4}",
                        cell.qubits, r.best.genome, r.best.gates, r.best.test_accuracy
                    ),
                    Err(e) => println!("{} qubits: failed: {e}", cell.qubits),
                }
            }
            println!("results written to {}", cfg.out.display());
        }
        Command::Fisher { common, checkpoint } => {
            let cfg = common.resolve()?;
            for (n, r) in run_fisher(&cfg, checkpoint.as_deref())? {
                let top = r.eigenvalues.first().copied().unwrap_or(0.0);
                let (t, q) = r.energy_splits.first().copied().unwrap_or((0.0, 0.0));
                println!("{n} qubits: λ0 {top:.4e}, transformer share {t:.4}, circuit share {q:.4}");
            }
        }
        Command::Replay { common, genome } => {
            let cfg = common.resolve()?;
            let report = replay(&cfg, &genome)?;
            print!("{}", report.render());
            if common.out.is_some() {
                fs::create_dir_all(&cfg.out).map_err(|source| CliError::Io {
                    path: cfg.out.clone(),
                    source,
                })?;
                let path = cfg.out.join(format!("replay_{}_{}.txt", cfg.dataset, report.genome.bitstring()));
                fs::write(&path, report.render()).map_err(|source| CliError::Io { path, source })?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
