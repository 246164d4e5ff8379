use std::fs::File;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bcfl_core::config::ExperimentConfig;
use bcfl_core::experiment::{oracle_compare, run_experiment, sweep, sweep_entry_name, write_outputs, SUMMARY_FILE};
use bcfl_core::metrics::{accumulate_coassociation, CoAssociationMatrix};
use bcfl_core::report::read_ndjson;
use bcfl_core::{BcflError, Mode};
use clap::{Args, Parser, Subcommand};

/// Bayesian clustered federated learning experiments.
#[derive(Parser, Debug)]
#[command(name = "bcfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// conceptual, greedy, consensus or multi-hypothesis.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long = "m-max")]
    m_max: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train once and write rounds.ndjson, summary.json and coassoc.csv.
    Run {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train every mode / m_max pair of the config's sweep grid.
    Sweep {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare full enumeration with multi-hypothesis tracking on a tiny
    /// instance (two clusters, two clients, two rounds unless configured).
    Oracle {
        #[command(flatten)]
        opts: Overrides,
    },
    /// Accumulate a co-association matrix from a rounds.ndjson log.
    ExportCoassoc {
        /// rounds.ndjson to read.
        #[arg(long)]
        input: PathBuf,
        /// CSV destination; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(opts: &Overrides, fallback: ExperimentConfig) -> Result<ExperimentConfig, BcflError> {
    let mut cfg = match &opts.config {
        Some(path) => {
            if !path.is_file() {
                return Err(BcflError::Config(format!("config file not found: {}", path.display())));
            }
            ExperimentConfig::load(path)?
        }
        None => fallback,
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &opts.mode {
        cfg.mode = mode.parse()?;
    }
    if let Some(m) = opts.m_max {
        cfg.m_max = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_config(opts: &Overrides) -> Result<(), BcflError> {
    if opts.config.is_none() {
        return Err(BcflError::Config("--config <path> is required".into()));
    }
    Ok(())
}

fn tiny_oracle_config() -> ExperimentConfig {
    ExperimentConfig {
        mode: Mode::Conceptual,
        clusters: Some(2),
        rounds: 2,
        groups: 2,
        clients_per_group: 1,
        samples_per_round: 10,
        test_samples: 10,
        ..ExperimentConfig::default()
    }
}

fn print_metrics(label: &str, out: &bcfl_core::experiment::ExperimentOutput) {
    let metrics: Vec<String> = out.summary.metrics.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
    println!("{label}: {} rounds, {}", out.summary.rounds, metrics.join(" "));
}

fn execute(command: Command) -> Result<(), BcflError> {
    match command {
        Command::Run { opts, out } => {
            require_config(&opts)?;
            let cfg = load(&opts, ExperimentConfig::default())?;
            let result = run_experiment(&cfg)?;
            write_outputs(&out, &result)?;
            print_metrics(&format!("{} {}", result.summary.header, cfg.mode), &result);
            println!("wrote {}", out.join(SUMMARY_FILE).display());
        }
        Command::Sweep { opts, out } => {
            require_config(&opts)?;
            let cfg = load(&opts, ExperimentConfig::default())?;
            for result in sweep(&cfg)? {
                let name = sweep_entry_name(&result.summary);
                write_outputs(&out.join(&name), &result)?;
                print_metrics(&name, &result);
            }
        }
        Command::Oracle { opts } => {
            let cfg = load(&opts, tiny_oracle_config())?;
            let cmp = oracle_compare(&cfg)?;
            println!("hypotheses: {}", cmp.hypotheses);
            println!("max weight deviation: {:e}", cmp.max_weight_deviation);
            println!("max mean deviation: {:e}", cmp.max_mean_deviation);
        }
        Command::ExportCoassoc { input, out } => export_coassoc(&input, out.as_deref())?,
    }
    Ok(())
}

fn export_coassoc(input: &Path, out: Option<&Path>) -> Result<(), BcflError> {
    let file = File::open(input).map_err(|e| BcflError::Config(format!("cannot open {}: {e}", input.display())))?;
    let reports = read_ndjson(BufReader::new(file))?;
    let clients = reports
        .first()
        .and_then(|r| r.hypotheses.first())
        .map(|h| h.labels.len())
        .ok_or_else(|| BcflError::Config(format!("{} holds no rounds", input.display())))?;
    let mut matrix = CoAssociationMatrix::new(clients);
    for r in &reports {
        matrix = accumulate_coassociation(matrix, r)?;
    }
    match out {
        Some(path) => matrix.write_csv(File::create(path)?),
        None => matrix.write_csv(io::stdout().lock()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
