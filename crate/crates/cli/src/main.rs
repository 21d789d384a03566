use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use staer_cli::ablate::{ablate, AblationGrid};
use staer_cli::config::{self, ExperimentConfig};
use staer_cli::{checks, fetch, report, run, CliError};
use staer_core::backbone::{BackboneConfig, BackboneKind};
use staer_core::data::{data_root, DatasetKind};
use staer_core::trainer::Method;

#[derive(Parser)]
#[command(name = "staer", version = env!("STAER_VERSION"), about = "Spiking continual-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration over its seeds.
    Run(RunArgs),
    /// Sweep the alignment loss weights over a grid.
    Ablate(AblateArgs),
    /// Compare finished runs in a table.
    Report(ReportArgs),
    /// Download MNIST and/or CIFAR-10.
    FetchData(FetchArgs),
    /// Check the numerical kernels against reference implementations.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Overrides {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any key, e.g. `--set staer.beta=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Overrides,
    /// sgd, joint, er, der, derpp or staer.
    #[arg(long)]
    method: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// mnist, cifar10 or synthetic.
    #[arg(long)]
    dataset: Option<String>,
    /// Backbone preset: mlp, mini_resnet or resnet19.
    #[arg(long)]
    backbone: Option<String>,
    /// Time steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Replay buffer capacity.
    #[arg(long)]
    buffer: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Grid file: `{"base": {...}, "beta": [...], "alpha1": [...], "alpha2": [...], "seeds": [...]}`.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories (or result.json files).
    #[arg(required = true)]
    results: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct FetchArgs {
    /// Destination; `STAER_DATA` or ./data by default.
    #[arg(long)]
    root: Option<PathBuf>,
    /// mnist, cifar10 or all.
    #[arg(long, default_value = "all")]
    dataset: String,
}

fn parse_overrides(set: &[String]) -> Result<Vec<(String, Value)>, CliError> {
    set.iter().map(|s| config::parse_override(s)).collect()
}

fn enum_value<T: serde::de::DeserializeOwned>(what: &str, s: &str, valid: &str) -> Result<T, CliError> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| CliError::Config(format!("unknown {what} `{s}`; valid: {valid}")))
}

fn run_config(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut o = parse_overrides(&args.common.set)?;
    if let Some(m) = &args.method {
        let m: Method = m.parse()?;
        o.push(("method".into(), Value::from(m.name())));
    }
    if let Some(s) = &args.seeds {
        o.push(("seeds".into(), serde_json::to_value(s).expect("serializes")));
    }
    if let Some(d) = &args.dataset {
        let d: DatasetKind = enum_value("dataset", d, "mnist, cifar10, synthetic")?;
        o.push(("dataset.kind".into(), serde_json::to_value(d).expect("serializes")));
    }
    if let Some(b) = &args.backbone {
        let kind: BackboneKind = enum_value("backbone", b, "mlp, mini_resnet, resnet19")?;
        let preset = BackboneConfig::preset(kind);
        o.push(("backbone".into(), serde_json::to_value(preset).expect("serializes")));
    }
    if let Some(t) = args.steps {
        o.push(("steps".into(), t.into()));
    }
    if let Some(b) = args.buffer {
        o.push(("buffer_size".into(), b.into()));
    }
    if let Some(e) = args.epochs {
        o.push(("epochs".into(), e.into()));
    }
    if let Some(d) = &args.output_dir {
        o.push(("output_dir".into(), Value::from(d.to_string_lossy().into_owned())));
    }
    config::load(args.common.config.as_deref(), &o)
}

fn dispatch(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = run_config(&args)?;
            let (result, dir) = run::run(&cfg, args.common.quiet)?;
            let s = &result.summary;
            println!("{}", dir.display());
            println!(
                "{} on {:?}: CIL FAA {:.2} ± {:.2}, TIL FAA {:.2} ± {:.2}",
                cfg.method.name(),
                cfg.dataset.kind,
                s.cil.faa.mean,
                s.cil.faa.std,
                s.til.faa.mean,
                s.til.faa.std
            );
            if let Some(f) = s.cil.frg {
                println!("CIL FRG {:.2} ± {:.2}", f.mean, f.std);
            }
            Ok(true)
        }
        Command::Ablate(args) => {
            let grid: AblationGrid = config::load(args.grid.as_deref(), &parse_overrides(&args.set)?)?;
            let (rows, dir) = ablate(&grid, args.quiet)?;
            println!("{} ({} rows)", dir.join("ablation.csv").display(), rows.len());
            Ok(true)
        }
        Command::Report(args) => {
            let groups = report::load(&args.results)?;
            print!("{}", report::render_text(&groups));
            if let Some(path) = args.csv {
                std::fs::write(&path, report::render_csv(&groups))
                    .map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
            }
            Ok(true)
        }
        Command::FetchData(args) => {
            fetch::fetch(&args.root.unwrap_or_else(data_root), &args.dataset)?;
            Ok(true)
        }
        Command::Selftest { seed } => {
            let outcomes = checks::all(seed);
            for o in &outcomes {
                println!("{}", o.line());
            }
            Ok(outcomes.iter().all(|o| o.passed))
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
