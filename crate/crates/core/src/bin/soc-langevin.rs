use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use soc_langevin::config::{parse_optimizer_token, render, RawConfig};
use soc_langevin::env::EnvKind;
use soc_langevin::harness::{self, HarnessError, Variant};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

#[derive(Parser)]
#[command(name = "soc-langevin", version, about = "Train neural controls for stochastic control problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its curve.
    Run(RunArgs),
    /// Train several optimizers from the same initial weights.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated tokens such as `adam,adam-langevin,adam-ll30`.
        #[arg(long)]
        optimizers: String,
    },
    /// Compare the pathwise gradient with central finite differences.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
    },
    /// List available environments.
    ListEnvs,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long = "N")]
    n: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    p_percent: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    seed_init: Option<String>,
    #[arg(long)]
    seed_data: Option<String>,
    #[arg(long)]
    seed_noise: Option<String>,
    #[arg(long)]
    eval_mult: Option<String>,
    #[arg(long)]
    schedule: Option<String>,
    /// Extra `key=value` settings, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

fn usage<E: ToString>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

impl RunArgs {
    fn raw(&self) -> Result<RawConfig, Failure> {
        let mut raw = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                RawConfig::parse(&text).map_err(usage)?
            }
            None => RawConfig::default(),
        };
        let mut flags = RawConfig::default();
        let pairs = [
            ("env", &self.env),
            ("N", &self.n),
            ("optimizer", &self.optimizer),
            ("variant", &self.variant),
            ("p_percent", &self.p_percent),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("seed_init", &self.seed_init),
            ("seed_data", &self.seed_data),
            ("seed_noise", &self.seed_noise),
            ("eval_mult", &self.eval_mult),
            ("schedule", &self.schedule),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                flags.set(k, v);
            }
        }
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
            flags.set(k.trim(), v.trim());
        }
        raw.merge(&flags);
        Ok(raw)
    }
}

fn run(args: &RunArgs) -> Result<(), Failure> {
    let config = args.raw()?.resolve().map_err(usage)?;
    let label = config.label();
    let records = harness::train(&config)?;
    let (curves, _) = harness::write_run(&args.out_dir, &label, &render(&config), &records)?;
    if let Some(last) = records.last() {
        println!("{label}: epoch {} J = {} +/- {}", last.epoch, last.mean, last.half_width);
    }
    println!("wrote {}", curves.display());
    Ok(())
}

fn compare(args: &RunArgs, optimizers: &str) -> Result<(), Failure> {
    let base = args.raw()?;
    let mut configs = Vec::new();
    for token in optimizers.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (kind, variant) = parse_optimizer_token(token).map_err(usage)?;
        let mut raw = base.clone();
        raw.set("optimizer", kind.name());
        raw.set("variant", variant.name());
        if let Variant::LayerLangevin(p) = variant {
            raw.set("p_percent", &p.to_string());
        }
        configs.push(raw.resolve().map_err(usage)?);
    }
    let runs = harness::compare(&configs)?;
    for (config, records) in configs.iter().zip(&runs) {
        let label = config.label();
        let (curves, _) = harness::write_run(&args.out_dir, &label, &render(config), records)?;
        if let Some(last) = records.last() {
            println!("{label}: epoch {} J = {} +/- {}", last.epoch, last.mean, last.half_width);
        }
        println!("wrote {}", curves.display());
    }
    Ok(())
}

fn gradcheck(args: &RunArgs, step: f64) -> Result<(), Failure> {
    let config = args.raw()?.resolve().map_err(usage)?;
    let env = config.environment()?;
    let err = harness::gradcheck(env.as_ref(), &config, step)?;
    println!("{} N={}: max relative error {err:e}", env.name(), config.steps);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Compare { run, optimizers } => compare(run, optimizers),
        Command::Gradcheck { run, step } => gradcheck(run, *step),
        Command::ListEnvs => {
            for kind in EnvKind::ALL {
                println!("{kind:<8} {}", kind.description());
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}
