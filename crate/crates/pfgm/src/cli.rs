//! Argument parsing. Flags become the top config layer; `run` dispatches.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use toml::{Table, Value};

use crate::commands;
use crate::config::{parse_scalar, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "pfgm", version, about = "Poisson flow generative models on toy data")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML config, or a previous run's manifest.json.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<String>,
    /// Use the exact empirical field instead of a checkpoint.
    #[arg(long, global = true)]
    pub exact: bool,
    /// `euler` or `rk45`.
    #[arg(long, global = true)]
    pub solver: Option<String>,
    /// Training steps, Euler steps or interpolation points, by subcommand.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Dataset size, sample count or verification count, by subcommand.
    #[arg(long, global = true)]
    pub count: Option<usize>,
    /// Generator name (heart, disk, gaussians, ...) or CSV path.
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    #[arg(long, global = true)]
    pub checkpoint: Option<String>,
    /// Comma-separated verification suites, or `all`.
    #[arg(long, global = true)]
    pub suite: Option<String>,
    /// Any config key, as KEY=VALUE; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Draw a toy dataset to data.csv.
    GenData {
        /// Generator name; same as `--dataset`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Train the field network and write checkpoint.json.
    Train,
    /// Integrate prior draws back to data space.
    Sample,
    /// Log-density and bits/dim of data points.
    Likelihood,
    /// Run the statistical verification suites against the exact field.
    Verify,
    /// Latent interpolation between two points.
    Interpolate,
    /// Evaluate the field at query points.
    FieldEval,
}

fn put(t: &mut Table, key: &str, v: Value) {
    t.insert(key.into(), v);
}

/// Flags as a config table. `--steps` and `--count` mean different keys
/// per subcommand.
pub fn flag_layer(g: &Global, cmd: &Command) -> Result<Table, CliError> {
    let mut t = Table::new();
    if let Some(s) = g.seed {
        let s = i64::try_from(s).map_err(|_| CliError::Usage("seed must fit in i64".into()))?;
        put(&mut t, "seed", Value::Integer(s));
    }
    let strings = [
        ("out", &g.out),
        ("solver", &g.solver),
        ("dataset", &g.dataset),
        ("checkpoint", &g.checkpoint),
        ("suite", &g.suite),
    ];
    for (k, v) in strings {
        if let Some(v) = v {
            put(&mut t, k, Value::String(v.clone()));
        }
    }
    if let Command::GenData { name: Some(n) } = cmd {
        put(&mut t, "dataset", Value::String(n.clone()));
    }
    if g.exact {
        put(&mut t, "exact", Value::Boolean(true));
    }
    if let Some(s) = g.steps {
        let key = match cmd {
            Command::Train => "train_steps",
            Command::Interpolate => "interp_steps",
            _ => "euler_steps",
        };
        put(&mut t, key, Value::Integer(s as i64));
    }
    if let Some(c) = g.count {
        let key = match cmd {
            Command::GenData { .. } | Command::Train => "count",
            Command::Verify => "verify_count",
            _ => "sample_count",
        };
        put(&mut t, key, Value::Integer(c as i64));
    }
    for kv in &g.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")));
        };
        put(&mut t, k.trim(), parse_scalar(v.trim()));
    }
    Ok(t)
}

pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // help and version
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string().trim_end().to_string())),
    };
    let flags = flag_layer(&cli.global, &cli.command)?;
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), std::env::vars(), flags)?;
    let manifest = match cli.command {
        Command::GenData { .. } => commands::gen_data(cfg),
        Command::Train => commands::train_cmd(cfg),
        Command::Sample => commands::sample(cfg),
        Command::Likelihood => commands::likelihood(cfg),
        Command::Verify => commands::verify_cmd(cfg),
        Command::Interpolate => commands::interpolate(cfg),
        Command::FieldEval => commands::field_eval(cfg),
    }?;
    println!("{}", manifest.display());
    Ok(())
}
