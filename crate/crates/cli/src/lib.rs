// SPDX-License-Identifier: Apache-2.0

//! The `av3d` command line: `synth`, `pseudo`, `expand`, `classify`, `eval`.
//!
//! Exit codes: 0 on success, 1 for bad flags or inputs, 2 when one of our
//! own post-conditions fails (or on a panic).

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{ArgAction, Parser, Subcommand};

pub mod commands;
pub mod error;
pub mod manifest;

pub use error::{CliError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable holding the log filter.
pub const LOG_ENV: &str = "AV3D_LOG";

#[derive(Debug, Parser)]
#[command(name = "av3d", version = VERSION, about = "Auto-vocabulary 3D detection toolkit")]
pub struct Cli {
    /// JSON file whose keys mirror long flags; flags on the command line win
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for per-scene and per-feature work
    #[arg(long, short = 'j', global = true)]
    pub jobs: Option<usize>,
    /// More log output (repeatable); AV3D_LOG takes precedence
    #[arg(long, short = 'v', global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[arg(long, short = 'q', global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes, masks, vocabularies and features
    Synth(commands::synth::SynthArgs),
    /// Fit pseudo 3D boxes to the point groups selected by 2D masks
    Pseudo(commands::pseudo::PseudoArgs),
    /// Grow an embedding bank with rejection-sampled prototypes
    Expand(commands::expand::ExpandArgs),
    /// Label object features against a vocabulary bank
    Classify(commands::classify::ClassifyArgs),
    /// Score predictions: mAP, recall, semantic AUC, coverage, semantic score
    Eval(commands::eval::EvalArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Pseudo(_) => "pseudo",
            Command::Expand(_) => "expand",
            Command::Classify(_) => "classify",
            Command::Eval(_) => "eval",
        }
    }
}

// flag pairs where giving one on the command line hides the other from the file
const EXCLUSIVE: &[(&str, &str)] = &[("k", "k-fraction"), ("scenes", "scene")];

fn flag_given(argv: &[String], flag: &str) -> bool {
    let long = format!("--{flag}");
    let eq = format!("{long}=");
    argv.iter().any(|a| *a == long || a.starts_with(&eq))
}

fn config_path(argv: &[String]) -> Option<PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Appends `--key value` for every config entry whose flag is absent from
/// `argv`. Arrays repeat the flag, `true` adds a bare switch, `false` and
/// `null` are ignored.
pub fn merge_config(
    mut argv: Vec<String>,
    config: &serde_json::Map<String, serde_json::Value>,
) -> Result<Vec<String>> {
    use serde_json::Value;
    let given = argv.clone();
    for (key, value) in config {
        let flag = key.replace('_', "-");
        if flag == "config" || flag_given(&given, &flag) {
            continue;
        }
        let rival = EXCLUSIVE.iter().find_map(|&(a, b)| match flag.as_str() {
            f if f == a => Some(b),
            f if f == b => Some(a),
            _ => None,
        });
        if rival.is_some_and(|r| flag_given(&given, r)) {
            continue;
        }
        let scalar = |v: &Value| -> Result<Option<String>> {
            match v {
                Value::String(s) => Ok(Some(s.clone())),
                Value::Number(n) => Ok(Some(n.to_string())),
                _ => Err(CliError::input(format!("config key '{key}': expected a string or number"))),
            }
        };
        match value {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => argv.push(format!("--{flag}")),
            Value::Array(items) => {
                for item in items {
                    if let Some(s) = scalar(item)? {
                        argv.push(format!("--{flag}"));
                        argv.push(s);
                    }
                }
            }
            Value::Object(_) => {
                return Err(CliError::input(format!("config key '{key}': nested objects are not flags")))
            }
            v => {
                if let Some(s) = scalar(v)? {
                    argv.push(format!("--{flag}"));
                    argv.push(s);
                }
            }
        }
    }
    Ok(argv)
}

fn load_config(argv: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let value: serde_json::Value = av3d_core::io::read_json(&path)?;
    match value {
        serde_json::Value::Object(map) => merge_config(argv, &map),
        _ => Err(CliError::input(format!("{}: config must be a JSON object", path.display()))),
    }
}

fn init_logging(cli: &Cli) {
    let default = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        (false, 2) => "debug",
        _ => "trace",
    };
    let env = env_logger::Env::new().filter_or(LOG_ENV, default);
    // a second run in the same process keeps the first logger
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<()> {
    use commands::*;
    match &cli.command {
        Command::Synth(a) => synth::run(a, argv),
        Command::Pseudo(a) => pseudo::run(a, argv),
        Command::Expand(a) => expand::run(a, argv),
        Command::Classify(a) => classify::run(a, argv),
        Command::Eval(a) => eval::run(a, argv),
    }
}

fn execute(cli: &Cli, argv: &[String]) -> Result<()> {
    match cli.jobs {
        Some(0) => Err(CliError::input("--jobs must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::internal(format!("thread pool: {e}")))?;
            pool.install(|| dispatch(cli, argv))
        }
        None => dispatch(cli, argv),
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let argv = match load_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    init_logging(&cli);
    let recorded = argv.get(1..).unwrap_or_default().to_vec();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| execute(&cli, &recorded)));
    match outcome {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => {
            eprintln!("error: internal error: {} panicked", cli.command.name());
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn config_fills_missing_flags_only() {
        let cfg: serde_json::Value = serde_json::from_str(
            r#"{"theta_min": 0.6, "seed": 3, "vocab": ["a", "b"], "inference_view": true, "quiet": false}"#,
        )
        .unwrap();
        let argv = strings(&["av3d", "expand", "--seed", "9"]);
        let out = merge_config(argv, cfg.as_object().unwrap()).unwrap();
        assert_eq!(
            out,
            strings(&[
                "av3d", "expand", "--seed", "9", "--inference-view", "--theta-min", "0.6", "--vocab", "a", "--vocab",
                "b"
            ])
        );
    }

    #[test]
    fn config_respects_exclusive_pairs() {
        let cfg: serde_json::Value = serde_json::from_str(r#"{"k_fraction": 0.3}"#).unwrap();
        let out = merge_config(strings(&["av3d", "expand", "--k=4"]), cfg.as_object().unwrap()).unwrap();
        assert_eq!(out, strings(&["av3d", "expand", "--k=4"]));
    }

    #[test]
    fn config_path_forms() {
        assert_eq!(config_path(&strings(&["x", "--config", "c.json"])), Some("c.json".into()));
        assert_eq!(config_path(&strings(&["x", "--config=d.json"])), Some("d.json".into()));
        assert_eq!(config_path(&strings(&["x", "--", "--config=d.json"])), None);
    }

    #[test]
    fn nested_config_is_rejected() {
        let cfg: serde_json::Value = serde_json::from_str(r#"{"a": {"b": 1}}"#).unwrap();
        assert!(merge_config(strings(&["x"]), cfg.as_object().unwrap()).is_err());
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(run(["av3d", "--version"]), 0);
        assert_eq!(run(["av3d", "expand", "--help"]), 0);
        assert_eq!(run(["av3d", "bogus"]), 1);
        assert_eq!(run(["av3d"]), 1);
    }
}
