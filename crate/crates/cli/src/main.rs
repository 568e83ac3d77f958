//! `genret` command-line entry point.
//!
//! Exit codes: 0 on success (including `--help`), 1 on usage errors, 2 when a
//! command fails while running.

mod args;
mod commands;

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use args::Cli;
use commands::Failure;

const USAGE: u8 = 1;
const RUNTIME: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(run(std::env::args_os().collect()))
}

fn run(argv: Vec<OsString>) -> u8 {
    let cli = match parse(argv) {
        Ok(cli) => cli,
        Err(ParseError::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { USAGE } else { 0 };
        }
        Err(ParseError::Config(msg)) => {
            eprintln!("error: {msg}");
            return USAGE;
        }
    };
    match commands::execute(&cli) {
        Ok(output) => match write_output(&cli, &output) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: writing output: {e}");
                RUNTIME
            }
        },
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            USAGE
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            RUNTIME
        }
    }
}

fn write_output(cli: &Cli, output: &str) -> std::io::Result<()> {
    match &cli.out {
        Some(path) => fs::write(path, output),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(output.as_bytes())?;
            stdout.flush()
        }
    }
}

enum ParseError {
    Clap(clap::Error),
    Config(String),
}

impl From<clap::Error> for ParseError {
    fn from(e: clap::Error) -> Self {
        ParseError::Clap(e)
    }
}

/// Parses `argv`, then re-parses with `--config` entries appended as long
/// flags for every key not already given on the command line.
fn parse(argv: Vec<OsString>) -> Result<Cli, ParseError> {
    let cli = Cli::try_parse_from(&argv)?;
    let Some(path) = &cli.config else {
        return Ok(cli);
    };
    let text = fs::read_to_string(path).map_err(|e| ParseError::Config(format!("reading {}: {e}", path.display())))?;
    let given: HashSet<String> = argv
        .iter()
        .skip(1)
        .filter_map(|a| a.to_str()?.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    let mut full = argv.clone();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ParseError::Config(format!(
                "{}:{}: expected key=value",
                path.display(),
                n + 1
            )));
        };
        let key = key.trim().trim_start_matches("--");
        if key == "config" {
            return Err(ParseError::Config(format!(
                "{}:{}: config files do not nest",
                path.display(),
                n + 1
            )));
        }
        if !given.contains(key) {
            full.push(format!("--{key}").into());
            full.push(value.trim().into());
        }
    }
    Ok(Cli::try_parse_from(full)?)
}
