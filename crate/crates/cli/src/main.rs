//! `einfuse`: validate, stitch, lower, interpret and cost Einsum cascades.
//!
//! Exit codes: 0 success, 1 diagnostics, 2 usage error.

mod commands;
mod error;
mod opts;
mod output;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::{CliError, EXIT_USAGE};
use opts::{Opts, RunManifest};
use output::Sink;

#[derive(Parser, Debug)]
#[command(
    name = "einfuse",
    version,
    about = "Fusion planning and cost analysis for Einsum cascades"
)]
struct Cli {
    /// Repeat the run recorded in a manifest (written as manifest.json by any `--out` run).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a cascade and list every problem found.
    Validate(Opts),
    /// Group Einsums under each policy and report the plan.
    Stitch(Opts),
    /// Print the loop nest of each policy.
    Lower(Opts),
    /// Interpret fused and unfused schedules and compare the results.
    Run(Opts),
    /// Per-group traffic and roofline latency as CSV.
    Cost(Opts),
    /// Side-by-side speedups, traffic reductions and end-to-end scenarios.
    Compare(Opts),
}

impl Command {
    fn split(self) -> (&'static str, Opts) {
        match self {
            Command::Validate(o) => ("validate", o),
            Command::Stitch(o) => ("stitch", o),
            Command::Lower(o) => ("lower", o),
            Command::Run(o) => ("run", o),
            Command::Cost(o) => ("cost", o),
            Command::Compare(o) => ("compare", o),
        }
    }
}

fn resolve(cli: Cli) -> Result<RunManifest, CliError> {
    match (cli.manifest, cli.command) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
        }
        (None, Some(cmd)) => {
            let (command, opts) = cmd.split();
            Ok(RunManifest {
                command: command.to_string(),
                opts,
            })
        }
        (None, None) => Err(CliError::Usage("missing command; see --help".into())),
    }
}

fn execute(m: &RunManifest, out: &mut String) -> Result<(), CliError> {
    let o = &m.opts;
    let sink = Sink::new(o.out.as_deref())?;
    let result = match m.command.as_str() {
        "validate" => commands::validate_cmd(o, out),
        "stitch" => commands::stitch_cmd(o, &sink, out),
        "lower" => commands::lower_cmd(o, &sink, out),
        "run" => commands::run_cmd(o, &sink, out),
        "cost" => commands::cost_cmd(o, &sink, out),
        "compare" => commands::compare_cmd(o, &sink, out),
        other => return Err(CliError::Usage(format!("unknown command `{other}`"))),
    };
    if sink.has_dir() {
        let json = serde_json::to_string_pretty(m).expect("manifest serializes");
        sink.file("manifest.json", format!("{json}\n").as_bytes())?;
    }
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json_hint = std::env::args().any(|a| a == "--error-json");
    let manifest = match resolve(cli) {
        Ok(m) => m,
        Err(e) => return fail(&e, json_hint),
    };
    let mut out = String::new();
    let result = execute(&manifest, &mut out);
    let json = manifest.opts.error_json || json_hint;
    // A JSON failure report is the whole of stdout so callers can parse it.
    if result.is_ok() || !json {
        let mut stdout = std::io::stdout().lock();
        let _ = stdout.write_all(out.as_bytes());
        let _ = stdout.flush();
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e, json),
    }
}

fn fail(e: &CliError, json: bool) -> ExitCode {
    if json {
        println!("{}", e.to_json());
    } else {
        eprintln!("error: {}", e.message());
    }
    ExitCode::from(u8::try_from(e.code()).unwrap_or(EXIT_USAGE as u8))
}
