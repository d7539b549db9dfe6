//! The `forge` command line. Every command except `init` and `serve` is a
//! short-lived client of a running service.

pub mod args;
pub mod builtins;
mod commands;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;

pub use args::Cli;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input from the operator: unreadable files, malformed records.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Forge(#[from] forge_core::Error),
    /// `plan status --wait` gave up or the plan failed.
    #[error("{0}")]
    Unfinished(String),
}

impl CliError {
    /// 2 for anything the operator typed or wrote wrong, 1 for the rest.
    pub fn exit_code(&self) -> u8 {
        use forge_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Forge(E::Syntax { .. } | E::MixedVariantSet { .. } | E::InvalidPlan { .. }) => 2,
            CliError::Forge(_) | CliError::Unfinished(_) => 1,
        }
    }

    fn body(&self) -> serde_json::Value {
        match self {
            CliError::Usage(m) => serde_json::json!({"kind": "UsageError", "message": m}),
            CliError::Unfinished(m) => serde_json::json!({"kind": "Unfinished", "message": m}),
            CliError::Forge(e) => serde_json::json!({
                "code": e.code(),
                "kind": e.kind(),
                "message": e.to_string(),
                "detail": e,
            }),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Where results go: pretty JSON or human text on stdout.
#[derive(Debug, Clone, Copy)]
pub struct Output {
    pub json: bool,
}

impl Output {
    pub fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) {
        let mut out = std::io::stdout().lock();
        let _ = if self.json {
            let s = serde_json::to_string_pretty(value).expect("serializable output");
            writeln!(out, "{s}")
        } else {
            let t = text();
            if t.is_empty() {
                Ok(())
            } else {
                writeln!(out, "{}", t.trim_end_matches('\n'))
            }
        };
        let _ = out.flush();
    }

    /// One compact JSON line, for long-running loops.
    pub fn line<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) {
        let mut out = std::io::stdout().lock();
        let _ = if self.json {
            writeln!(out, "{}", serde_json::to_string(value).expect("serializable output"))
        } else {
            writeln!(out, "{}", text())
        };
        let _ = out.flush();
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    commands::dispatch(cli)
}

/// Parses the process arguments, runs and maps the result to an exit code.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // An unfinished plan has already printed its status.
            if json && !matches!(e, CliError::Unfinished(_)) {
                let body = serde_json::json!({"error": e.body()});
                println!("{}", serde_json::to_string_pretty(&body).expect("json"));
            }
            match &e {
                CliError::Forge(f) => eprintln!("error[{}]: {e}", f.kind()),
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}
