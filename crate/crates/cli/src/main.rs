mod commands;
mod plot;

use std::process::ExitCode;

use clap::Parser;

use commands::{Cli, UsageError};

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    if let Some(e) = err.downcast_ref::<UsageError>() {
        return (2, e.kind);
    }
    if let Some(e) = err.downcast_ref::<chain_core::Error>() {
        let code = match e {
            chain_core::Error::Argument(_)
            | chain_core::Error::Config(_)
            | chain_core::Error::Format { .. } => 2,
            chain_core::Error::Io { source, .. }
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                2
            }
            _ => 1,
        };
        return (code, e.kind());
    }
    (1, "runtime")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = exit_code(&err);
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error kind={kind} exit={code} msg={msg:?}");
            ExitCode::from(code)
        }
    }
}
