mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use plugmem::{Error, Result};

use args::{Cli, Command};
use commands::Ctx;
use manifest::RunManifest;

/// Exit status for usage and contract errors.
const EXIT_USAGE: u8 = 2;
/// Exit status when training produced a non-finite loss.
const EXIT_NUMERICS: u8 = 3;

fn threads() -> Result<usize> {
    match std::env::var("PLUGMEM_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("PLUGMEM_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn run(argv: Vec<String>) -> std::result::Result<(), ExitCode> {
    let cli = match Cli::try_parse_from(std::iter::once("plugmem".to_string()).chain(argv.iter().cloned())) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return if code == 0 { Ok(()) } else { Err(ExitCode::from(code)) };
        }
    };
    if let Command::Rerun { manifest_path } = &cli.command {
        return match RunManifest::read(manifest_path) {
            Ok(m) => run(m.argv),
            Err(e) => Err(fail(&e)),
        };
    }
    let threads = match threads() {
        Ok(t) => t,
        Err(e) => return Err(fail(&e)),
    };
    let ctx = Ctx {
        argv,
        manifest: cli.manifest.clone(),
        threads,
    };
    let result = match &cli.command {
        Command::Init(a) => commands::init(&ctx, a),
        Command::BuildMemory(a) => commands::build_memory_cmd(&ctx, a),
        Command::Pretrain(a) => commands::pretrain(&ctx, a),
        Command::SwapMemory(a) => commands::swap_memory(&ctx, a),
        Command::Finetune(a) => commands::finetune_cmd(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Retrieve(a) => commands::retrieve(&ctx, a),
        Command::Experiment(e) => commands::experiment(&ctx, e),
        Command::Rerun { .. } => unreachable!(),
    };
    result.map_err(|e| fail(&e))
}

fn fail(e: &Error) -> ExitCode {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error: {msg}");
    match e {
        Error::Numerics { .. } => ExitCode::from(EXIT_NUMERICS),
        _ => ExitCode::from(EXIT_USAGE),
    }
}

fn main() -> ExitCode {
    match run(std::env::args().skip(1).collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
