mod args;
mod commands;
mod failure;
mod files;
mod manifest;

use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind as ClapErrorKind;
use clap::Parser;

use args::{Cli, Command};
use commands::Outcome;
use failure::{Failure, EXIT_OK, EXIT_USAGE};
use manifest::RunManifest;

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Sample(_) => "sample",
        Command::Fit(_) => "fit",
        Command::Verify(_) => "verify",
        Command::Identify(_) => "identify",
        Command::Serve(_) => "serve",
        Command::Attack(_) => "attack",
        Command::Cost(_) => "cost",
        Command::Bench(_) => "bench",
        Command::Hist(_) => "hist",
        Command::MacKeygen(_) => "mac-keygen",
        Command::MacSign(_) => "mac-sign",
        Command::MacVerify(_) => "mac-verify",
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn dispatch(cli: &Cli) -> Result<Outcome, Failure> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => commands::synth(g, a),
        Command::Sample(a) => commands::sample(g, a),
        Command::Fit(a) => commands::fit(g, a),
        Command::Verify(a) => commands::verify_cmd(g, a),
        Command::Identify(a) => commands::identify(g, a),
        Command::Serve(a) => runtime()?.block_on(commands::serve_cmd(g, a)),
        Command::Attack(a) => runtime()?.block_on(commands::attack(g, a)),
        Command::Cost(a) => commands::cost(g, a),
        Command::Bench(a) => commands::bench(g, a),
        Command::Hist(a) => commands::hist(g, a),
        Command::MacKeygen(a) => commands::mac_keygen(g, a),
        Command::MacSign(a) => commands::mac_sign(g, a),
        Command::MacVerify(a) => commands::mac_verify_cmd(g, a),
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if cli.global.threads == 0 {
        return Err(Failure::Precondition("--threads must be at least 1".into()));
    }
    faer::set_global_parallelism(if cli.global.threads == 1 {
        faer::Par::Seq
    } else {
        faer::Par::rayon(cli.global.threads)
    });
    let name = subcommand_name(&cli.command);
    let mut manifest = RunManifest::new(name, cli);
    let start = Instant::now();
    let outcome = dispatch(cli)?;
    if let Some(primary) = outcome.outputs.first() {
        manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
        manifest.inputs = outcome.inputs.clone();
        manifest.outputs = outcome.outputs.clone();
        ellsig_core::io::save_json(RunManifest::path_for(primary), &manifest)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => ExitCode::from(EXIT_OK),
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
