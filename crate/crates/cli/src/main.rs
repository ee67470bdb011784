mod args;
mod commands;
mod exit;
mod manifest;
mod settings;
mod workspace;

use clap::Parser;

use args::{Cli, Command};
use cape_core::Execution;
use commands::Runner;
use exit::{CliError, EXIT_CONFIG};

fn jobs_flag(cmd: &Command) -> Option<usize> {
    match cmd {
        Command::Setup(a) => a.common.jobs,
        Command::Perturb(a) => a.common.jobs,
        Command::Attack(a) => a.common.jobs,
        Command::Evaluate(a) => a.common.jobs,
        Command::DpCheck(a) => a.jobs,
        Command::ServeCheck(a) => a.common.jobs,
    }
}

fn dispatch(cmd: Command, run: Runner) -> Result<(), CliError> {
    match cmd {
        Command::Setup(a) => commands::setup(a, run),
        Command::Perturb(a) => commands::perturb(a, run),
        Command::Attack(a) => commands::attack(a, run),
        Command::Evaluate(a) => commands::evaluate(a, run),
        Command::DpCheck(a) => commands::dp_check(a, run),
        Command::ServeCheck(a) => commands::serve_check(a, run),
    }
}

#[cfg(feature = "parallel")]
fn execute(cmd: Command, jobs: usize) -> Result<(), CliError> {
    if jobs == 1 {
        return dispatch(cmd, Runner { exec: Execution::Sequential, jobs });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| dispatch(cmd, Runner { exec: Execution::Parallel, jobs }))
}

#[cfg(not(feature = "parallel"))]
fn execute(cmd: Command, _jobs: usize) -> Result<(), CliError> {
    dispatch(cmd, Runner { exec: Execution::Sequential, jobs: 1 })
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let jobs = jobs_flag(&cli.command).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        std::process::exit(EXIT_CONFIG);
    }
    if let Err(e) = execute(cli.command, jobs) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
