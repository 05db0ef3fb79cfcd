use clap::Parser;
use patchcast::cli::{execute, exit_code, Cli};

fn main() {
    let cli = Cli::parse();
    let level = if cli.command.common().verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = execute(&cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    std::process::exit(exit_code(&result));
}
