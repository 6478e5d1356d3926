use clap::Parser;

use moe_rl_lab::cli::{run, Cli, WORKERS_ENV};

fn main() {
    let cli = Cli::parse();
    if let Ok(value) = std::env::var(WORKERS_ENV) {
        match value.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: {e}");
                    std::process::exit(1);
                }
            }
            _ => {
                eprintln!("error: {WORKERS_ENV} must be a positive integer, got `{value}`");
                std::process::exit(1);
            }
        }
    }
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
