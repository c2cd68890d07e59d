use clap::Parser;
use rstar4d::cli::{exit_code, run, Cli};

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("rstar4d: {e}");
        std::process::exit(exit_code(&e));
    }
}
