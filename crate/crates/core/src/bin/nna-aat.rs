use clap::Parser;
use nna_aat::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli, std::env::vars()) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
