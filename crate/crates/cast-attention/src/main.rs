//! `cast` binary entry point.

use clap::Parser;

fn main() {
    let cli = cast_attention::cli::Cli::parse();
    std::process::exit(cast_attention::cli::run(cli));
}
