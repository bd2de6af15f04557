//! Binary entry point: parse arguments, dispatch, exit with the stable code.

use clap::Parser;

fn main() {
    let cli = moe_clusters::cli::Cli::parse();
    std::process::exit(moe_clusters::cli::run(cli));
}
