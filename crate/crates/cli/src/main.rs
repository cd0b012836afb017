// SPDX-License-Identifier: MIT OR Apache-2.0

use clap::Parser;
use sinklab_cli::commands::{run, Cli};
use sinklab_cli::exit_code;

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
