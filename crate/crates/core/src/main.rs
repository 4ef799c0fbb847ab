use clap::Parser;

use parttrack::cli::{exit_code, run, Cli};

fn main() {
    parttrack::alloc::retain_freed_memory();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
