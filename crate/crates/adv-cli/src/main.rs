use clap::Parser;

use adv_cli::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            std::process::exit(e.code);
        }
    }
}
