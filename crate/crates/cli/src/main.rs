use clap::Parser;

use strm_cli::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = strm_cli::run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
