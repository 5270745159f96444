use clap::Parser;
use gatedkv_cli::args::Cli;
use gatedkv_cli::run::dispatch;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
