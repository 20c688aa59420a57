use clap::Parser;

fn main() {
    let cli = mare::cli::Cli::parse();
    if let Err(e) = mare::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
