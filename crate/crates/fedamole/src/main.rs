use clap::Parser;

fn main() {
    let cli = fedamole::cli::Cli::parse();
    if let Err(e) = fedamole::cli::execute(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
