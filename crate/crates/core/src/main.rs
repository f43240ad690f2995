use clap::Parser;

fn main() {
    let cli = epan::cli::Cli::parse();
    if let Err(e) = epan::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
