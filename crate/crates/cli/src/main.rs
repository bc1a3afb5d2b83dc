use clap::Parser;

fn main() {
    let cli = mmdag_cli::Cli::parse();
    if let Err(e) = mmdag_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
