use clap::Parser;

fn main() {
    let cli = dragflow_cli::commands::Cli::parse();
    if let Err(e) = dragflow_cli::commands::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
