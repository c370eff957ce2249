use clap::Parser;

fn main() {
    let cli = claimcraft_cli::Cli::parse();
    std::process::exit(claimcraft_cli::run(&cli, std::env::vars()));
}
