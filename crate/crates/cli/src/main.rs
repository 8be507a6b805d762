use clap::Parser;

fn main() {
    std::process::exit(erratic2bsde_cli::run(erratic2bsde_cli::Cli::parse()));
}
