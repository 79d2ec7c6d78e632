use clap::Parser;

fn main() {
    std::process::exit(fastaa::cli::run(fastaa::cli::Cli::parse()));
}
