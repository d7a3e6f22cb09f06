use clap::Parser;

fn main() {
    let cli = revdarts::cli::Cli::parse();
    std::process::exit(revdarts::cli::run(&cli));
}
