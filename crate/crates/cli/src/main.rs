use clap::Parser;

fn main() -> std::process::ExitCode {
    pik_cli::run(&pik_cli::Cli::parse())
}
