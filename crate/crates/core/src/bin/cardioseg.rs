use std::process::ExitCode;

fn main() -> ExitCode {
    cardioseg::cli::run(std::env::args_os()).into()
}
