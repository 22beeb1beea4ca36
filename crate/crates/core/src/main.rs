use std::process::ExitCode;

fn main() -> ExitCode {
    glap::cli::run(std::env::args_os())
}
