use std::process::ExitCode;

fn main() -> ExitCode {
    speq_cli::run(std::env::args_os())
}
