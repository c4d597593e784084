use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(beliefq::cli::run())
}
