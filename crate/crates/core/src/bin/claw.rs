use std::process::ExitCode;

fn main() -> ExitCode {
    claw_core::cli::run()
}
