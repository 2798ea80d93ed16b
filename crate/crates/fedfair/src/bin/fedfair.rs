use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(fedfair::harness::run_cli(std::env::args()) as u8)
}
