use std::process::ExitCode;

fn main() -> ExitCode {
    mcinet::cli::main()
}
