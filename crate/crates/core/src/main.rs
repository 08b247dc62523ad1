use std::process::ExitCode;

fn main() -> ExitCode {
    uavssl::cli::main_with_args(std::env::args_os())
}
