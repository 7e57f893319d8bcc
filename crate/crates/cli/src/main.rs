use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(evtf_cli::main_from(std::env::args_os()))
}
