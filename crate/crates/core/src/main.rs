use std::process::ExitCode;

fn main() -> ExitCode {
    let code = singlora_lab::expcli::run_cli(std::env::args_os());
    ExitCode::from(code as u8)
}
