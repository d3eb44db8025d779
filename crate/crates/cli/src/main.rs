use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(wabe_splat_cli::run(std::env::args_os()) as u8)
}
