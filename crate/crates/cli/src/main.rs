use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FAE_LOG", "warn")).init();
    let stdin = io::stdin();
    let mut input = stdin.lock();
    let mut output = io::stdout();
    let code = fae_cli::main_with_args(std::env::args_os(), &mut input, &mut output);
    ExitCode::from(code as u8)
}
