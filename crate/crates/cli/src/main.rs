use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match xsmiss_cli::run(std::env::args()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(xsmiss_cli::CliError::Usage(msg)) => {
            eprintln!("{}", msg.trim_end());
            ExitCode::from(xsmiss_cli::EXIT_USAGE as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
