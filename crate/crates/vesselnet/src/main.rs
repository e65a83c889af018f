use std::process::ExitCode;

fn main() -> ExitCode {
    match vesselnet::cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vesselnet: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
