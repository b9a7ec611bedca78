use std::process::ExitCode;

/// Exit codes are part of the interface: 0 ok, 2 usage/config/data problems,
/// 3 numeric faults (non-finite loss, degenerate statistic).
fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match udg_cli::run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
