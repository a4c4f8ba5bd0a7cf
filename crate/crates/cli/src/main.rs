use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    if let Err(e) = contam_cli::init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let code = contam_cli::run(std::env::args_os(), &mut io::stdout().lock(), &mut io::stderr().lock());
    ExitCode::from(code)
}
