use std::process::ExitCode;

fn main() -> ExitCode {
    testpick::cli::run()
}
