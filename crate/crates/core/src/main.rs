use std::process::ExitCode;

fn main() -> ExitCode {
    agestruct::cli::main()
}
