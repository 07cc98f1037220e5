use clap::Parser;

use grat_cli::{exit_code_for, run, Cli, Outcome};

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::CheckFailure) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    };
    std::process::exit(code);
}
