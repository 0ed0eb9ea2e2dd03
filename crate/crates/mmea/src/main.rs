use clap::Parser;
use mmea::cli::{self, Command};

#[derive(Parser)]
#[command(
    name = "mmea",
    version,
    about = "Multi-modal entity alignment: synthetic data, training, evaluation, weight inspection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help/version are not usage errors
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    match cli::run(cli.command) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(cli::exit_code(&err));
        }
    }
}
