use clap::Parser;
use kite_cli::{error_line, execute, exit_code, Cli, EXIT_CONFIG};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("kite: error[config]: {first}");
            std::process::exit(EXIT_CONFIG);
        }
    };
    match execute(cli, args) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("{}", error_line(&e));
            std::process::exit(exit_code(&e));
        }
    }
}
