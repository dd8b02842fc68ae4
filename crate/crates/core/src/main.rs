use clap::Parser;

use netlearn::cli::{exit_code, hint, run, Cli, EXIT_OK};

fn main() {
    let cli = Cli::parse();
    let code = match run(&cli.command) {
        Ok(files) => {
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("netlearn {}: error: {e}", cli.command.name());
            if let Some(h) = hint(&e) {
                eprintln!("  hint: {h}");
            }
            exit_code(&e)
        }
    };
    std::process::exit(code);
}
