use std::io::Write;

use coco_cli::error::EXIT_OK;
use coco_cli::CliError;

fn main() {
    match coco_cli::run(std::env::args()) {
        Ok(msg) => {
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = writeln!(std::io::stdout(), "{msg}");
            std::process::exit(EXIT_OK);
        }
        Err(CliError::Usage(e)) => e.exit(),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
