use clap::Parser;
use vcplm_cli::args::Cli;
use vcplm_cli::commands::run;

fn main() {
    match run(Cli::parse()) {
        Ok(summary) => print!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
