use clap::Parser;
use rssgen::cli::{error_json, run, Cli};
use rssgen::Error;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", error_json(&Error::Usage(e.to_string().trim().to_string())));
            std::process::exit(2);
        }
    };
    match run(&cli) {
        Ok(v) => println!("{}", serde_json::to_string_pretty(&v).expect("summary serializes")),
        Err(e) => {
            eprintln!("{}", error_json(&e));
            std::process::exit(1);
        }
    }
}
