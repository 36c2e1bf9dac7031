use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = luq_cli::Cli::parse();
    match luq_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Some messages already embed their cause; print each text once.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(luq_cli::exit_code(&e))
        }
    }
}
