use std::process::ExitCode;

use clap::Parser;
use rec_cbm_cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REC_CBM_LOG", "info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse_from(&argv);
    let command = cli.command.name();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "error": {
                    "command": command,
                    "message": e.to_string(),
                    "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
                }
            });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
